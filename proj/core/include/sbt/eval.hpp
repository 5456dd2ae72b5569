// SPDX-License-Identifier: Apache-2.0
//
// Test-set evaluation, method comparison, super-sampled decoding and latent
// trajectory export.

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbt/curvegen.hpp"
#include "sbt/net.hpp"
#include "sbt/train.hpp"

namespace sbt {

/// Raised for requests a model's strategy cannot serve (e.g. super-sampling
/// a baseline that has no continuous trajectory).
class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Maps `batch` curves of `len` points (back to back, 2 floats per point) to
/// their reconstructions of the same size.
using Reconstructor =
    std::function<std::vector<float>(std::span<const float> x, std::size_t batch, std::size_t len)>;

inline constexpr std::size_t kDefaultTestCount = 10000;

/// Mean over curves of the per-curve mean squared coordinate error. Curves are
/// drawn from the test split and summed in index order.
double eval_mse(const Reconstructor& model, curves::Family family, std::size_t len,
                std::size_t count = kDefaultTestCount, std::uint64_t seed = 0);
/// Throws std::invalid_argument when the model does not produce 2D tokens.
double eval_mse(const Autoencoder<float>& model, curves::Family family,
                std::size_t count = kDefaultTestCount, std::uint64_t seed = 0);

struct MethodSpec {
  std::string label;
  Strategy strategy = Strategy::spline;
};

struct CompareOptions {
  std::vector<std::uint64_t> seeds = {0};
  std::size_t test_count = 1000;
  std::uint64_t test_seed = 0;
  /// When set, each run trains into out_dir/<family>-<label>-s<seed>.
  std::string out_dir;
  std::function<void(const std::string&)> log;
  const std::atomic<bool>* stop = nullptr;
};

struct CompareCell {
  std::vector<double> per_seed;
  double mean = 0.0;
  double seconds = 0.0;
  bool collapsed = false;
};

/// Rows are methods, columns are families.
struct CompareTable {
  std::vector<MethodSpec> methods;
  std::vector<curves::Family> families;
  std::vector<std::vector<CompareCell>> cells;  // [method][family]
  bool interrupted = false;

  const CompareCell& at(std::size_t method, std::size_t family) const {
    return cells[method][family];
  }
  /// Strict "spline row beats the row of `rival`" in the given family column;
  /// false when either row is missing.
  bool spline_beats(Strategy rival, std::size_t family) const;
  /// spline < alibi and spline < alibi_cat in every family column.
  bool ordering_holds() const;

  /// method,<family>... followed by one row of seed-mean MSEs per method.
  void write_csv(std::ostream& out) const;
  /// Aligned table plus the ordering flags.
  void write_text(std::ostream& out) const;
};

/// Trains every (method, family, seed) combination from the same base model
/// and training configuration, then evaluates each on the shared test set.
/// The base model's latent_dim is replaced by the family's default when
/// `family_latent_dims` is set.
CompareTable compare_methods(const std::vector<curves::Family>& families,
                             const std::vector<MethodSpec>& methods, const ModelConfig& base,
                             const TrainConfig& train, const CompareOptions& opts,
                             bool family_latent_dims = true);

std::vector<MethodSpec> default_methods();

/// Number of output tokens for a super-sampling factor: factor * (len - 1) + 1.
std::size_t supersampled_length(std::size_t len, std::size_t factor);

/// Encodes `points` (len x 2) once and decodes on a grid `factor` times
/// denser. Throws UnsupportedOperation for non-spline models and
/// std::invalid_argument for factors outside 1..4.
std::vector<float> supersample(const Autoencoder<float>& model, std::span<const float> points,
                               std::size_t factor);

struct SupersampleReport {
  std::size_t factor = 0;
  std::size_t out_len = 0;
  double trajectory_max_diff = 0.0;  // shared-parameter trajectory rows vs plain decode
  double decode_mse = 0.0;           // every factor-th decoded token vs plain decode
};

/// Compares the dense decode against the plain one on `samples`.
SupersampleReport supersample_consistency(const Autoencoder<float>& model,
                                          const std::vector<curves::Sample>& samples,
                                          std::size_t factor);

/// CSV with header curve,kind,index,z0..z{w-1}: `len` rows of kind "trajectory"
/// (index = position along the trajectory) followed by n_ctrl rows of kind
/// "control" per curve.
void export_trajectories(const Autoencoder<float>& model,
                         const std::vector<std::vector<float>>& curves, std::ostream& out);

}  // namespace sbt
