// SPDX-License-Identifier: Apache-2.0
//
// Training loop: fresh synthetic batches every step, RAdam with L2 weight
// decay, linear warmup into cosine annealing, global-norm clipping, periodic
// validation with checkpoints, and a guard against control-point collapse.

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbt/config.hpp"
#include "sbt/curvegen.hpp"
#include "sbt/net.hpp"

namespace sbt {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t total_steps = 50000;
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  std::size_t warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t eval_every = 1000;
  std::uint64_t seed = 0;
  /// Unset means 1e-4 * sqrt(d).
  std::optional<double> collapse_epsilon;
  std::size_t collapse_patience = 5;
  /// Global gradient-norm bound; 0 disables clipping.
  double clip_norm = 1.0;
  std::size_t val_count = 1024;

  void validate() const;
  double resolved_collapse_epsilon(std::size_t latent_dim) const;

  KeyValues to_keyvalues() const;
  /// min_lr defaults to base_lr / 100 when absent. Unknown keys throw.
  static TrainConfig from_keyvalues(const KeyValues& kv);
  static const std::vector<std::string>& keys();
};

/// Model, optimisation and data settings of one run, stored as a single flat
/// key=value file. `seed` drives both weight initialisation and data.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  curves::Family family = curves::Family::lissajous;

  KeyValues to_keyvalues() const;
  static RunConfig from_keyvalues(const KeyValues& kv);
};

/// Per-family defaults (latent size, batch, learning rate, depth, width).
RunConfig default_run_config(curves::Family family, Strategy strategy);

template <typename T>
struct RAdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m, v;
};

struct RAdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// rho_inf = 2 / (1 - beta2) - 1
double radam_rho_inf(double beta2);
/// rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t)
double radam_rho(double beta2, std::size_t t);

/// One RAdam update. A parameter without a gradient is treated as having a
/// zero gradient. Returns false, leaving parameters and state untouched, when
/// any gradient is non-finite.
template <typename T>
bool radam_step(std::span<ad::Parameter<T>* const> params, RAdamState<T>& state, double lr,
                const RAdamHyper& hyper);

/// Linear warmup to base_lr, then cosine decay to min_lr at total_steps.
double cosine_lr(std::size_t step, const TrainConfig& cfg);

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before scaling.
template <typename T>
double clip_grad_norm(std::span<ad::Parameter<T>* const> params, double max_norm);

struct CollapseReport {
  double spread = 0.0;
  bool collapsed = false;
};

/// latents [batch, n_ctrl, d]. spread = mean over the batch of the largest
/// pairwise distance between control points; collapsed iff spread < epsilon.
CollapseReport detect_collapse(std::span<const float> latents, std::size_t batch,
                               std::size_t n_ctrl, std::size_t dim, double epsilon);
CollapseReport detect_collapse(std::span<const double> latents, std::size_t batch,
                               std::size_t n_ctrl, std::size_t dim, double epsilon);

struct MetricRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over steps since the previous row; NaN at step 0
  double val_mse = 0.0;
  double collapse_spread = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,lr,train_loss,val_mse,collapse_spread";
std::string format_metric_row(const MetricRow& row);

enum class RunStatus { completed, collapsed, interrupted };

struct TrainResult {
  RunStatus status = RunStatus::completed;
  std::size_t steps_done = 0;
  std::size_t skipped_steps = 0;
  std::vector<MetricRow> metrics;
  double seconds = 0.0;
  std::string final_checkpoint;  // empty when nothing was written
};

struct RunOptions {
  /// When set, receives checkpoints, metrics.csv and resolved.cfg.
  std::string out_dir;
  /// Keep a checkpoint for every evaluation, not just final.sbtf.
  bool keep_step_checkpoints = true;
  std::function<void(const MetricRow&)> on_eval;
  std::function<void(const std::string&)> log;
  const std::atomic<bool>* stop = nullptr;
};

/// Trains `model` in place.
TrainResult train_run(Autoencoder<float>& model, const TrainConfig& cfg, curves::Family family,
                      const RunOptions& opts = {});

/// Validation metrics on `count` curves of the val split.
struct ValidationReport {
  double mse = 0.0;
  double spread = 0.0;
};
ValidationReport validate_model(const Autoencoder<float>& model, curves::Family family,
                                std::size_t count, std::uint64_t seed);

/// Keeps freed training buffers mapped so later steps avoid page-fault churn.
void tune_allocator();

}  // namespace sbt
