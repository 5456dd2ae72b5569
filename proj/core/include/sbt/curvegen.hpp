// SPDX-License-Identifier: Apache-2.0
//
// Synthetic 2D curve families with a known number of free parameters:
//
//   lissajous     (a, b, delta)       x = sin(a tau + delta), y = sin(b tau)
//   hypotrochoid  (R, r, rho, s)      rolling-circle trace over theta in [0, 6 pi]
//   bezier2       (x, y)              quadratic Bezier, endpoints (-1,0) and (1,0)
//   bezier64      64 walk steps       degree-31 Bezier through a random-walk polygon
//
// Parameters are drawn from per-sample streams keyed by (seed, family, split,
// index), so any sample can be regenerated independently of the others.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace sbt::curves {

enum class Family { lissajous, hypotrochoid, bezier2, bezier64 };
enum class Split { train, val, test };

std::string to_string(Family f);
std::string to_string(Split s);
/// Throws std::invalid_argument listing the valid names.
Family parse_family(const std::string& name);
Split parse_split(const std::string& name);
const std::vector<Family>& all_families();

/// Free parameters of a family: 3, 4, 2 and 64.
std::size_t param_count(Family f);

/// Every generated coordinate satisfies |x|, |y| <= kScaleBound.
inline constexpr double kScaleBound = 1.5;
inline constexpr std::size_t kDefaultLength = 256;

struct CurveParams {
  Family family = Family::lissajous;
  std::vector<double> values;
};

/// Throws std::invalid_argument when the vector has the wrong length or a
/// value lies outside the family's domain.
void check_domain(const CurveParams& p);

/// L x 2 row-major points.
std::vector<double> gen_curve(const CurveParams& p, std::size_t len = kDefaultLength);

CurveParams draw_params(Family f, Split split, std::uint64_t seed, std::uint64_t index);

struct Sample {
  CurveParams params;
  std::vector<double> points;  // L x 2
};

/// Samples first_index .. first_index + count - 1 of the (family, split, seed) stream.
std::vector<Sample> sample_dataset(Family f, std::size_t count, Split split, std::uint64_t seed,
                                   std::size_t len = kDefaultLength,
                                   std::uint64_t first_index = 0);

/// Points of all samples back to back, converted to float.
std::vector<float> stack_points(const std::vector<Sample>& samples);

/// One line per sample: family, parameters, then the L x 2 coordinates.
void write_dataset_csv(std::ostream& out, const std::vector<Sample>& samples);

}  // namespace sbt::curves
