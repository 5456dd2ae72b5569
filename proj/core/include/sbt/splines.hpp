// SPDX-License-Identifier: Apache-2.0
//
// B-spline and Bezier evaluation in double precision.
//
// Conventions: `degree` is the polynomial degree k. A curve with n+1 control
// points has n+k+2 knots and the valid parameter range [t_k, t_{n+1}]. Knot
// vectors are affinely normalized at construction so that this range is
// always [0, 1]. The last non-empty knot span is treated as closed on the
// right, so t = 1 is a valid evaluation point.

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace sbt::splines {

class KnotVector {
 public:
  /// Validates and normalizes `knots` for a degree-`degree` curve.
  /// Throws std::invalid_argument on decreasing knots, degree < 0, an empty
  /// valid range, or fewer than 2*(degree+1) knots.
  KnotVector(std::vector<double> knots, int degree);

  /// Open-uniform (clamped) knots: end multiplicity degree+1, uniform interior.
  static KnotVector clamped_uniform(std::size_t num_control_points, int degree);

  int degree() const { return degree_; }
  std::size_t size() const { return knots_.size(); }
  std::size_t num_control_points() const { return knots_.size() - degree_ - 1; }
  double operator[](std::size_t i) const { return knots_[i]; }
  std::span<const double> knots() const { return knots_; }

  /// Multiplicity of the knot value at index i.
  std::size_t multiplicity(std::size_t i) const;

  /// Index s of the span with t_s <= t < t_{s+1}; t = 1 maps to the last
  /// non-empty span. Throws std::domain_error outside [0, 1].
  std::size_t find_span(double t) const;

 private:
  std::vector<double> knots_;
  int degree_;
};

class ControlPolygon {
 public:
  ControlPolygon() = default;
  /// `coords` holds size*dim values, point-major.
  ControlPolygon(std::size_t dim, std::vector<double> coords);
  static ControlPolygon from_points(const std::vector<std::vector<double>>& points);

  std::size_t size() const { return dim_ == 0 ? 0 : coords_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> point(std::size_t i) const {
    return {coords_.data() + i * dim_, dim_};
  }
  std::span<double> point(std::size_t i) { return {coords_.data() + i * dim_, dim_}; }
  std::span<const double> coords() const { return coords_; }

 private:
  std::size_t dim_ = 0;
  std::vector<double> coords_;
};

struct SampledCurve {
  std::size_t dim = 0;
  std::vector<double> samples;  // L x dim, row-major
  std::vector<double> params;   // L parameter values in [0, 1]

  std::size_t size() const { return params.size(); }
  std::span<const double> row(std::size_t j) const {
    return {samples.data() + j * dim, dim};
  }
};

/// Dense Jacobian d s(t_j) / d p_i, shape (L*dim) x (num_points*dim), row-major.
struct Jacobian {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// N_{i,k}(t) by Cox-de Boor triangular-table iteration, 0/0 taken as 0.
double basis(std::size_t i, int degree, double t, const KnotVector& knots);

/// All N_{i,k}(t) for i = 0..n. Only the k+1 entries around the span are nonzero.
std::vector<double> basis_all(const KnotVector& knots, double t);

std::vector<double> eval_spline(const ControlPolygon& polygon, const KnotVector& knots,
                                double t);

/// Bernstein weights of the cubic Bezier at t.
std::array<double, 4> cubic_bernstein(double t);

std::vector<double> eval_cubic_bezier(const ControlPolygon& polygon, double t);

/// Bezier of degree polygon.size()-1 in Bernstein form.
std::vector<double> eval_bezier(const ControlPolygon& polygon, double t);

/// t_j = j / (L - 1), j = 0..L-1. Throws std::invalid_argument for L < 2.
std::vector<double> uniform_params(std::size_t count);

/// Samples the Bezier curve defined by `polygon` at uniform parameters.
SampledCurve sample_uniform(const ControlPolygon& polygon, std::size_t count);

/// Samples a B-spline at uniform parameters over its normalized range.
SampledCurve sample_uniform(const ControlPolygon& polygon, const KnotVector& knots,
                            std::size_t count);

Jacobian grad_wrt_controls(const ControlPolygon& polygon, const KnotVector& knots,
                           std::span<const double> params);

}  // namespace sbt::splines
