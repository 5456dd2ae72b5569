// SPDX-License-Identifier: Apache-2.0

#include "sbt/splines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sbt::splines {

namespace {

void check_param(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error("spline parameter " + std::to_string(t) + " outside [0, 1]");
  }
}

}  // namespace

KnotVector::KnotVector(std::vector<double> knots, int degree)
    : knots_(std::move(knots)), degree_(degree) {
  if (degree_ < 0) throw std::invalid_argument("knot vector: negative degree");
  const auto k = static_cast<std::size_t>(degree_);
  if (knots_.size() < 2 * (k + 1)) {
    throw std::invalid_argument("knot vector: need at least 2*(degree+1) knots, got " +
                                std::to_string(knots_.size()));
  }
  for (std::size_t i = 1; i < knots_.size(); ++i) {
    if (!(knots_[i] >= knots_[i - 1])) {
      throw std::invalid_argument("knot vector: knots must be nondecreasing");
    }
  }
  const std::size_t n = knots_.size() - k - 2;  // index of the last control point
  const double lo = knots_[k];
  const double hi = knots_[n + 1];
  if (!(hi > lo)) throw std::invalid_argument("knot vector: empty valid range");
  for (double& v : knots_) v = (v - lo) / (hi - lo);
}

KnotVector KnotVector::clamped_uniform(std::size_t num_control_points, int degree) {
  if (degree < 0) throw std::invalid_argument("clamped_uniform: negative degree");
  const auto k = static_cast<std::size_t>(degree);
  if (num_control_points < k + 1) {
    throw std::invalid_argument("clamped_uniform: need at least degree+1 control points");
  }
  const std::size_t m = num_control_points + k + 1;
  const std::size_t interior = num_control_points - k - 1;
  std::vector<double> knots(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (i <= k) {
      knots[i] = 0.0;
    } else if (i >= num_control_points) {
      knots[i] = 1.0;
    } else {
      knots[i] = static_cast<double>(i - k) / static_cast<double>(interior + 1);
    }
  }
  return KnotVector(std::move(knots), degree);
}

std::size_t KnotVector::multiplicity(std::size_t i) const {
  return static_cast<std::size_t>(std::count(knots_.begin(), knots_.end(), knots_.at(i)));
}

std::size_t KnotVector::find_span(double t) const {
  check_param(t);
  const auto k = static_cast<std::size_t>(degree_);
  const std::size_t n = num_control_points() - 1;
  if (t >= 1.0) {
    std::size_t s = n;
    while (s > k && !(knots_[s] < knots_[s + 1])) --s;
    return s;
  }
  // Largest s in [k, n] with knots[s] <= t.
  const auto first = knots_.begin() + static_cast<std::ptrdiff_t>(k);
  const auto last = knots_.begin() + static_cast<std::ptrdiff_t>(n + 1);
  const auto it = std::upper_bound(first, last, t);
  return static_cast<std::size_t>(it - knots_.begin()) - 1;
}

ControlPolygon::ControlPolygon(std::size_t dim, std::vector<double> coords)
    : dim_(dim), coords_(std::move(coords)) {
  if (dim_ == 0) throw std::invalid_argument("control polygon: dimension must be >= 1");
  if (coords_.size() % dim_ != 0) {
    throw std::invalid_argument("control polygon: coordinate count not a multiple of dim");
  }
}

ControlPolygon ControlPolygon::from_points(const std::vector<std::vector<double>>& points) {
  if (points.empty()) throw std::invalid_argument("control polygon: no points");
  const std::size_t dim = points.front().size();
  std::vector<double> coords;
  coords.reserve(points.size() * dim);
  for (const auto& p : points) {
    if (p.size() != dim) throw std::invalid_argument("control polygon: mixed dimensions");
    coords.insert(coords.end(), p.begin(), p.end());
  }
  return ControlPolygon(dim, std::move(coords));
}

double basis(std::size_t i, int degree, double t, const KnotVector& knots) {
  if (degree < 0) throw std::invalid_argument("basis: negative degree");
  const auto k = static_cast<std::size_t>(degree);
  if (i + k + 1 >= knots.size()) throw std::invalid_argument("basis: index out of range");
  const std::size_t span = knots.find_span(t);

  std::vector<double> table(k + 1);
  for (std::size_t j = 0; j <= k; ++j) table[j] = (i + j == span) ? 1.0 : 0.0;
  for (std::size_t p = 1; p <= k; ++p) {
    for (std::size_t j = 0; j + p <= k; ++j) {
      const std::size_t a = i + j;
      const double left_den = knots[a + p] - knots[a];
      const double right_den = knots[a + p + 1] - knots[a + 1];
      const double left = left_den > 0.0 ? (t - knots[a]) / left_den : 0.0;
      const double right = right_den > 0.0 ? (knots[a + p + 1] - t) / right_den : 0.0;
      table[j] = left * table[j] + right * table[j + 1];
    }
  }
  return table[0];
}

std::vector<double> basis_all(const KnotVector& knots, double t) {
  const auto k = static_cast<std::size_t>(knots.degree());
  const std::size_t span = knots.find_span(t);
  std::vector<double> local(k + 1, 0.0), left(k + 1, 0.0), right(k + 1, 0.0);
  local[0] = 1.0;
  for (std::size_t j = 1; j <= k; ++j) {
    left[j] = t - knots[span + 1 - j];
    right[j] = knots[span + j] - t;
    double saved = 0.0;
    for (std::size_t r = 0; r < j; ++r) {
      const double tmp = local[r] / (right[r + 1] + left[j - r]);
      local[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    local[j] = saved;
  }
  std::vector<double> out(knots.num_control_points(), 0.0);
  for (std::size_t r = 0; r <= k; ++r) out[span - k + r] = local[r];
  return out;
}

std::vector<double> eval_spline(const ControlPolygon& polygon, const KnotVector& knots,
                                double t) {
  if (polygon.size() != knots.num_control_points()) {
    throw std::invalid_argument("eval_spline: " + std::to_string(polygon.size()) +
                                " control points but knot vector expects " +
                                std::to_string(knots.num_control_points()));
  }
  const auto weights = basis_all(knots, t);
  std::vector<double> out(polygon.dim(), 0.0);
  for (std::size_t i = 0; i < polygon.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const auto p = polygon.point(i);
    for (std::size_t a = 0; a < out.size(); ++a) out[a] += weights[i] * p[a];
  }
  return out;
}

std::array<double, 4> cubic_bernstein(double t) {
  const double u = 1.0 - t;
  return {u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t};
}

namespace {

// Sum of w_i p_i written as p_a + sum w_i (p_i - p_a), anchored at the nearer
// end point. Coincident points then give exactly p_a, and t = 0 or t = 1
// reproduces the end point bit for bit.
std::vector<double> anchored_sum(const ControlPolygon& polygon, std::span<const double> w,
                                 double t) {
  const std::size_t anchor = t < 0.5 ? 0 : polygon.size() - 1;
  const auto pa = polygon.point(anchor);
  std::vector<double> out(pa.begin(), pa.end());
  for (std::size_t a = 0; a < out.size(); ++a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < polygon.size(); ++i) {
      if (i != anchor) acc += w[i] * (polygon.point(i)[a] - pa[a]);
    }
    out[a] += acc;
  }
  return out;
}

}  // namespace

std::vector<double> eval_cubic_bezier(const ControlPolygon& polygon, double t) {
  if (polygon.size() != 4) {
    throw std::invalid_argument("eval_cubic_bezier: expected 4 control points, got " +
                                std::to_string(polygon.size()));
  }
  check_param(t);
  const auto w = cubic_bernstein(t);
  return anchored_sum(polygon, w, t);
}

std::vector<double> eval_bezier(const ControlPolygon& polygon, double t) {
  if (polygon.size() == 0) throw std::invalid_argument("eval_bezier: empty polygon");
  if (polygon.size() == 4) return eval_cubic_bezier(polygon, t);
  check_param(t);
  const std::size_t n = polygon.size() - 1;
  const double u = 1.0 - t;
  std::vector<double> w(n + 1);
  double binom = 1.0;
  for (std::size_t i = 0; i <= n; ++i) {
    w[i] = binom * std::pow(t, static_cast<double>(i)) * std::pow(u, static_cast<double>(n - i));
    binom = binom * static_cast<double>(n - i) / static_cast<double>(i + 1);
  }
  return anchored_sum(polygon, w, t);
}

std::vector<double> uniform_params(std::size_t count) {
  if (count < 2) throw std::invalid_argument("uniform sampling needs at least 2 samples");
  std::vector<double> params(count);
  const auto denom = static_cast<double>(count - 1);
  for (std::size_t j = 0; j < count; ++j) params[j] = static_cast<double>(j) / denom;
  return params;
}

SampledCurve sample_uniform(const ControlPolygon& polygon, std::size_t count) {
  SampledCurve curve;
  curve.dim = polygon.dim();
  curve.params = uniform_params(count);
  curve.samples.reserve(count * curve.dim);
  for (double t : curve.params) {
    const auto row = eval_bezier(polygon, t);
    curve.samples.insert(curve.samples.end(), row.begin(), row.end());
  }
  return curve;
}

SampledCurve sample_uniform(const ControlPolygon& polygon, const KnotVector& knots,
                            std::size_t count) {
  SampledCurve curve;
  curve.dim = polygon.dim();
  curve.params = uniform_params(count);
  curve.samples.reserve(count * curve.dim);
  for (double t : curve.params) {
    const auto row = eval_spline(polygon, knots, t);
    curve.samples.insert(curve.samples.end(), row.begin(), row.end());
  }
  return curve;
}

Jacobian grad_wrt_controls(const ControlPolygon& polygon, const KnotVector& knots,
                           std::span<const double> params) {
  if (polygon.size() != knots.num_control_points()) {
    throw std::invalid_argument("grad_wrt_controls: polygon/knot vector mismatch");
  }
  const std::size_t d = polygon.dim();
  Jacobian jac;
  jac.rows = params.size() * d;
  jac.cols = polygon.size() * d;
  jac.values.assign(jac.rows * jac.cols, 0.0);
  for (std::size_t j = 0; j < params.size(); ++j) {
    const auto weights = basis_all(knots, params[j]);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      for (std::size_t a = 0; a < d; ++a) {
        jac.values[(j * d + a) * jac.cols + i * d + a] = weights[i];
      }
    }
  }
  return jac;
}

}  // namespace sbt::splines
