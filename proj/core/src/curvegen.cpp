// SPDX-License-Identifier: Apache-2.0

#include "sbt/curvegen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>

#include "sbt/config.hpp"
#include "sbt/splines.hpp"

namespace sbt::curves {

namespace {

constexpr double kPi = std::numbers::pi;

struct Range {
  double lo, hi;
};

// Sampling ranges. The hypotrochoid pen offset may be 0 (circle) when given
// explicitly but is drawn from [0.1, 0.5].
constexpr Range kLissajous[] = {{1.0, 5.0}, {1.0, 5.0}, {0.0, kPi / 2}};
constexpr Range kHypotrochoid[] = {{0.6, 1.0}, {0.1, 0.5}, {0.1, 0.5}, {0.5, 1.0}};
constexpr Range kBezier2[] = {{-1.0, 1.0}, {-1.0, 1.0}};
constexpr Range kWalkStep = {-0.15, 0.15};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_key(std::uint64_t seed, Family f, Split s, std::uint64_t index) {
  std::uint64_t k = splitmix(seed);
  k = splitmix(k ^ (static_cast<std::uint64_t>(f) + 1) * 0x100000001b3ULL);
  k = splitmix(k ^ (static_cast<std::uint64_t>(s) + 1) * 0xc2b2ae3d27d4eb4fULL);
  return splitmix(k ^ index);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void in_range(const std::string& family, std::size_t i, double v, Range r) {
  require(std::isfinite(v) && v >= r.lo && v <= r.hi,
          family + " parameter " + std::to_string(i) + " = " + format_double(v) +
              " outside [" + format_double(r.lo) + ", " + format_double(r.hi) + "]");
}

double arg_at(std::size_t j, std::size_t len, double span) {
  return span * static_cast<double>(j) / static_cast<double>(len - 1);
}

std::vector<double> lissajous(const std::vector<double>& p, std::size_t len) {
  std::vector<double> out(2 * len);
  for (std::size_t j = 0; j < len; ++j) {
    const double tau = arg_at(j, len, 2.0 * kPi);
    out[2 * j] = std::sin(p[0] * tau + p[2]);
    out[2 * j + 1] = std::sin(p[1] * tau);
  }
  return out;
}

std::vector<double> hypotrochoid(const std::vector<double>& p, std::size_t len) {
  const double big = p[0], small = p[1], rho = p[2], s = p[3];
  const double ratio = (big - small) / small;
  std::vector<double> out(2 * len);
  for (std::size_t j = 0; j < len; ++j) {
    const double th = arg_at(j, len, 6.0 * kPi);
    out[2 * j] = s * ((big - small) * std::cos(th) + rho * std::cos(ratio * th));
    out[2 * j + 1] = s * ((big - small) * std::sin(th) - rho * std::sin(ratio * th));
  }
  return out;
}

std::vector<double> bezier_curve(const splines::ControlPolygon& poly, std::size_t len) {
  auto s = splines::sample_uniform(poly, len);
  return std::move(s.samples);
}

splines::ControlPolygon walk_polygon(const std::vector<double>& steps) {
  const std::size_t n = steps.size() / 2;
  std::vector<double> pts(steps.size());
  double cx = 0.0, cy = 0.0, x = 0.0, y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x += steps[2 * i];
    y += steps[2 * i + 1];
    pts[2 * i] = x;
    pts[2 * i + 1] = y;
    cx += x;
    cy += y;
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  double extent = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pts[2 * i] -= cx;
    pts[2 * i + 1] -= cy;
    extent = std::max({extent, std::abs(pts[2 * i]), std::abs(pts[2 * i + 1])});
  }
  if (extent > 1.0) {
    for (auto& v : pts) v /= extent;
  }
  return splines::ControlPolygon(2, std::move(pts));
}

}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::lissajous:
      return "lissajous";
    case Family::hypotrochoid:
      return "hypotrochoid";
    case Family::bezier2:
      return "bezier2";
    case Family::bezier64:
      return "bezier64";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Family parse_family(const std::string& name) {
  for (Family f : all_families()) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown family '" + name +
                              "' (valid: lissajous, hypotrochoid, bezier2, bezier64)");
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "' (valid: train, val, test)");
}

const std::vector<Family>& all_families() {
  static const std::vector<Family> f = {Family::lissajous, Family::hypotrochoid,
                                        Family::bezier2, Family::bezier64};
  return f;
}

std::size_t param_count(Family f) {
  switch (f) {
    case Family::lissajous:
      return 3;
    case Family::hypotrochoid:
      return 4;
    case Family::bezier2:
      return 2;
    case Family::bezier64:
      return 64;
  }
  return 0;
}

void check_domain(const CurveParams& p) {
  const std::string name = to_string(p.family);
  require(p.values.size() == param_count(p.family),
          name + " expects " + std::to_string(param_count(p.family)) + " parameters, got " +
              std::to_string(p.values.size()));
  const auto& v = p.values;
  switch (p.family) {
    case Family::lissajous:
      for (std::size_t i = 0; i < 3; ++i) in_range(name, i, v[i], kLissajous[i]);
      break;
    case Family::hypotrochoid:
      in_range(name, 0, v[0], kHypotrochoid[0]);
      in_range(name, 1, v[1], kHypotrochoid[1]);
      in_range(name, 2, v[2], {0.0, kHypotrochoid[2].hi});
      in_range(name, 3, v[3], kHypotrochoid[3]);
      break;
    case Family::bezier2:
      for (std::size_t i = 0; i < 2; ++i) in_range(name, i, v[i], kBezier2[i]);
      break;
    case Family::bezier64:
      for (std::size_t i = 0; i < v.size(); ++i) in_range(name, i, v[i], kWalkStep);
      break;
  }
}

std::vector<double> gen_curve(const CurveParams& p, std::size_t len) {
  check_domain(p);
  require(len >= 2, "gen_curve: need at least 2 points");
  switch (p.family) {
    case Family::lissajous:
      return lissajous(p.values, len);
    case Family::hypotrochoid:
      return hypotrochoid(p.values, len);
    case Family::bezier2:
      return bezier_curve(
          splines::ControlPolygon(2, {-1.0, 0.0, p.values[0], p.values[1], 1.0, 0.0}), len);
    case Family::bezier64:
      return bezier_curve(walk_polygon(p.values), len);
  }
  return {};
}

CurveParams draw_params(Family f, Split split, std::uint64_t seed, std::uint64_t index) {
  std::mt19937_64 rng(stream_key(seed, f, split, index));
  auto draw = [&](Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  CurveParams p{f, {}};
  p.values.reserve(param_count(f));
  switch (f) {
    case Family::lissajous:
      for (auto r : kLissajous) p.values.push_back(draw(r));
      break;
    case Family::hypotrochoid:
      for (auto r : kHypotrochoid) p.values.push_back(draw(r));
      break;
    case Family::bezier2:
      for (auto r : kBezier2) p.values.push_back(draw(r));
      break;
    case Family::bezier64:
      for (std::size_t i = 0; i < 64; ++i) p.values.push_back(draw(kWalkStep));
      break;
  }
  return p;
}

std::vector<Sample> sample_dataset(Family f, std::size_t count, Split split, std::uint64_t seed,
                                   std::size_t len, std::uint64_t first_index) {
  require(count >= 1, "sample_dataset: count must be >= 1");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto p = draw_params(f, split, seed, first_index + i);
    auto pts = gen_curve(p, len);
    out.push_back({std::move(p), std::move(pts)});
  }
  return out;
}

std::vector<float> stack_points(const std::vector<Sample>& samples) {
  std::vector<float> out;
  for (const auto& s : samples) {
    for (double v : s.points) out.push_back(static_cast<float>(v));
  }
  return out;
}

void write_dataset_csv(std::ostream& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    out << to_string(s.params.family);
    for (double v : s.params.values) out << ',' << format_double(v);
    for (double v : s.points) out << ',' << format_double(v);
    out << '\n';
  }
}

}  // namespace sbt::curves
