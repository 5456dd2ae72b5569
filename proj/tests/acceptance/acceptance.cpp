// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Each criterion prints exactly one line starting with
// PASS or FAIL; the process exits non-zero when any selected criterion fails.
//
//   sbt_acceptance <criterion|all> [--work-dir DIR] [--run-long]
//
// Long trainings are cached in the work directory as <family>-<method>-s<seed>
// run directories (the layout `sbt compare --out` and `sbt train --out`
// produce). A cached run is reused only when its resolved.cfg equals the
// configuration the criterion would train and its metrics reach total_steps.

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>
#include <time.h>

#include "gradcheck.hpp"
#include "sbt/config.hpp"
#include "sbt/curvegen.hpp"
#include "sbt/eval.hpp"
#include "sbt/net.hpp"
#include "sbt/server.hpp"
#include "sbt/splines.hpp"
#include "sbt/train.hpp"

namespace fs = std::filesystem;
using namespace sbt;
using Clock = std::chrono::steady_clock;

namespace {

// --- pinned thresholds -------------------------------------------------------------

constexpr std::size_t kRandomCases = 1000;
constexpr double kUnityTol = 1e-9;
constexpr double kCasteljauTol = 1e-12;
constexpr double kBezierSplineTol = 1e-12;
constexpr double kLocalSupportTol = 1e-12;
constexpr double kHullTol = 1e-12;
constexpr double kSplineSeconds = 10.0;

constexpr double kGradTol = 1e-5;
constexpr double kOpStep = 1e-5;
constexpr double kModelStep = 1e-6;
constexpr double kGradSeconds = 60.0;

constexpr std::size_t kProtocolSteps = 20000;
constexpr std::size_t kProtocolBatch = 64;
constexpr double kProtocolLr = 1e-3;
constexpr std::size_t kProtocolLayers = 2;
constexpr std::size_t kProtocolWidth = 32;
constexpr std::size_t kProtocolHeads = 4;
constexpr std::uint64_t kProtocolSeeds[] = {0, 1, 2};
constexpr std::size_t kOrderingTestCount = 1000;
constexpr double kOrderingRatio = 0.5;  // spline / alibi on bezier2
constexpr double kBudgetSeconds = 45.0 * 60.0;  // per method per family

constexpr double kAbsoluteMse = 5e-3;
constexpr std::size_t kAbsoluteTestCount = kDefaultTestCount;

constexpr double kCollapseLr = 1e-2;
constexpr std::size_t kCollapseSteps = 2000;
constexpr std::size_t kCollapseEvalEvery = 100;

constexpr std::size_t kSuperFactor = 4;
constexpr double kTrajectoryTol = 1e-6;
constexpr std::size_t kSuperCurves = 1000;

constexpr double kServeTol = 1e-6;
constexpr std::size_t kServeCurves = 20;

struct Options {
  std::string work_dir;
  bool run_long = false;
};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// --- shared protocol helpers --------------------------------------------------------

RunConfig protocol_config(curves::Family family, Strategy strategy, std::uint64_t seed) {
  RunConfig rc = default_run_config(family, strategy);
  rc.model.n_layers = kProtocolLayers;
  rc.model.width = kProtocolWidth;
  rc.model.heads = kProtocolHeads;
  rc.model.seed = seed;
  rc.train.batch_size = kProtocolBatch;
  rc.train.total_steps = kProtocolSteps;
  rc.train.base_lr = kProtocolLr;
  rc.train.min_lr = kProtocolLr / 100.0;
  rc.train.seed = seed;
  return rc;
}

fs::path run_dir(const Options& o, curves::Family f, Strategy s, std::uint64_t seed) {
  if (o.work_dir.empty()) return {};
  return fs::path(o.work_dir) / (curves::to_string(f) + "-" + to_string(s) + "-s" + std::to_string(seed));
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t last_metric_step(const fs::path& dir) {
  std::ifstream in(dir / "metrics.csv");
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  if (last.empty() || !std::isdigit(static_cast<unsigned char>(last[0]))) return 0;
  return std::stoul(last.substr(0, last.find(',')));
}

// A cached run matching `rc` exactly and trained to completion.
std::optional<Autoencoder<float>> cached_run(const fs::path& dir, const RunConfig& rc) {
  if (dir.empty()) return std::nullopt;
  if (!fs::exists(dir / "final.sbtf") || !fs::exists(dir / "resolved.cfg")) return std::nullopt;
  if (read_file(dir / "resolved.cfg") != rc.to_keyvalues().to_text()) return std::nullopt;
  if (last_metric_step(dir) != rc.train.total_steps) return std::nullopt;
  return load_checkpoint((dir / "final.sbtf").string());
}

// Cached model, or a fresh training run when allowed.
std::optional<Autoencoder<float>> protocol_model(const Options& o, const RunConfig& rc,
                                                 const fs::path& dir, bool may_train,
                                                 std::string* how) {
  if (auto m = cached_run(dir, rc)) {
    if (how) *how = "cached " + dir.filename().string();
    return m;
  }
  if (!may_train) return std::nullopt;
  Autoencoder<float> model(rc.model);
  RunOptions ro;
  ro.out_dir = dir.string();
  ro.keep_step_checkpoints = false;
  ro.log = [](const std::string& m) { std::cerr << m << std::endl; };
  const auto res = train_run(model, rc.train, rc.family, ro);
  if (how) *how = "trained " + dir.filename().string() + " in " + num(res.seconds / 3600.0) + " h";
  return model;
}

double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

// CPU seconds for one optimisation step of the protocol configuration,
// measured exactly as the trainer performs it. CPU time keeps the projection
// independent of other load on the machine.
double measure_step_seconds(const RunConfig& rc, std::size_t timed = 3) {
  tune_allocator();
  Autoencoder<float> model(rc.model);
  auto params = model.parameters();
  RAdamState<float> opt;
  const RAdamHyper hyper{rc.train.beta1, rc.train.beta2, rc.train.adam_eps, rc.train.weight_decay};
  const std::size_t len = rc.model.seq_len, batch = rc.train.batch_size;
  double seconds = 0.0;
  for (std::size_t step = 0; step <= timed; ++step) {
    const double t0 = thread_cpu_seconds();
    auto x = curves::stack_points(
        curves::sample_dataset(rc.family, batch, curves::Split::train, 0, len, step * batch));
    model.zero_grad();
    {
      ad::Tape<float> tape;
      auto w = model.bind(tape);
      auto in = tape.constant({batch, len, 2}, std::move(x));
      tape.backward(ad::mse_loss(model.forward(w, in, len).recon, in));
    }
    clip_grad_norm<float>(std::span<ad::Parameter<float>* const>(params), rc.train.clip_norm);
    radam_step<float>(std::span<ad::Parameter<float>* const>(params), opt, 1e-3, hyper);
    if (step > 0) seconds += thread_cpu_seconds() - t0;
  }
  return seconds / static_cast<double>(timed);
}

// Latest spline checkpoint from the protocol, else a seed-initialised model.
std::pair<Autoencoder<float>, std::string> demo_model(const Options& o) {
  const auto rc = protocol_config(curves::Family::lissajous, Strategy::spline, 0);
  if (!o.work_dir.empty()) {
    if (auto m = cached_run(run_dir(o, rc.family, Strategy::spline, 0), rc)) {
      return {std::move(*m), "trained lissajous-spline-s0"};
    }
  }
  return {Autoencoder<float>(rc.model), "seed-initialised (no cached run)"};
}

// --- spline math ---------------------------------------------------------------------

std::vector<double> lerp_casteljau(const splines::ControlPolygon& p, double t) {
  const std::size_t d = p.dim();
  std::vector<double> pts(p.coords().begin(), p.coords().end());
  for (std::size_t level = p.size() - 1; level > 0; --level) {
    for (std::size_t i = 0; i < level; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        pts[i * d + c] = (1.0 - t) * pts[i * d + c] + t * pts[(i + 1) * d + c];
      }
    }
  }
  pts.resize(d);
  return pts;
}

splines::KnotVector random_knots(std::mt19937_64& rng, int k, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> interior(n - static_cast<std::size_t>(k) - 1);
  for (auto& v : interior) v = u(rng);
  if (interior.size() >= 2 && u(rng) < 0.25) interior[1] = interior[0];
  std::sort(interior.begin(), interior.end());
  std::vector<double> knots(static_cast<std::size_t>(k) + 1, 0.0);
  knots.insert(knots.end(), interior.begin(), interior.end());
  knots.insert(knots.end(), static_cast<std::size_t>(k) + 1, 1.0);
  return splines::KnotVector(knots, k);
}

splines::ControlPolygon random_polygon(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> g;
  std::vector<double> c(n * d);
  for (auto& v : c) v = g(rng);
  return splines::ControlPolygon(d, std::move(c));
}

Verdict spline_math(const Options&) {
  using namespace splines;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20260101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double unity = 0.0, neg = 0.0, casteljau = 0.0, as_spline = 0.0, support = 0.0, hull = 0.0;
  std::size_t endpoint_misses = 0;

  for (std::size_t c = 0; c < kRandomCases; ++c) {
    const int k = 1 + static_cast<int>(c % 3);
    const std::size_t n = static_cast<std::size_t>(k) + 1 + c % 7;
    const auto kv = random_knots(rng, k, n);
    const auto poly = random_polygon(rng, n, 2);
    for (double t : {0.0, 1.0, u(rng), u(rng), u(rng)}) {
      const auto b = basis_all(kv, t);
      double s = 0.0;
      for (double v : b) {
        s += v;
        neg = std::min(neg, v);
      }
      unity = std::max(unity, std::abs(s - 1.0));
      const auto p = eval_spline(poly, kv, t);
      for (std::size_t dim = 0; dim < 2; ++dim) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < n; ++i) {
          lo = std::min(lo, poly.point(i)[dim]);
          hi = std::max(hi, poly.point(i)[dim]);
        }
        hull = std::max({hull, lo - p[dim], p[dim] - hi});
      }
    }
    // local support: move one control point, look outside its knot interval
    const std::size_t i = c % n;
    std::vector<double> moved(poly.coords().begin(), poly.coords().end());
    moved[2 * i] += 2.5;
    moved[2 * i + 1] -= 1.5;
    const ControlPolygon shifted(2, moved);
    for (int s = 0; s < 20; ++s) {
      const double t = u(rng);
      if (t >= kv[i] && t <= kv[i + static_cast<std::size_t>(k) + 1]) continue;
      const auto a = eval_spline(poly, kv, t);
      const auto b = eval_spline(shifted, kv, t);
      support = std::max({support, std::abs(a[0] - b[0]), std::abs(a[1] - b[1])});
    }
  }

  const auto clamped = KnotVector::clamped_uniform(4, 3);
  for (std::size_t c = 0; c < kRandomCases; ++c) {
    const std::size_t d = 1 + c % 4;
    const auto cubic = random_polygon(rng, 4, d);
    const auto e0 = eval_cubic_bezier(cubic, 0.0);
    const auto e1 = eval_cubic_bezier(cubic, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (e0[j] != cubic.point(0)[j] || e1[j] != cubic.point(3)[j]) ++endpoint_misses;
    }
    const auto general = random_polygon(rng, 2 + c % 6, d);
    const auto g0 = eval_bezier(general, 0.0);
    const auto g1 = eval_bezier(general, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (g0[j] != general.point(0)[j] || g1[j] != general.point(general.size() - 1)[j]) {
        ++endpoint_misses;
      }
    }
    for (int s = 0; s < 5; ++s) {
      const double t = u(rng);
      const auto bern = eval_cubic_bezier(cubic, t);
      const auto lerp = lerp_casteljau(cubic, t);
      const auto spl = eval_spline(cubic, clamped, t);
      const auto gb = eval_bezier(general, t);
      const auto gl = lerp_casteljau(general, t);
      for (std::size_t j = 0; j < d; ++j) {
        casteljau = std::max({casteljau, std::abs(bern[j] - lerp[j]), std::abs(gb[j] - gl[j])});
        as_spline = std::max(as_spline, std::abs(spl[j] - bern[j]));
      }
    }
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  Verdict v;
  v.pass = unity <= kUnityTol && neg >= -1e-12 && endpoint_misses == 0 &&
           casteljau <= kCasteljauTol && as_spline <= kBezierSplineTol &&
           support <= kLocalSupportTol && hull <= kHullTol && secs < kSplineSeconds;
  v.detail = std::to_string(kRandomCases) + " cases per property; unity err " + num(unity) +
             ", min basis " + num(neg) + ", endpoint misses " + std::to_string(endpoint_misses) +
             ", casteljau " + num(casteljau) + ", bezier-as-spline " + num(as_spline) +
             ", local support " + num(support) + ", hull excess " + num(hull) + ", " +
             num(secs) + " s";
  return v;
}

// --- gradients ---------------------------------------------------------------------

using testing::Input;
using testing::Program;

struct OpCase {
  std::string name;
  std::vector<ad::Shape> shapes;
  std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)> body;
};

Verdict gradients(const Options&) {
  const auto t0 = Clock::now();
  std::vector<double> mix_w = {0.2, -1.1, 0.7, 0.4, 0.3, -0.5};  // 2 x 3
  const std::vector<OpCase> ops = {
      {"matmul", {{2, 3, 4}, {4, 5}}, [](auto&, const auto& v) { return ad::matmul(v[0], v[1]); }},
      {"batched_matmul", {{2, 3, 4}, {2, 4, 5}},
       [](auto&, const auto& v) { return ad::batched_matmul(v[0], v[1], false, 0.7); }},
      {"batched_matmul_t", {{2, 3, 4}, {2, 5, 4}},
       [](auto&, const auto& v) { return ad::batched_matmul(v[0], v[1], true); }},
      {"add", {{2, 3}, {2, 3}}, [](auto&, const auto& v) { return ad::add(v[0], v[1]); }},
      {"add_bias", {{2, 3, 4}, {4}}, [](auto&, const auto& v) { return ad::add_bias(v[0], v[1]); }},
      {"add_broadcast", {{2, 3, 4}, {3, 4}},
       [](auto&, const auto& v) { return ad::add_broadcast(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](auto&, const auto& v) { return ad::scale(v[0], -1.7); }},
      {"softmax_with_bias", {{2, 2, 5, 5}, {2, 5, 5}},
       [](auto&, const auto& v) { return ad::softmax_with_bias(v[0], v[1]); }},
      {"attention", {{2, 2, 5, 3}, {2, 2, 5, 3}, {2, 2, 5, 3}, {2, 5, 5}},
       [](auto&, const auto& v) { return ad::attention(v[0], v[1], v[2], v[3], 0.6); }},
      {"gelu", {{3, 7}}, [](auto&, const auto& v) { return ad::gelu(v[0]); }},
      {"rms_norm", {{2, 3, 6}, {6}},
       [](auto&, const auto& v) { return ad::rms_norm(v[0], v[1], 1e-6); }},
      {"sum", {{4, 3}}, [](auto&, const auto& v) { return ad::sum(v[0]); }},
      {"split_heads", {{2, 3, 6}}, [](auto&, const auto& v) { return ad::split_heads(v[0], 2); }},
      {"merge_heads", {{2, 2, 3, 3}}, [](auto&, const auto& v) { return ad::merge_heads(v[0], 2); }},
      {"prepend_rows", {{2, 4}, {3, 5, 4}},
       [](auto&, const auto& v) { return ad::prepend_rows(v[0], v[1]); }},
      {"slice_rows", {{2, 6, 3}}, [](auto&, const auto& v) { return ad::slice_rows(v[0], 2, 3); }},
      {"mix_rows", {{2, 3, 4}},
       [&mix_w](auto&, const auto& v) {
         return ad::mix_rows(std::span<const double>(mix_w), 2, v[0]);
       }},
      {"tile_rows", {{2, 1, 3}}, [](auto&, const auto& v) { return ad::tile_rows(v[0], 4); }},
      {"concat_last", {{2, 3, 2}, {2, 3, 4}},
       [](auto&, const auto& v) { return ad::concat_last(v[0], v[1]); }},
      {"concat_last_broadcast", {{2, 3, 2}, {3, 4}},
       [](auto&, const auto& v) { return ad::concat_last(v[0], v[1]); }},
  };

  std::mt19937_64 rng(77);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  auto note = [&](const std::string& name, double err) {
    ++checked;
    if (err > worst || worst_name.empty()) {
      worst = std::max(worst, err);
      worst_name = name;
    }
  };

  for (const auto& op : ops) {
    std::vector<Input<double>> inputs;
    for (const auto& s : op.shapes) inputs.push_back(testing::random_input<double>(s, rng));
    std::vector<double> target;
    Program<double> f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& v) {
      auto out = op.body(tape, v);
      if (target.empty()) {
        std::mt19937_64 trng(5);
        std::normal_distribution<double> g;
        target.resize(out.value().size());
        for (auto& t : target) t = g(trng);
      }
      return ad::mse_loss(out, tape.constant(out.shape(), target));
    };
    note(op.name, testing::gradient_error(f, inputs, kOpStep));
  }
  {
    const auto in = testing::random_input<double>({2, 3, 4}, rng);
    const auto tgt = testing::random_input<double>({2, 3, 4}, rng);
    Program<double> f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& v) {
      return ad::mse_loss(v[0], v[1]);
    };
    note("mse_loss", testing::gradient_error(f, {in, tgt}, kOpStep));
  }

  // Tiny full model: 1 layer, c = 8, h = 2, d = 2, L = 6, every parameter.
  for (Strategy s : {Strategy::spline, Strategy::alibi, Strategy::alibi_cat}) {
    ModelConfig cfg;
    cfg.latent_dim = 2;
    cfg.n_layers = 1;
    cfg.heads = 2;
    cfg.width = 8;
    cfg.seq_len = 6;
    cfg.strategy = s;
    cfg.n_ctrl = default_ctrl_count(s);
    cfg.seed = 3;
    Autoencoder<double> model(cfg);
    const std::size_t B = 2, L = 6;
    std::vector<double> x(B * L * 2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : x) v = u(rng);
    auto loss_of = [&] {
      ad::Tape<double> tape;
      auto w = model.bind_frozen(tape);
      auto in = tape.constant({B, L, 2}, x);
      return ad::mse_loss(model.forward(w, in, L).recon, in).value()[0];
    };
    model.zero_grad();
    {
      ad::Tape<double> tape;
      auto w = model.bind(tape);
      auto in = tape.constant({B, L, 2}, x);
      tape.backward(ad::mse_loss(model.forward(w, in, L).recon, in));
    }
    double model_worst = 0.0;
    for (auto* p : model.parameters()) {
      double diff = 0.0, na = 0.0, nf = 0.0;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double saved = p->value[i];
        p->value[i] = saved + kModelStep;
        const double up = loss_of();
        p->value[i] = saved - kModelStep;
        const double down = loss_of();
        p->value[i] = saved;
        const double fd = (up - down) / (2 * kModelStep);
        const double an = p->grad.empty() ? 0.0 : p->grad[i];
        diff += (fd - an) * (fd - an);
        na += an * an;
        nf += fd * fd;
      }
      const double denom = std::sqrt(std::max(na, nf));
      if (denom > 1e-12) model_worst = std::max(model_worst, std::sqrt(diff) / denom);
    }
    note("model/" + to_string(s), model_worst);
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return {worst < kGradTol && secs < kGradSeconds,
          std::to_string(checked) + " checks (20 op cases, mse_loss, 3 tiny models), worst rel err " +
              num(worst) + " (" + worst_name + "), " + num(secs) + " s"};
}

// --- ordering ----------------------------------------------------------------------

Verdict ordering(const Options& o) {
  const std::vector<curves::Family> fams = {curves::Family::lissajous, curves::Family::bezier2};
  const std::vector<Strategy> methods = {Strategy::spline, Strategy::alibi, Strategy::alibi_cat};
  const std::size_t n_seeds = std::size(kProtocolSeeds);

  // Budget: 3 seeds x 20k steps per (method, family), projected from the
  // measured step time. Evaluation cost is ignored, so this is a lower bound.
  double worst_projection = 0.0;
  std::string worst_cell;
  for (auto f : fams) {
    for (auto m : methods) {
      const double step = measure_step_seconds(protocol_config(f, m, 0));
      const double projected = step * static_cast<double>(kProtocolSteps * n_seeds);
      if (projected > worst_projection) {
        worst_projection = projected;
        worst_cell = curves::to_string(f) + "/" + to_string(m) + " at " + num(step) + " cpu s/step";
      }
    }
  }
  const bool within_budget = worst_projection <= kBudgetSeconds;

  std::vector<std::vector<double>> mean(methods.size(), std::vector<double>(fams.size(), 0.0));
  std::size_t available = 0, missing = 0;
  for (std::size_t fi = 0; fi < fams.size(); ++fi) {
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      for (auto seed : kProtocolSeeds) {
        const auto rc = protocol_config(fams[fi], methods[mi], seed);
        const auto dir = run_dir(o, fams[fi], methods[mi], seed);
        auto model = protocol_model(o, rc, dir, o.run_long, nullptr);
        if (!model) {
          ++missing;
          continue;
        }
        ++available;
        mean[mi][fi] += eval_mse(*model, fams[fi], kOrderingTestCount, 0) / double(n_seeds);
      }
    }
  }

  std::string detail = "projected " + num(worst_projection / 3600.0) + " h per method per family (" +
                       worst_cell + ") vs budget " + num(kBudgetSeconds / 60.0) + " min";
  if (missing > 0) {
    detail += "; " + std::to_string(available) + "/18 runs available, ordering not evaluated" +
              (o.run_long ? "" : " (pass --run-long to train)");
    return {false, detail};
  }
  bool order = true;
  for (std::size_t fi = 0; fi < fams.size(); ++fi) {
    order = order && mean[0][fi] < mean[1][fi] && mean[0][fi] < mean[2][fi];
  }
  const double ratio = mean[0][1] / mean[1][1];
  detail += "; lissajous spline/alibi/alibi_cat " + num(mean[0][0]) + "/" + num(mean[1][0]) + "/" +
            num(mean[2][0]) + ", bezier2 " + num(mean[0][1]) + "/" + num(mean[1][1]) + "/" +
            num(mean[2][1]) + ", bezier2 spline/alibi ratio " + num(ratio);
  return {within_budget && order && ratio <= kOrderingRatio, detail};
}

// --- absolute threshold ------------------------------------------------------------

Verdict absolute_threshold(const Options& o) {
  const auto rc = protocol_config(curves::Family::lissajous, Strategy::spline, 0);
  const auto dir = run_dir(o, rc.family, Strategy::spline, 0);
  std::string how;
  auto model = protocol_model(o, rc, dir, o.run_long, &how);
  if (!model) {
    return {false, "no completed 20000-step lissajous spline run in " +
                       (o.work_dir.empty() ? std::string("(no work dir)") : o.work_dir) +
                       "; pass --run-long to train it"};
  }
  const double mse = eval_mse(*model, rc.family, kAbsoluteTestCount, 0);
  return {mse <= kAbsoluteMse, "test mse " + num(mse, 4) + " on " +
                                   std::to_string(kAbsoluteTestCount) + " curves (threshold " +
                                   num(kAbsoluteMse) + ", " + how + ")"};
}

// --- collapse ----------------------------------------------------------------------

Verdict collapse(const Options& o) {
  std::vector<std::string> failures;
  // Detector examples.
  {
    const std::vector<double> same(2 * 4 * 3, 0.25);
    const auto r = detect_collapse(std::span<const double>(same), 2, 4, 3, 1e-6);
    if (!(r.spread == 0.0 && r.collapsed)) failures.push_back("identical points");
  }
  {
    const std::vector<double> simplex = {0, 0, 1, 0, 0, 1, 0, 0};
    const auto r = detect_collapse(std::span<const double>(simplex), 1, 4, 2, 1.4);
    if (!(r.spread == std::sqrt(2.0) && !r.collapsed)) failures.push_back("simplex");
  }
  {
    const std::vector<double> pair = {0, 0, 0.5, 0, 0.5, 0, 0, 0};
    const auto r = detect_collapse(std::span<const double>(pair), 1, 4, 2, 0.5);
    if (r.spread != 0.5 || r.collapsed) failures.push_back("strict boundary");
  }
  // Synthetic collapsed batches: every control point within epsilon/10 of a centre.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::size_t triggered = 0;
  constexpr std::size_t kBatches = 1000;
  for (std::size_t b = 0; b < kBatches; ++b) {
    const std::size_t d = 2 + b % 63, batch = 1 + b % 16;
    const double eps = 1e-4 * std::sqrt(static_cast<double>(d));
    std::vector<float> lat(batch * 4 * d);
    for (std::size_t s = 0; s < batch; ++s) {
      std::vector<double> centre(d);
      for (auto& c : centre) c = g(rng);
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
          lat[(s * 4 + i) * d + k] = static_cast<float>(
              centre[k] + eps / (10.0 * std::sqrt(double(d))) * std::tanh(g(rng)));
        }
      }
    }
    if (detect_collapse(std::span<const float>(lat), batch, 4, d, eps).collapsed) ++triggered;
  }
  if (triggered != kBatches) failures.push_back("synthetic batches " + std::to_string(triggered));

  // High learning-rate run.
  RunConfig rc = protocol_config(curves::Family::lissajous, Strategy::spline, 0);
  rc.train.base_lr = kCollapseLr;
  rc.train.min_lr = kCollapseLr / 100.0;
  rc.train.total_steps = kCollapseSteps;
  rc.train.eval_every = kCollapseEvalEvery;
  const fs::path dir = fs::path(o.work_dir.empty() ? fs::temp_directory_path().string() : o.work_dir) /
                       "lissajous-spline-lr1e-2-s0";
  std::string outcome;
  bool run_ok = false;
  const bool cached = fs::exists(dir / "resolved.cfg") &&
                      read_file(dir / "resolved.cfg") == rc.to_keyvalues().to_text() &&
                      fs::exists(dir / "status.txt");
  if (cached) {
    outcome = read_file(dir / "status.txt");
    run_ok = outcome.rfind("completed", 0) == 0 || outcome.rfind("collapsed", 0) == 0;
    outcome = "cached: " + outcome.substr(0, outcome.find('\n'));
  } else {
    Autoencoder<float> model(rc.model);
    RunOptions ro;
    ro.out_dir = dir.string();
    ro.keep_step_checkpoints = false;
    const auto res = train_run(model, rc.train, rc.family, ro);
    const double first = res.metrics.front().val_mse, last = res.metrics.back().val_mse;
    if (res.status == RunStatus::collapsed) {
      run_ok = true;
      outcome = "collapsed at step " + std::to_string(res.steps_done);
    } else if (res.status == RunStatus::completed) {
      // converging normally: finite and below the initial validation error
      run_ok = std::isfinite(last) && last < first;
      outcome = "completed " + std::to_string(res.steps_done) + " steps, val mse " + num(first) +
                " -> " + num(last);
    } else {
      outcome = "interrupted";
    }
    std::ofstream(dir / "status.txt") << (run_ok ? "" : "bad ") << outcome << "\n";
  }
  if (!run_ok) failures.push_back("lr run: " + outcome);

  std::string detail = "detector examples ok, " + std::to_string(triggered) + "/" +
                       std::to_string(kBatches) + " synthetic collapsed batches flagged; lr 1e-2 run (" +
                       std::to_string(kCollapseSteps) + " steps): " + outcome;
  if (!failures.empty()) {
    detail += "; failures:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {failures.empty(), detail};
}

// --- super-sampling ----------------------------------------------------------------

Verdict super_sampling(const Options& o) {
  const auto [model, origin] = demo_model(o);
  const std::size_t len = model.config().seq_len;
  const auto coarse = splines::uniform_params(len);
  const auto fine = splines::uniform_params(supersampled_length(len, kSuperFactor));
  std::size_t grid_misses = 0;
  for (std::size_t j = 0; j < len; ++j) {
    if (fine[j * kSuperFactor] != coarse[j]) ++grid_misses;
  }
  const auto samples =
      curves::sample_dataset(curves::Family::lissajous, kSuperCurves, curves::Split::test, 0, len);
  const auto rep = supersample_consistency(model, samples, kSuperFactor);
  const auto dense = supersample(model, curves::stack_points({samples.front()}), kSuperFactor);
  const bool ok = grid_misses == 0 && rep.trajectory_max_diff <= kTrajectoryTol &&
                  dense.size() == 2 * rep.out_len && std::isfinite(rep.decode_mse);
  return {ok, "grid " + std::to_string(len) + " -> " + std::to_string(rep.out_len) + " points, " +
                  std::to_string(grid_misses) + " parameter mismatches, trajectory max diff " +
                  num(rep.trajectory_max_diff) + ", decode consistency mse " +
                  num(rep.decode_mse) + " over " + std::to_string(kSuperCurves) + " curves (" +
                  origin + ")"};
}

// --- checkpoint --------------------------------------------------------------------

Verdict checkpoint(const Options& o) {
  const fs::path tmp = fs::temp_directory_path() / ("sbt_acceptance_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  std::size_t ok = 0, total = 0;
  std::vector<std::pair<std::string, Autoencoder<float>>> models;
  auto demo = demo_model(o);
  models.emplace_back(demo.second, std::move(demo.first));
  for (Strategy s : {Strategy::spline, Strategy::alibi, Strategy::alibi_cat}) {
    auto cfg = protocol_config(curves::Family::bezier2, s, 4).model;
    models.emplace_back(to_string(s), Autoencoder<float>(cfg));
  }
  const auto samples =
      curves::sample_dataset(curves::Family::lissajous, 64, curves::Split::test, 0, 256);
  const auto x = curves::stack_points(samples);
  for (auto& [name, model] : models) {
    ++total;
    const auto a = (tmp / "a.sbtf").string(), b = (tmp / "b.sbtf").string();
    save_checkpoint(a, model);
    const auto loaded = load_checkpoint(a);
    save_checkpoint(b, loaded);
    const bool bytes = read_file(a) == read_file(b);
    const auto f0 = run_forward<float>(model, x, 64, 256, 256);
    const auto f1 = run_forward<float>(loaded, x, 64, 256, 256);
    const bool bitwise = f0.recon == f1.recon && f0.latent == f1.latent && f0.trajectory == f1.trajectory;
    if (bytes && bitwise) ++ok;
  }
  fs::remove_all(tmp);
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                           " models byte-identical on save-load-save and bitwise-identical forward"};
}

// --- serve -------------------------------------------------------------------------

Verdict serve(const Options& o) {
  auto demo = demo_model(o);
  auto model = std::make_shared<const Autoencoder<float>>(std::move(demo.first));
  auto service = std::make_shared<const InferenceService>(model, checkpoint_id(*model));
  HttpServer server(service);
  if (!server.bind("127.0.0.1", 0)) return {false, "cannot bind a loopback port"};
  std::thread loop([&] { server.run(); });
  httplib::Client client("127.0.0.1", server.port());
  client.set_read_timeout(60);
  for (int i = 0; i < 100 && !client.Get("/model"); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  using nlohmann::json;
  const std::size_t len = model->config().seq_len;
  const auto samples =
      curves::sample_dataset(curves::Family::lissajous, kServeCurves, curves::Split::test, 0, len);
  double worst = 0.0;
  std::size_t failed_requests = 0;
  for (const auto& s : samples) {
    const std::vector<float> pts(s.points.begin(), s.points.end());
    json body = {{"points", json::array()}};
    for (std::size_t j = 0; j < len; ++j) body["points"].push_back({pts[2 * j], pts[2 * j + 1]});
    auto enc = client.Post("/encode", body.dump(), "application/json");
    if (!enc || enc->status != 200) {
      ++failed_requests;
      continue;
    }
    json req = {{"control_points", json::parse(enc->body)["control_points"]}, {"num_samples", len}};
    auto dec = client.Post("/decode", req.dump(), "application/json");
    if (!dec || dec->status != 200) {
      ++failed_requests;
      continue;
    }
    const auto got = json::parse(dec->body)["points"];
    const auto ref = run_forward<float>(*model, pts, 1, len, len).recon;
    for (std::size_t j = 0; j < len; ++j) {
      for (std::size_t k = 0; k < 2; ++k) {
        worst = std::max(worst, std::abs(got[j][k].get<double>() - double(ref[2 * j + k])));
      }
    }
  }
  server.stop();
  loop.join();
  return {failed_requests == 0 && worst <= kServeTol,
          std::to_string(kServeCurves) + " curves over HTTP, max coordinate diff " + num(worst) +
              " (tolerance " + num(kServeTol) + "), failed requests " +
              std::to_string(failed_requests) + " (" + demo.second + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict(const Options&)>>> criteria = {
      {"spline_math", spline_math},
      {"gradients", gradients},
      {"ordering", ordering},
      {"absolute_threshold", absolute_threshold},
      {"collapse", collapse},
      {"super_sampling", super_sampling},
      {"checkpoint", checkpoint},
      {"serve", serve}};

  CLI::App app{"Acceptance criteria; one PASS/FAIL line each"};
  std::string which = "all";
  Options opts;
  app.add_option("criterion", which, "Criterion name or 'all'")->capture_default_str();
  app.add_option("--work-dir", opts.work_dir, "Directory holding cached training runs");
  app.add_flag("--run-long", opts.run_long, "Train missing protocol runs (hours)");
  CLI11_PARSE(app, argc, argv);

  bool any = false, all_pass = true;
  for (const auto& [name, fn] : criteria) {
    if (which != "all" && which != name) continue;
    any = true;
    Verdict v;
    try {
      v = fn(opts);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
    all_pass = all_pass && v.pass;
  }
  if (!any) {
    std::cerr << "unknown criterion '" << which << "'\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
