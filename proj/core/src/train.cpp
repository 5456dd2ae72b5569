// SPDX-License-Identifier: Apache-2.0

#include "sbt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sbt {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("train config: " + what);
}

}  // namespace

// --- configuration ------------------------------------------------------------------

void TrainConfig::validate() const {
  require(batch_size >= 1, "batch_size must be >= 1");
  require(base_lr > 0.0, "base_lr must be positive");
  require(min_lr > 0.0 && min_lr <= base_lr, "need 0 < min_lr <= base_lr");
  require(beta1 > 0.0 && beta1 < 1.0, "beta1 must lie in (0, 1)");
  require(beta2 > 0.0 && beta2 < 1.0, "beta2 must lie in (0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(!collapse_epsilon || *collapse_epsilon >= 0.0, "collapse_epsilon must be >= 0");
  require(collapse_patience >= 1, "collapse_patience must be >= 1");
  require(clip_norm >= 0.0, "clip_norm must be >= 0");
  require(val_count >= 1, "val_count must be >= 1");
}

double TrainConfig::resolved_collapse_epsilon(std::size_t latent_dim) const {
  return collapse_epsilon ? *collapse_epsilon : 1e-4 * std::sqrt(static_cast<double>(latent_dim));
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = {
      "batch_size", "total_steps", "base_lr",          "min_lr",
      "warmup_steps", "beta1",     "beta2",            "adam_eps",
      "weight_decay", "eval_every", "seed",            "collapse_epsilon",
      "collapse_patience", "clip_norm", "val_count"};
  return k;
}

KeyValues TrainConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("total_steps", std::to_string(total_steps));
  kv.set("base_lr", format_double(base_lr));
  kv.set("min_lr", format_double(min_lr));
  kv.set("warmup_steps", std::to_string(warmup_steps));
  kv.set("beta1", format_double(beta1));
  kv.set("beta2", format_double(beta2));
  kv.set("adam_eps", format_double(adam_eps));
  kv.set("weight_decay", format_double(weight_decay));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("seed", std::to_string(seed));
  kv.set("collapse_epsilon", collapse_epsilon ? format_double(*collapse_epsilon) : "auto");
  kv.set("collapse_patience", std::to_string(collapse_patience));
  kv.set("clip_norm", format_double(clip_norm));
  kv.set("val_count", std::to_string(val_count));
  return kv;
}

TrainConfig TrainConfig::from_keyvalues(const KeyValues& kv) {
  TrainConfig cfg;
  bool min_given = false;
  for (const auto& [key, value] : kv.entries()) {
    if (key == "batch_size") cfg.batch_size = parse_uint(key, value);
    else if (key == "total_steps") cfg.total_steps = parse_uint(key, value);
    else if (key == "base_lr") cfg.base_lr = parse_double(key, value);
    else if (key == "min_lr") { cfg.min_lr = parse_double(key, value); min_given = true; }
    else if (key == "warmup_steps") cfg.warmup_steps = parse_uint(key, value);
    else if (key == "beta1") cfg.beta1 = parse_double(key, value);
    else if (key == "beta2") cfg.beta2 = parse_double(key, value);
    else if (key == "adam_eps") cfg.adam_eps = parse_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "eval_every") cfg.eval_every = parse_uint(key, value);
    else if (key == "seed") cfg.seed = parse_uint(key, value);
    else if (key == "collapse_epsilon") {
      if (value == "auto") cfg.collapse_epsilon.reset();
      else cfg.collapse_epsilon = parse_double(key, value);
    }
    else if (key == "collapse_patience") cfg.collapse_patience = parse_uint(key, value);
    else if (key == "clip_norm") cfg.clip_norm = parse_double(key, value);
    else if (key == "val_count") cfg.val_count = parse_uint(key, value);
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  if (!min_given) cfg.min_lr = cfg.base_lr / 100.0;
  cfg.validate();
  return cfg;
}

KeyValues RunConfig::to_keyvalues() const {
  KeyValues kv = model.to_keyvalues();
  kv.merge(train.to_keyvalues());
  kv.set("family", curves::to_string(family));
  return kv;
}

RunConfig RunConfig::from_keyvalues(const KeyValues& kv) {
  KeyValues model_kv, train_kv;
  RunConfig rc;
  const auto& mk = ModelConfig::keys();
  const auto& tk = TrainConfig::keys();
  for (const auto& [key, value] : kv.entries()) {
    bool known = false;
    if (key == "family") {
      rc.family = curves::parse_family(value);
      known = true;
    }
    if (std::find(mk.begin(), mk.end(), key) != mk.end()) {
      model_kv.set(key, value);
      known = true;
    }
    if (std::find(tk.begin(), tk.end(), key) != tk.end()) {
      train_kv.set(key, value);
      known = true;
    }
    if (!known) throw std::invalid_argument("unknown config key '" + key + "'");
  }
  rc.model = ModelConfig::from_keyvalues(model_kv);
  rc.train = TrainConfig::from_keyvalues(train_kv);
  return rc;
}

RunConfig default_run_config(curves::Family family, Strategy strategy) {
  RunConfig rc;
  rc.family = family;
  rc.model.strategy = strategy;
  rc.model.n_ctrl = default_ctrl_count(strategy);
  rc.model.n_layers = 4;
  rc.model.heads = 4;
  rc.model.width = 64;
  rc.model.ffn_factor = 1;
  rc.train.batch_size = 256;
  rc.train.base_lr = 1e-3;
  switch (family) {
    case curves::Family::lissajous:
      rc.model.latent_dim = 3;
      break;
    case curves::Family::hypotrochoid:
      rc.model.latent_dim = 4;
      break;
    case curves::Family::bezier2:
      rc.model.latent_dim = 2;
      rc.train.batch_size = 1024;
      break;
    case curves::Family::bezier64:
      rc.model.latent_dim = 64;
      rc.model.width = 128;
      rc.train.batch_size = 1024;
      break;
  }
  rc.train.min_lr = rc.train.base_lr / 100.0;
  return rc;
}

// --- optimiser ----------------------------------------------------------------------

double radam_rho_inf(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

double radam_rho(double beta2, std::size_t t) {
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return radam_rho_inf(beta2) - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

template <typename T>
bool radam_step(std::span<ad::Parameter<T>* const> params, RAdamState<T>& state, double lr,
                const RAdamHyper& hyper) {
  for (const auto* p : params) {
    for (T g : p->grad) {
      if (!std::isfinite(g)) return false;
    }
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->size(), T(0));
      state.v[i].assign(params[i]->size(), T(0));
    }
  }
  const std::size_t t = ++state.step;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double rho_inf = radam_rho_inf(b2);
  const double rho = radam_rho(b2, t);
  const bool rectify = rho > 4.0;
  const double r = rectify ? std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf /
                                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                           : 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double theta = p.value[j];
      double g = p.has_grad() ? static_cast<double>(p.grad[j]) : 0.0;
      g += hyper.weight_decay * theta;
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / bc1;
      const double step = rectify ? r * m_hat * std::sqrt(bc2) / (std::sqrt(vj) + hyper.eps)
                                  : m_hat;
      p.value[j] = static_cast<T>(theta - lr * step);
    }
  }
  return true;
}

template bool radam_step(std::span<ad::Parameter<float>* const>, RAdamState<float>&, double,
                         const RAdamHyper&);
template bool radam_step(std::span<ad::Parameter<double>* const>, RAdamState<double>&, double,
                         const RAdamHyper&);

double cosine_lr(std::size_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.min_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) /
                        static_cast<double>(cfg.total_steps - cfg.warmup_steps));
  return cfg.min_lr +
         0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double clip_grad_norm(std::span<ad::Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* p : params) {
      for (T& g : p->grad) g *= factor;
    }
  }
  return norm;
}

template double clip_grad_norm(std::span<ad::Parameter<float>* const>, double);
template double clip_grad_norm(std::span<ad::Parameter<double>* const>, double);

// --- collapse -------------------------------------------------------------------------

namespace {

template <typename T>
CollapseReport collapse_impl(std::span<const T> latents, std::size_t batch, std::size_t n_ctrl,
                             std::size_t dim, double epsilon) {
  if (batch == 0) throw std::invalid_argument("detect_collapse: empty batch");
  if (latents.size() != batch * n_ctrl * dim) {
    throw std::invalid_argument("detect_collapse: size does not match batch x n_ctrl x d");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* pts = latents.data() + b * n_ctrl * dim;
    double widest = 0.0;
    for (std::size_t i = 0; i < n_ctrl; ++i) {
      for (std::size_t j = i + 1; j < n_ctrl; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = static_cast<double>(pts[i * dim + k]) - static_cast<double>(pts[j * dim + k]);
          sq += diff * diff;
        }
        widest = std::max(widest, std::sqrt(sq));
      }
    }
    total += widest;
  }
  const double spread = total / static_cast<double>(batch);
  return {spread, spread < epsilon};
}

}  // namespace

CollapseReport detect_collapse(std::span<const float> latents, std::size_t batch,
                               std::size_t n_ctrl, std::size_t dim, double epsilon) {
  return collapse_impl(latents, batch, n_ctrl, dim, epsilon);
}

CollapseReport detect_collapse(std::span<const double> latents, std::size_t batch,
                               std::size_t n_ctrl, std::size_t dim, double epsilon) {
  return collapse_impl(latents, batch, n_ctrl, dim, epsilon);
}

// --- training loop ----------------------------------------------------------------------

std::string format_metric_row(const MetricRow& row) {
  std::ostringstream out;
  out << row.step << ',' << format_double(row.lr) << ',' << format_double(row.train_loss) << ','
      << format_double(row.val_mse) << ',' << format_double(row.collapse_spread);
  return out.str();
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

ValidationReport validate_model(const Autoencoder<float>& model, curves::Family family,
                                std::size_t count, std::uint64_t seed) {
  const auto& cfg = model.config();
  const std::size_t len = cfg.seq_len;
  constexpr std::size_t kChunk = 64;
  double mse_sum = 0.0, spread_sum = 0.0;
  for (std::size_t first = 0; first < count; first += kChunk) {
    const std::size_t n = std::min(kChunk, count - first);
    const auto samples = curves::sample_dataset(family, n, curves::Split::val, seed, len, first);
    const auto x = curves::stack_points(samples);
    const auto inf = run_forward<float>(model, x, n, len, len);
    const std::size_t per = len * cfg.data_dim;
    for (std::size_t b = 0; b < n; ++b) {
      double sq = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        const double diff = static_cast<double>(inf.recon[b * per + i]) - x[b * per + i];
        sq += diff * diff;
      }
      mse_sum += sq / static_cast<double>(per);
    }
    const auto rep = detect_collapse(std::span<const float>(inf.latent), n, cfg.n_ctrl,
                                     cfg.latent_dim, 0.0);
    spread_sum += rep.spread * static_cast<double>(n);
  }
  return {mse_sum / static_cast<double>(count), spread_sum / static_cast<double>(count)};
}

TrainResult train_run(Autoencoder<float>& model, const TrainConfig& cfg, curves::Family family,
                      const RunOptions& opts) {
  cfg.validate();
  tune_allocator();
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig& mcfg = model.config();
  if (mcfg.data_dim != 2) {
    throw std::invalid_argument("train_run: curve families need data_dim = 2");
  }
  const std::size_t len = mcfg.seq_len;
  const std::size_t batch = cfg.batch_size;
  const double epsilon = cfg.resolved_collapse_epsilon(mcfg.latent_dim);
  // A single latent code has no spread to measure.
  const bool watch_collapse = mcfg.strategy == Strategy::spline;
  auto log = [&](const std::string& msg) {
    if (opts.log) opts.log(msg);
  };

  namespace fs = std::filesystem;
  const bool write = !opts.out_dir.empty();
  std::ofstream metrics_file;
  if (write) {
    fs::create_directories(opts.out_dir);
    RunConfig rc{mcfg, cfg, family};
    std::ofstream(fs::path(opts.out_dir) / "resolved.cfg") << rc.to_keyvalues().to_text();
    metrics_file.open(fs::path(opts.out_dir) / "metrics.csv", std::ios::trunc);
    if (!metrics_file) throw std::runtime_error("cannot write metrics.csv in " + opts.out_dir);
    metrics_file << kMetricsHeader << '\n';
  }

  TrainResult result;
  RAdamState<float> opt;
  const RAdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  auto params = model.parameters();
  double loss_acc = 0.0;
  std::size_t loss_n = 0, below = 0;

  auto evaluate = [&](std::size_t step) {
    const auto val = validate_model(model, family, cfg.val_count, cfg.seed);
    MetricRow row{step, cosine_lr(step, cfg),
                  loss_n ? loss_acc / static_cast<double>(loss_n)
                         : std::numeric_limits<double>::quiet_NaN(),
                  val.mse, val.spread};
    loss_acc = 0.0;
    loss_n = 0;
    result.metrics.push_back(row);
    if (write) {
      metrics_file << format_metric_row(row) << '\n';
      metrics_file.flush();
      if (opts.keep_step_checkpoints && step > 0) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06zu.sbtf", step);
        save_checkpoint((fs::path(opts.out_dir) / name).string(), model);
      }
    }
    if (opts.on_eval) opts.on_eval(row);
    if (watch_collapse) {
      below = val.spread < epsilon ? below + 1 : 0;
    }
  };

  evaluate(0);
  std::size_t step = 0;
  while (step < cfg.total_steps) {
    if (watch_collapse && below >= cfg.collapse_patience) {
      result.status = RunStatus::collapsed;
      log("control points collapsed: spread below " + format_double(epsilon) + " for " +
          std::to_string(below) + " consecutive evaluations");
      break;
    }
    if (opts.stop && opts.stop->load()) {
      result.status = RunStatus::interrupted;
      break;
    }
    ++step;
    const auto samples = curves::sample_dataset(family, batch, curves::Split::train, cfg.seed,
                                                len, (step - 1) * batch);
    std::vector<float> x = curves::stack_points(samples);
    model.zero_grad();
    double loss_value = 0.0;
    {
      ad::Tape<float> tape;
      auto w = model.bind(tape);
      auto in = tape.constant({batch, len, mcfg.data_dim}, std::move(x));
      auto fwd = model.forward(w, in, len);
      auto loss = ad::mse_loss(fwd.recon, in);
      loss_value = loss.value()[0];
      tape.backward(loss);
    }
    if (cfg.clip_norm > 0.0) {
      clip_grad_norm<float>(std::span<ad::Parameter<float>* const>(params), cfg.clip_norm);
    }
    const double lr = cosine_lr(step, cfg);
    if (!std::isfinite(loss_value) ||
        !radam_step<float>(std::span<ad::Parameter<float>* const>(params), opt, lr, hyper)) {
      ++result.skipped_steps;
      log("step " + std::to_string(step) + ": non-finite gradient, update skipped");
    } else {
      loss_acc += loss_value;
      ++loss_n;
    }
    if (step % cfg.eval_every == 0 || step == cfg.total_steps) evaluate(step);
  }
  if (result.status == RunStatus::completed && watch_collapse &&
      below >= cfg.collapse_patience && step == cfg.total_steps) {
    result.status = RunStatus::collapsed;
  }
  result.steps_done = step;
  if (write) {
    result.final_checkpoint = (fs::path(opts.out_dir) / "final.sbtf").string();
    save_checkpoint(result.final_checkpoint, model);
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace sbt
