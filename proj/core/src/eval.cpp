// SPDX-License-Identifier: Apache-2.0

#include "sbt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "sbt/config.hpp"

namespace sbt {

namespace {

constexpr std::size_t kEvalChunk = 64;

RunConfig family_defaults(curves::Family f) { return default_run_config(f, Strategy::spline); }

}  // namespace

double eval_mse(const Reconstructor& model, curves::Family family, std::size_t len,
                std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("eval_mse: count must be >= 1");
  std::vector<double> per_curve(count);
  const std::size_t per = len * 2;
  for (std::size_t first = 0; first < count; first += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, count - first);
    const auto samples = curves::sample_dataset(family, n, curves::Split::test, seed, len, first);
    const auto x = curves::stack_points(samples);
    const auto y = model(x, n, len);
    if (y.size() != x.size()) {
      throw std::invalid_argument("eval_mse: reconstruction size does not match input");
    }
    for (std::size_t b = 0; b < n; ++b) {
      double sq = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        const double diff = static_cast<double>(y[b * per + i]) - static_cast<double>(x[b * per + i]);
        sq += diff * diff;
      }
      per_curve[first + b] = sq / static_cast<double>(per);
    }
  }
  double total = 0.0;
  for (double v : per_curve) total += v;
  return total / static_cast<double>(count);
}

double eval_mse(const Autoencoder<float>& model, curves::Family family, std::size_t count,
                std::uint64_t seed) {
  const auto& cfg = model.config();
  if (cfg.data_dim != 2) {
    throw std::invalid_argument("eval_mse: model has data_dim " + std::to_string(cfg.data_dim) +
                                ", family " + curves::to_string(family) + " produces 2D points");
  }
  Reconstructor r = [&model](std::span<const float> x, std::size_t batch, std::size_t len) {
    return run_forward<float>(model, x, batch, len, len).recon;
  };
  return eval_mse(r, family, cfg.seq_len, count, seed);
}

// --- comparison ---------------------------------------------------------------------

std::vector<MethodSpec> default_methods() {
  return {{"spline", Strategy::spline},
          {"alibi", Strategy::alibi},
          {"alibi_cat", Strategy::alibi_cat}};
}

bool CompareTable::spline_beats(Strategy rival, std::size_t family) const {
  const CompareCell* spline = nullptr;
  const CompareCell* other = nullptr;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    if (methods[m].strategy == Strategy::spline && !spline) spline = &cells[m][family];
    if (methods[m].strategy == rival && !other) other = &cells[m][family];
  }
  return spline && other && spline->mean < other->mean;
}

bool CompareTable::ordering_holds() const {
  if (interrupted) return false;
  for (std::size_t f = 0; f < families.size(); ++f) {
    if (!spline_beats(Strategy::alibi, f) || !spline_beats(Strategy::alibi_cat, f)) return false;
  }
  return true;
}

void CompareTable::write_csv(std::ostream& out) const {
  out << "method";
  for (auto f : families) out << ',' << curves::to_string(f);
  out << '\n';
  for (std::size_t m = 0; m < methods.size(); ++m) {
    out << methods[m].label;
    for (std::size_t f = 0; f < families.size(); ++f) out << ',' << format_double(cells[m][f].mean);
    out << '\n';
  }
}

void CompareTable::write_text(std::ostream& out) const {
  std::size_t label_w = 6;
  for (const auto& m : methods) label_w = std::max(label_w, m.label.size());
  out << std::left << std::setw(static_cast<int>(label_w)) << "method";
  for (auto f : families) out << "  " << std::setw(14) << curves::to_string(f);
  out << '\n';
  for (std::size_t m = 0; m < methods.size(); ++m) {
    out << std::setw(static_cast<int>(label_w)) << methods[m].label;
    for (std::size_t f = 0; f < families.size(); ++f) {
      std::ostringstream cell;
      cell << std::scientific << std::setprecision(4) << cells[m][f].mean;
      if (cells[m][f].collapsed) cell << '*';
      out << "  " << std::setw(14) << cell.str();
    }
    out << '\n';
  }
  for (std::size_t f = 0; f < families.size(); ++f) {
    out << curves::to_string(families[f]) << ": spline<alibi=" << (spline_beats(Strategy::alibi, f) ? "yes" : "no")
        << " spline<alibi_cat=" << (spline_beats(Strategy::alibi_cat, f) ? "yes" : "no") << '\n';
  }
}

CompareTable compare_methods(const std::vector<curves::Family>& families,
                             const std::vector<MethodSpec>& methods, const ModelConfig& base,
                             const TrainConfig& train, const CompareOptions& opts,
                             bool family_latent_dims) {
  if (opts.seeds.empty()) throw std::invalid_argument("compare_methods: no seeds");
  CompareTable table;
  table.methods = methods;
  table.families = families;
  table.cells.assign(methods.size(), std::vector<CompareCell>(families.size()));
  for (std::size_t f = 0; f < families.size(); ++f) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      CompareCell& cell = table.cells[m][f];
      for (std::uint64_t seed : opts.seeds) {
        if (opts.stop && opts.stop->load()) {
          table.interrupted = true;
          return table;
        }
        ModelConfig mc = base;
        mc.strategy = methods[m].strategy;
        mc.n_ctrl = default_ctrl_count(mc.strategy);
        mc.seed = seed;
        if (family_latent_dims) mc.latent_dim = family_defaults(families[f]).model.latent_dim;
        TrainConfig tc = train;
        tc.seed = seed;
        Autoencoder<float> model(mc);
        RunOptions ro;
        ro.log = opts.log;
        ro.stop = opts.stop;
        ro.keep_step_checkpoints = false;
        if (!opts.out_dir.empty()) {
          ro.out_dir = (std::filesystem::path(opts.out_dir) /
                        (curves::to_string(families[f]) + "-" + methods[m].label + "-s" +
                         std::to_string(seed)))
                           .string();
        }
        const auto res = train_run(model, tc, families[f], ro);
        if (res.status == RunStatus::interrupted) {
          table.interrupted = true;
          return table;
        }
        cell.collapsed = cell.collapsed || res.status == RunStatus::collapsed;
        const double mse = eval_mse(model, families[f], opts.test_count, opts.test_seed);
        cell.per_seed.push_back(mse);
        cell.seconds += res.seconds;
        if (opts.log) {
          opts.log(curves::to_string(families[f]) + " " + methods[m].label + " seed " +
                   std::to_string(seed) + ": test mse " + format_double(mse) + " (" +
                   format_double(std::round(res.seconds)) + " s)");
        }
      }
      double sum = 0.0;
      for (double v : cell.per_seed) sum += v;
      cell.mean = sum / static_cast<double>(cell.per_seed.size());
    }
  }
  return table;
}

// --- super-sampling -------------------------------------------------------------------

std::size_t supersampled_length(std::size_t len, std::size_t factor) {
  return factor * (len - 1) + 1;
}

std::vector<float> supersample(const Autoencoder<float>& model, std::span<const float> points,
                               std::size_t factor) {
  const auto& cfg = model.config();
  if (cfg.strategy != Strategy::spline) {
    throw UnsupportedOperation("super-sampling needs a spline model; " + to_string(cfg.strategy) +
                               " has no continuous trajectory");
  }
  if (factor < 1 || factor > 4) {
    throw std::invalid_argument("super-sampling factor must be in 1..4, got " +
                                std::to_string(factor));
  }
  if (points.size() % cfg.data_dim != 0 || points.size() / cfg.data_dim < 2) {
    throw std::invalid_argument("supersample: need at least 2 points of width data_dim");
  }
  const std::size_t len = points.size() / cfg.data_dim;
  const std::size_t out_len = supersampled_length(len, factor);
  if (out_len > cfg.max_len) {
    throw std::invalid_argument("supersample: output length exceeds max_len");
  }
  const auto latent = run_encode<float>(model, points, 1, len);
  return run_decode<float>(model, latent, 1, out_len).recon;
}

SupersampleReport supersample_consistency(const Autoencoder<float>& model,
                                          const std::vector<curves::Sample>& samples,
                                          std::size_t factor) {
  const auto& cfg = model.config();
  if (cfg.strategy != Strategy::spline) {
    throw UnsupportedOperation("super-sampling needs a spline model");
  }
  if (samples.empty()) throw std::invalid_argument("supersample_consistency: no samples");
  const std::size_t len = samples.front().points.size() / 2;
  const std::size_t out_len = supersampled_length(len, factor);
  SupersampleReport rep{factor, out_len, 0.0, 0.0};
  double sq = 0.0;
  std::size_t n_sq = 0;
  for (std::size_t first = 0; first < samples.size(); first += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, samples.size() - first);
    std::vector<curves::Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(first),
                                      samples.begin() + static_cast<std::ptrdiff_t>(first + n));
    const auto x = curves::stack_points(chunk);
    const auto latent = run_encode<float>(model, x, n, len);
    const auto plain = run_decode<float>(model, latent, n, len);
    const auto dense = run_decode<float>(model, latent, n, out_len);
    const std::size_t tw = cfg.trajectory_width();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t jd = j * factor;
        for (std::size_t k = 0; k < tw; ++k) {
          const double a = plain.trajectory[(b * len + j) * tw + k];
          const double c = dense.trajectory[(b * out_len + jd) * tw + k];
          rep.trajectory_max_diff = std::max(rep.trajectory_max_diff, std::abs(a - c));
        }
        for (std::size_t k = 0; k < cfg.data_dim; ++k) {
          const double a = plain.recon[(b * len + j) * cfg.data_dim + k];
          const double c = dense.recon[(b * out_len + jd) * cfg.data_dim + k];
          sq += (a - c) * (a - c);
          ++n_sq;
        }
      }
    }
  }
  rep.decode_mse = sq / static_cast<double>(n_sq);
  return rep;
}

// --- export -----------------------------------------------------------------------------

void export_trajectories(const Autoencoder<float>& model,
                         const std::vector<std::vector<float>>& curves, std::ostream& out) {
  const auto& cfg = model.config();
  const std::size_t tw = cfg.trajectory_width();
  out << "curve,kind,index";
  for (std::size_t k = 0; k < tw; ++k) out << ",z" << k;
  out << '\n';
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto& pts = curves[c];
    if (pts.size() % cfg.data_dim != 0 || pts.size() / cfg.data_dim < 2) {
      throw std::invalid_argument("export_trajectories: curve " + std::to_string(c) +
                                  " needs at least 2 points of width data_dim");
    }
    const std::size_t len = pts.size() / cfg.data_dim;
    const auto inf = run_forward<float>(model, pts, 1, len, len);
    for (std::size_t j = 0; j < len; ++j) {
      out << c << ",trajectory," << j;
      for (std::size_t k = 0; k < tw; ++k) out << ',' << format_float(inf.trajectory[j * tw + k]);
      out << '\n';
    }
    for (std::size_t i = 0; i < cfg.n_ctrl; ++i) {
      out << c << ",control," << i;
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) {
        out << ',' << format_float(inf.latent[i * cfg.latent_dim + k]);
      }
      for (std::size_t k = cfg.latent_dim; k < tw; ++k) out << ',';
      out << '\n';
    }
  }
}

}  // namespace sbt
