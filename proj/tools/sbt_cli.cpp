// SPDX-License-Identifier: Apache-2.0
//
// sbt: train, evaluate, compare, super-sample, export and serve sequence
// autoencoders on synthetic curve families.
//
// Exit status: 0 success, 1 failed --assert-order, 2 usage or input error,
// 3 control-point collapse, 130 interrupted training.

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "sbt/config.hpp"
#include "sbt/curvegen.hpp"
#include "sbt/eval.hpp"
#include "sbt/net.hpp"
#include "sbt/server.hpp"
#include "sbt/train.hpp"

namespace fs = std::filesystem;
using namespace sbt;

namespace {

constexpr int kExitAssert = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCollapse = 3;
constexpr int kExitInterrupted = 130;

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

Autoencoder<float> open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SBTF_SEED");
  if (!s || !*s) return std::nullopt;
  return parse_uint("SBTF_SEED", s);
}

void write_snapshot(const fs::path& path, const KeyValues& kv) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << kv.to_text();
}

// Options shared by train and compare: a config file plus flag overrides.
struct RunFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch, eval_every, layers, width, heads, latent_dim;
  std::optional<double> lr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Flat key=value config file");
    cmd->add_option("--set", sets, "Override a config key (key=value, repeatable)");
    cmd->add_option("--seed", seed, "Seed for initialisation and data");
    cmd->add_option("--steps", steps, "Training steps");
    cmd->add_option("--batch", batch, "Batch size");
    cmd->add_option("--lr", lr, "Base learning rate");
    cmd->add_option("--eval-every", eval_every, "Steps between validations");
    cmd->add_option("--layers", layers, "Transformer layers per stack");
    cmd->add_option("--width", width, "Feature width c");
    cmd->add_option("--heads", heads, "Attention heads");
    cmd->add_option("--latent-dim", latent_dim, "Latent dimension d");
  }

  // Precedence: flags, then config file, then SBTF_SEED (seed only), then defaults.
  KeyValues overlay(KeyValues kv) const {
    if (!config_path.empty()) {
      try {
        kv.merge(KeyValues::load(config_path));
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
    }
    if (!seed && !kv.contains("seed")) {
      if (auto s = env_seed()) kv.set("seed", std::to_string(*s));
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    auto put = [&](const char* key, const auto& v) {
      if (v) kv.set(key, std::to_string(*v));
    };
    put("seed", seed);
    put("total_steps", steps);
    put("batch_size", batch);
    put("eval_every", eval_every);
    put("n_layers", layers);
    put("width", width);
    put("heads", heads);
    put("latent_dim", latent_dim);
    if (lr) {
      kv.set("base_lr", format_double(*lr));
      kv.set("min_lr", format_double(*lr / 100.0));
    }
    return kv;
  }
};

RunConfig resolve(const KeyValues& kv) {
  try {
    return RunConfig::from_keyvalues(kv);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

curves::Family family_arg(const std::string& name) {
  try {
    return curves::parse_family(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

Strategy strategy_arg(const std::string& name) {
  try {
    return parse_strategy(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::ofstream open_output(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw UsageError("cannot write " + path);
  return out;
}

// --- subcommands ---------------------------------------------------------------------

struct TrainCmd {
  RunFlags flags;
  std::optional<std::string> family, strategy;
  std::string out;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("train", "Train one model and write checkpoints + metrics.csv");
    cmd->add_option("--family", family,
                    "lissajous | hypotrochoid | bezier2 | bezier64 (default lissajous)");
    cmd->add_option("--strategy", strategy, "spline | alibi | alibi_cat (default spline)");
    cmd->add_option("--out", out, "Run directory")->required();
    flags.attach(cmd);
    cmd->callback([this] { result = run(); });
  }

  int run() {
    // Family and strategy pick the per-family defaults, so resolve them first.
    KeyValues file;
    if (!flags.config_path.empty()) {
      try {
        file = KeyValues::load(flags.config_path);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
    }
    const auto fam = family_arg(family.value_or(file.get("family").value_or("lissajous")));
    const auto strat = strategy_arg(strategy.value_or(file.get("strategy").value_or("spline")));
    KeyValues kv = flags.overlay(default_run_config(fam, strat).to_keyvalues());
    kv.set("family", curves::to_string(fam));
    kv.set("strategy", to_string(strat));
    if (!file.contains("n_ctrl")) kv.set("n_ctrl", std::to_string(default_ctrl_count(strat)));
    auto rc = resolve(kv);
    rc.model.seed = rc.train.seed;
    Autoencoder<float> model(rc.model);
    RunOptions opts;
    opts.out_dir = out;
    opts.stop = &g_stop;
    opts.log = log_line;
    opts.on_eval = [](const MetricRow& r) {
      std::cerr << "step " << r.step << " lr " << format_double(r.lr) << " train "
                << format_double(r.train_loss) << " val " << format_double(r.val_mse)
                << " spread " << format_double(r.collapse_spread) << std::endl;
    };
    const auto res = train_run(model, rc.train, rc.family, opts);
    std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
    if (!res.metrics.empty()) {
      std::cout << "val_mse=" << format_double(res.metrics.back().val_mse) << "\n";
    }
    if (res.status == RunStatus::collapsed) {
      std::cerr << "error: control points collapsed; the run cannot recover (try a lower lr)\n";
      return kExitCollapse;
    }
    if (res.status == RunStatus::interrupted) return kExitInterrupted;
    return 0;
  }

  int result = 0;
};

struct EvalCmd {
  std::string ckpt, family = "lissajous", out;
  std::size_t count = kDefaultTestCount;
  std::uint64_t seed = 0;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Test-set MSE of a checkpoint");
    cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    cmd->add_option("--family", family, "Curve family")->capture_default_str();
    cmd->add_option("--count", count, "Number of test curves")->capture_default_str();
    cmd->add_option("--seed", seed, "Test-set seed")->capture_default_str();
    cmd->add_option("--out", out, "Optional directory for result.txt and resolved.cfg");
    cmd->callback([this] { result = run(); });
  }

  int run() {
    const auto fam = family_arg(family);
    auto model = open_checkpoint(ckpt);
    double mse = 0.0;
    try {
      mse = eval_mse(model, fam, count, seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    std::ostringstream line;
    line << "mse=" << format_double(mse) << " family=" << family << " count=" << count
         << " strategy=" << to_string(model.config().strategy);
    std::cout << line.str() << "\n";
    if (!out.empty()) {
      KeyValues kv = model.config().to_keyvalues();
      kv.set("family", family);
      kv.set("count", std::to_string(count));
      kv.set("test_seed", std::to_string(seed));
      kv.set("checkpoint", ckpt);
      write_snapshot(fs::path(out) / "resolved.cfg", kv);
      open_output((fs::path(out) / "result.txt").string()) << line.str() << "\n";
    }
    return 0;
  }

  int result = 0;
};

struct CompareCmd {
  RunFlags flags;
  std::vector<std::string> families = {"lissajous", "bezier2"};
  std::vector<std::string> methods = {"spline", "alibi", "alibi_cat"};
  std::vector<std::uint64_t> seeds;
  std::size_t test_count = 1000;
  std::uint64_t test_seed = 0;
  std::string out;
  bool assert_order = false;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("compare", "Train and evaluate every method on every family");
    cmd->add_option("--families", families, "Families (columns)")->capture_default_str();
    cmd->add_option("--methods", methods, "Strategies (rows)")->capture_default_str();
    cmd->add_option("--seeds", seeds, "Seeds averaged per cell (default: 0)");
    cmd->add_option("--test-count", test_count, "Test curves per evaluation")->capture_default_str();
    cmd->add_option("--test-seed", test_seed, "Test-set seed")->capture_default_str();
    cmd->add_option("--out", out, "Directory for per-run outputs and table.csv");
    cmd->add_flag("--assert-order", assert_order,
                  "Exit 1 unless spline beats alibi and alibi_cat in every family");
    flags.attach(cmd);
    cmd->callback([this] { result = run(); });
  }

  int run() {
    std::vector<curves::Family> fams;
    for (const auto& f : families) fams.push_back(family_arg(f));
    std::vector<MethodSpec> specs;
    for (const auto& m : methods) specs.push_back({m, strategy_arg(m)});
    KeyValues kv = default_run_config(fams.front(), Strategy::spline).to_keyvalues();
    kv = flags.overlay(kv);
    const auto rc = resolve(kv);
    CompareOptions opts;
    opts.seeds = seeds.empty() ? std::vector<std::uint64_t>{rc.train.seed} : seeds;
    opts.test_count = test_count;
    opts.test_seed = test_seed;
    opts.out_dir = out;
    opts.log = log_line;
    opts.stop = &g_stop;
    const bool own_latent = !kv.contains("latent_dim") || !flags.latent_dim;
    if (!out.empty()) {
      KeyValues snap = kv;
      snap.set("families", [&] {
        std::string s;
        for (const auto& f : families) s += (s.empty() ? "" : " ") + f;
        return s;
      }());
      std::string seed_text;
      for (auto s : opts.seeds) seed_text += (seed_text.empty() ? "" : " ") + std::to_string(s);
      snap.set("seeds", seed_text);
      snap.set("test_count", std::to_string(test_count));
      snap.set("test_seed", std::to_string(test_seed));
      write_snapshot(fs::path(out) / "resolved.cfg", snap);
    }
    const auto table = compare_methods(fams, specs, rc.model, rc.train, opts, own_latent);
    table.write_text(std::cout);
    if (!out.empty()) {
      auto csv = open_output((fs::path(out) / "table.csv").string());
      table.write_csv(csv);
    }
    if (table.interrupted) return kExitInterrupted;
    if (assert_order && !table.ordering_holds()) {
      std::cerr << "error: spline did not beat every baseline\n";
      return kExitAssert;
    }
    return 0;
  }

  int result = 0;
};

struct SupersampleCmd {
  std::string ckpt, family = "lissajous", input, out;
  std::size_t factor = 4, index = 0;
  std::uint64_t seed = 0;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("supersample", "Decode one curve on a denser latent grid");
    cmd->add_option("--ckpt", ckpt, "Spline-strategy checkpoint")->required();
    cmd->add_option("--factor", factor, "Density factor 1..4")->capture_default_str();
    cmd->add_option("--family", family, "Take the curve from this family's test split")
        ->capture_default_str();
    cmd->add_option("--index", index, "Test-split index of the curve")->capture_default_str();
    cmd->add_option("--seed", seed, "Test-set seed")->capture_default_str();
    cmd->add_option("--input", input, "CSV of x,y rows to use instead of a generated curve");
    cmd->add_option("--out", out, "Output CSV (x,y rows)")->required();
    cmd->callback([this] { result = run(); });
  }

  std::vector<float> load_points() const {
    if (input.empty()) {
      const auto s = curves::sample_dataset(family_arg(family), 1, curves::Split::test, seed,
                                            curves::kDefaultLength, index);
      return curves::stack_points(s);
    }
    std::ifstream in(input);
    if (!in) throw UsageError("cannot read " + input);
    std::vector<float> pts;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == 'x') continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw UsageError("bad row in " + input + ": " + line);
      pts.push_back(static_cast<float>(parse_double("x", line.substr(0, comma))));
      pts.push_back(static_cast<float>(parse_double("y", line.substr(comma + 1))));
    }
    return pts;
  }

  int run() {
    auto model = open_checkpoint(ckpt);
    const auto pts = load_points();
    std::vector<float> dense;
    try {
      dense = supersample(model, pts, factor);
    } catch (const UnsupportedOperation& e) {
      throw UsageError(e.what());
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    auto csv = open_output(out);
    csv << "x,y\n";
    for (std::size_t i = 0; i + 1 < dense.size(); i += 2) {
      csv << format_float(dense[i]) << ',' << format_float(dense[i + 1]) << '\n';
    }
    KeyValues kv = model.config().to_keyvalues();
    kv.set("checkpoint", ckpt);
    kv.set("factor", std::to_string(factor));
    kv.set("source", input.empty() ? family + ":" + std::to_string(index) : input);
    write_snapshot(out + ".resolved.cfg", kv);
    std::cout << "wrote " << dense.size() / 2 << " points to " << out << "\n";
    return 0;
  }

  int result = 0;
};

struct ExportCmd {
  std::string ckpt, family = "lissajous", out;
  std::size_t count = 4;
  std::uint64_t seed = 0;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("export-latents", "Write latent trajectories as CSV");
    cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    cmd->add_option("--family", family, "Curve family")->capture_default_str();
    cmd->add_option("--count", count, "Number of test curves")->capture_default_str();
    cmd->add_option("--seed", seed, "Test-set seed")->capture_default_str();
    cmd->add_option("--out", out, "Output CSV")->required();
    cmd->callback([this] { result = run(); });
  }

  int run() {
    auto model = open_checkpoint(ckpt);
    const auto samples = curves::sample_dataset(family_arg(family), count, curves::Split::test,
                                                seed, model.config().seq_len);
    std::vector<std::vector<float>> pts;
    for (const auto& s : samples) pts.push_back(curves::stack_points({s}));
    auto csv = open_output(out);
    export_trajectories(model, pts, csv);
    KeyValues kv = model.config().to_keyvalues();
    kv.set("checkpoint", ckpt);
    kv.set("family", family);
    kv.set("count", std::to_string(count));
    write_snapshot(out + ".resolved.cfg", kv);
    std::cout << "wrote trajectories of " << count << " curves to " << out << "\n";
    return 0;
  }

  int result = 0;
};

struct GenDataCmd {
  std::string family = "lissajous", split = "train", out;
  std::size_t count = 16, len = curves::kDefaultLength;
  std::uint64_t seed = 0;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-data", "Export generated curves as CSV records");
    cmd->add_option("--family", family, "Curve family")->capture_default_str();
    cmd->add_option("--split", split, "train | val | test")->capture_default_str();
    cmd->add_option("--count", count, "Number of curves")->capture_default_str();
    cmd->add_option("--length", len, "Points per curve")->capture_default_str();
    cmd->add_option("--seed", seed, "Stream seed")->capture_default_str();
    cmd->add_option("--out", out, "Output CSV")->required();
    cmd->callback([this] { result = run(); });
  }

  int run() {
    curves::Split sp;
    try {
      sp = curves::parse_split(split);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const auto samples = curves::sample_dataset(family_arg(family), count, sp, seed, len);
    auto csv = open_output(out);
    curves::write_dataset_csv(csv, samples);
    KeyValues kv;
    kv.set("family", family);
    kv.set("split", split);
    kv.set("count", std::to_string(count));
    kv.set("length", std::to_string(len));
    kv.set("seed", std::to_string(seed));
    write_snapshot(out + ".resolved.cfg", kv);
    return 0;
  }

  int result = 0;
};

struct ServeCmd {
  std::string ckpt, addr = "127.0.0.1:8080";

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("serve", "Serve /encode, /decode and /model over HTTP");
    cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    cmd->add_option("--addr", addr, "host:port to bind")->capture_default_str();
    cmd->callback([this] { result = run(); });
  }

  int run() {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw UsageError("--addr expects host:port");
    const std::string host = addr.substr(0, colon);
    int port = 0;
    try {
      port = static_cast<int>(parse_uint("port", addr.substr(colon + 1)));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    auto model = std::make_shared<const Autoencoder<float>>(open_checkpoint(ckpt));
    auto service = std::make_shared<const InferenceService>(model, checkpoint_id(*model));
    HttpServer server(service);
    if (!server.bind(host, port)) throw UsageError("cannot bind " + addr + " (address in use?)");
    std::cerr << "serving " << ckpt << " on " << host << ":" << server.port() << std::endl;
    std::thread worker([&] { server.run(); });
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
    worker.join();
    std::cerr << "shut down" << std::endl;
    return 0;
  }

  int result = 0;
};

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  CLI::App app{"Spline-latent transformer autoencoders on synthetic curves"};
  app.require_subcommand(1);
  TrainCmd train;
  EvalCmd eval;
  CompareCmd compare;
  SupersampleCmd super;
  ExportCmd exporter;
  GenDataCmd gen;
  ServeCmd serve;
  train.attach(app);
  eval.attach(app);
  compare.attach(app);
  super.attach(app);
  exporter.attach(app);
  gen.attach(app);
  serve.attach(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  for (int r : {train.result, eval.result, compare.result, super.result, exporter.result,
                gen.result, serve.result}) {
    if (r != 0) return r;
  }
  return 0;
}
