// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "sbt/curvegen.hpp"
#include "sbt/net.hpp"
#include "sbt/server.hpp"
#include "sbt/splines.hpp"
#include "sbt/train.hpp"

using namespace sbt;

namespace {

ModelConfig desk_config(Strategy s) {
  ModelConfig cfg;
  cfg.latent_dim = 3;
  cfg.n_layers = 2;
  cfg.heads = 4;
  cfg.width = 32;
  cfg.strategy = s;
  cfg.n_ctrl = default_ctrl_count(s);
  return cfg;
}

std::vector<float> batch_of(std::size_t batch, std::size_t len) {
  return curves::stack_points(
      curves::sample_dataset(curves::Family::lissajous, batch, curves::Split::train, 0, len));
}

}  // namespace

static void BM_BasisAll(benchmark::State& state) {
  const auto kv = splines::KnotVector::clamped_uniform(static_cast<std::size_t>(state.range(0)), 3);
  double t = 0.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(splines::basis_all(kv, t));
    t = t > 0.99 ? 0.0 : t + 0.01;
  }
}
BENCHMARK(BM_BasisAll)->Arg(4)->Arg(16)->Arg(64);

static void BM_SampleCubicBezier(benchmark::State& state) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<double> c(4 * 64);
  for (auto& v : c) v = g(rng);
  const splines::ControlPolygon poly(64, c);
  const auto len = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(splines::sample_uniform(poly, len));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SampleCubicBezier)->Arg(256)->Arg(1021);

static void BM_Attention(benchmark::State& state) {
  const std::size_t B = 8, H = 4, L = static_cast<std::size_t>(state.range(0)), dh = 8;
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g;
  auto rnd = [&](std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
  };
  const auto q = rnd(B * H * L * dh), k = rnd(B * H * L * dh), v = rnd(B * H * L * dh);
  const auto bias = rnd(H * L * L);
  const bool grad = state.range(1) != 0;
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto vq = tape.leaf({B, H, L, dh}, q, grad);
    auto vk = tape.leaf({B, H, L, dh}, k, grad);
    auto vv = tape.leaf({B, H, L, dh}, v, grad);
    auto out = ad::attention(vq, vk, vv, tape.constant({H, L, L}, bias), 0.35f);
    if (grad) tape.backward(ad::sum(out));
    benchmark::DoNotOptimize(out.value().data());
  }
}
BENCHMARK(BM_Attention)->Args({64, 0})->Args({256, 0})->Args({256, 1})->Unit(benchmark::kMillisecond);

static void BM_InferenceForward(benchmark::State& state) {
  Autoencoder<float> model(desk_config(Strategy::spline));
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const auto x = batch_of(batch, 256);
  for (auto _ : state) benchmark::DoNotOptimize(run_forward<float>(model, x, batch, 256, 256));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_InferenceForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

// One optimisation step at the desk-scale configuration, batch size as argument.
static void BM_TrainStep(benchmark::State& state) {
  tune_allocator();
  const auto strategy = static_cast<Strategy>(state.range(1));
  Autoencoder<float> model(desk_config(strategy));
  auto params = model.parameters();
  RAdamState<float> opt;
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const auto x = batch_of(batch, 256);
  for (auto _ : state) {
    model.zero_grad();
    {
      ad::Tape<float> tape;
      auto w = model.bind(tape);
      auto in = tape.constant({batch, 256, 2}, x);
      tape.backward(ad::mse_loss(model.forward(w, in, 256).recon, in));
    }
    clip_grad_norm<float>(std::span<ad::Parameter<float>* const>(params), 1.0);
    radam_step<float>(std::span<ad::Parameter<float>* const>(params), opt, 1e-3, {});
  }
  state.SetLabel(to_string(strategy));
}
BENCHMARK(BM_TrainStep)
    ->Args({8, static_cast<int>(Strategy::spline)})
    ->Args({64, static_cast<int>(Strategy::spline)})
    ->Args({64, static_cast<int>(Strategy::alibi_cat)})
    ->Unit(benchmark::kMillisecond)
    ->MinTime(2.0);

static void BM_SerializeCheckpoint(benchmark::State& state) {
  Autoencoder<float> model(desk_config(Strategy::spline));
  for (auto _ : state) benchmark::DoNotOptimize(serialize_checkpoint(model));
}
BENCHMARK(BM_SerializeCheckpoint);

static void BM_ServiceEncode(benchmark::State& state) {
  auto model = std::make_shared<const Autoencoder<float>>(desk_config(Strategy::spline));
  InferenceService svc(model, checkpoint_id(*model));
  const auto x = batch_of(1, 256);
  std::string body = "{\"points\": [";
  for (std::size_t j = 0; j < 256; ++j) {
    body += (j ? ",[" : "[") + std::to_string(x[2 * j]) + "," + std::to_string(x[2 * j + 1]) + "]";
  }
  body += "]}";
  for (auto _ : state) benchmark::DoNotOptimize(svc.encode(body));
}
BENCHMARK(BM_ServiceEncode)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
