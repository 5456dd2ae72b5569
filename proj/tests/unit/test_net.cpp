// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sbt/net.hpp"
#include "sbt/splines.hpp"

using namespace sbt;

namespace {

ModelConfig tiny(Strategy s) {
  ModelConfig cfg;
  cfg.latent_dim = 2;
  cfg.n_layers = 1;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.seq_len = 6;
  cfg.strategy = s;
  cfg.n_ctrl = default_ctrl_count(s);
  cfg.seed = 5;
  return cfg;
}

template <typename T>
std::vector<T> random_curves(std::size_t batch, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> x(batch * len * 2);
  for (auto& v : x) v = static_cast<T>(u(rng));
  return x;
}

double loss_of(const Autoencoder<double>& model, const std::vector<double>& x, std::size_t batch,
               std::size_t len) {
  ad::Tape<double> tape;
  auto w = model.bind_frozen(tape);
  auto in = tape.constant({batch, len, 2}, x);
  return ad::mse_loss(model.forward(w, in, len).recon, in).value()[0];
}

}  // namespace

TEST(Config, ValidationRejectsBrokenInvariants) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto broken = cfg;
  broken.width = 30;  // not divisible by 4 heads
  EXPECT_THROW(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.latent_dim = 0;
  EXPECT_THROW(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.n_ctrl = 1;
  EXPECT_THROW(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.strategy = Strategy::alibi;
  EXPECT_THROW(broken.validate(), std::invalid_argument);  // baselines use one token
}

TEST(Config, KeyValueRoundTrip) {
  ModelConfig cfg = tiny(Strategy::alibi_cat);
  cfg.norm = NormPlacement::post;
  cfg.norm_eps = 3e-7;
  const auto back = ModelConfig::from_keyvalues(KeyValues::parse(cfg.to_keyvalues().to_text()));
  EXPECT_EQ(back.to_keyvalues().to_text(), cfg.to_keyvalues().to_text());
  KeyValues kv;
  kv.set("bogus", "1");
  EXPECT_THROW(ModelConfig::from_keyvalues(kv), std::invalid_argument);
  EXPECT_THROW(parse_strategy("rope"), std::invalid_argument);
}

TEST(Alibi, SlopesForEightHeads) {
  const auto s = alibi_slopes(8);
  ASSERT_EQ(s.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(s[i], std::ldexp(1.0, -static_cast<int>(i + 1)));
}

TEST(Alibi, BiasIsSymmetricWithZeroDiagonal) {
  const std::size_t h = 4, L = 9;
  const auto b = alibi_bias<double>(h, L);
  const auto slopes = alibi_slopes(h);
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t i = 0; i < L; ++i) {
      EXPECT_EQ(b[(k * L + i) * L + i], 0.0);
      for (std::size_t j = 0; j < L; ++j) {
        EXPECT_EQ(b[(k * L + i) * L + j], b[(k * L + j) * L + i]);
        EXPECT_DOUBLE_EQ(b[(k * L + i) * L + j], -slopes[k] * std::abs(double(i) - double(j)));
      }
    }
  }
}

TEST(Sinusoid, PositionZeroAlternatesZeroOne) {
  const auto t = sinusoid_table<float>(3, 6, 10000.0);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(t[c], c % 2 == 0 ? 0.0f : 1.0f);
  EXPECT_FLOAT_EQ(t[6 + 0], std::sin(1.0f));
  EXPECT_FLOAT_EQ(t[6 + 3], std::cos(std::pow(10000.0f, -2.0f / 6.0f)));
}

TEST(Encode, ShapeIsControlsByLatentForAnyLength) {
  Autoencoder<float> model(tiny(Strategy::spline));
  for (std::size_t L : {1u, 2u, 6u, 17u}) {
    const auto x = random_curves<float>(3, L, L);
    EXPECT_EQ(run_encode<float>(model, x, 3, L).size(), 3u * 4u * 2u);
  }
  auto cfg = tiny(Strategy::spline);
  cfg.max_len = 8;
  Autoencoder<float> small(cfg);
  EXPECT_THROW(run_encode<float>(small, random_curves<float>(1, 9, 1), 1, 9), std::invalid_argument);
}

TEST(Encode, ZeroedBlocksReturnProjectedControlTokens) {
  Autoencoder<double> model(tiny(Strategy::spline));
  auto& w = model.weights();
  for (auto& b : w.encoder.blocks) {
    for (auto* p : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_in, &b.ffn_out}) {
      std::fill(p->value.begin(), p->value.end(), 0.0);
    }
  }
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (auto& v : w.encoder.final_norm.value) v = g(rng);
  for (auto& v : w.to_latent.bias.value) v = g(rng);

  // Oracle: the residual stream carries the control tokens unchanged, so the
  // latent is to_latent(rms_norm(token) * gain).
  const std::size_t c = 8, d = 2;
  std::vector<double> expected(4 * d);
  for (std::size_t r = 0; r < 4; ++r) {
    const double* tok = w.control_tokens.value.data() + r * c;
    double ms = 0.0;
    for (std::size_t k = 0; k < c; ++k) ms += tok[k] * tok[k];
    const double inv = 1.0 / std::sqrt(ms / c + model.config().norm_eps);
    for (std::size_t j = 0; j < d; ++j) {
      double acc = w.to_latent.bias.value[j];
      for (std::size_t k = 0; k < c; ++k) {
        acc += tok[k] * inv * w.encoder.final_norm.value[k] * w.to_latent.weight.value[k * d + j];
      }
      expected[r * d + j] = acc;
    }
  }
  for (std::uint64_t seed : {1u, 2u}) {
    const auto got = run_encode<double>(model, random_curves<double>(1, 6, seed), 1, 6);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
  }
}

TEST(Encode, SwappingInteriorTokensChangesLatent) {
  Autoencoder<float> model(tiny(Strategy::spline));
  auto x = random_curves<float>(1, 6, 4);
  const auto a = run_encode<float>(model, x, 1, 6);
  std::swap(x[2 * 2], x[3 * 2]);
  std::swap(x[2 * 2 + 1], x[3 * 2 + 1]);
  const auto b = run_encode<float>(model, x, 1, 6);
  double dist = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dist += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_GT(dist, 0.0);
}

TEST(Encode, TokenEmbeddingHasNoPositionalTerm) {
  Autoencoder<float> model(tiny(Strategy::spline));
  ad::Tape<float> tape;
  auto w = model.bind_frozen(tape);
  std::vector<float> x;
  for (int i = 0; i < 6; ++i) x.insert(x.end(), {0.3f, -0.8f});
  const auto emb = model.embed_tokens(w, tape.constant({1, 6, 2}, x)).value();
  // Rows may still differ in the last bit because the matrix kernels treat
  // remainder rows separately.
  for (std::size_t r = 1; r < 6; ++r) {
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(emb[r * 8 + k], emb[k], 1e-6);
  }
  // Permuting tokens permutes their embeddings.
  std::vector<float> y = {0.1f, 0.2f, -0.7f, 0.4f, 0.9f, -0.3f};
  std::vector<float> y_rev = {0.9f, -0.3f, -0.7f, 0.4f, 0.1f, 0.2f};
  const auto e = model.embed_tokens(w, tape.constant({1, 3, 2}, y)).value();
  const auto e_rev = model.embed_tokens(w, tape.constant({1, 3, 2}, y_rev)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(e[r * 8 + k], e_rev[(2 - r) * 8 + k], 1e-6);
  }
}

TEST(Encode, StrategyDoesNotAffectEncoderOutput) {
  // Both baselines share one control token, so their encoders are identical.
  Autoencoder<float> alibi(tiny(Strategy::alibi));
  Autoencoder<float> cat(tiny(Strategy::alibi_cat));
  const auto x = random_curves<float>(2, 6, 9);
  EXPECT_EQ(run_encode<float>(alibi, x, 2, 6), run_encode<float>(cat, x, 2, 6));
  // The spline encoder equals a baseline encoder given the same control tokens.
  auto cfg = tiny(Strategy::spline);
  cfg.n_ctrl = 2;
  Autoencoder<float> spline(cfg);
  auto base_cfg = tiny(Strategy::alibi);
  Autoencoder<float> base(base_cfg);
  copy_weights(alibi, base);
  for (auto* p : base.parameters()) {
    auto* q = spline.find(p->name);
    ASSERT_NE(q, nullptr);
    if (p->name == "control_tokens" || p->name.rfind("from_latent", 0) == 0) continue;
    q->value = p->value;
  }
  EXPECT_NE(run_encode<float>(spline, x, 2, 6).size(), run_encode<float>(base, x, 2, 6).size());
}

TEST(Trajectory, SplineRowsFollowCubicBezier) {
  Autoencoder<float> model(tiny(Strategy::spline));
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  std::vector<float> lat(4 * 2);
  for (auto& v : lat) v = static_cast<float>(g(rng));
  const std::size_t L = 37;
  const auto inf = run_decode<float>(model, lat, 1, L);
  splines::ControlPolygon poly(2, std::vector<double>(lat.begin(), lat.end()));
  const auto ts = splines::uniform_params(L);
  for (std::size_t j = 0; j < L; ++j) {
    const auto ref = splines::eval_cubic_bezier(poly, ts[j]);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(inf.trajectory[j * 2 + k], ref[k], 1e-6);
  }
}

TEST(Trajectory, SplineEndpointsAndConstantLatent) {
  Autoencoder<float> model(tiny(Strategy::spline));
  const std::vector<float> lat = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto two = run_decode<float>(model, lat, 1, 2);
  EXPECT_EQ(two.trajectory, (std::vector<float>{1, 2, 7, 8}));
  const std::vector<float> same = {0.25f, -1.5f, 0.25f, -1.5f, 0.25f, -1.5f, 0.25f, -1.5f};
  const auto flat = run_decode<float>(model, same, 1, 50);
  for (std::size_t j = 0; j < 50; ++j) {
    EXPECT_NEAR(flat.trajectory[j * 2], 0.25f, 1e-6);
    EXPECT_NEAR(flat.trajectory[j * 2 + 1], -1.5f, 1e-6);
  }
}

TEST(Trajectory, BaselinesAddOrConcatenateSinusoids) {
  const std::vector<float> code = {0.5f, -0.25f};
  const auto pe = sinusoid_table<float>(5, 2, 10000.0);
  Autoencoder<float> alibi(tiny(Strategy::alibi));
  const auto a = run_decode<float>(alibi, code, 1, 5).trajectory;
  EXPECT_EQ(a[0], 0.5f);
  EXPECT_EQ(a[1], 0.75f);
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(a[j * 2 + k], code[k] + pe[j * 2 + k]);
  }
  Autoencoder<float> cat(tiny(Strategy::alibi_cat));
  const auto c = run_decode<float>(cat, code, 1, 5).trajectory;
  ASSERT_EQ(c.size(), 5u * 4u);
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_EQ(c[j * 4 + 0], code[0]);
    EXPECT_EQ(c[j * 4 + 1], code[1]);
    EXPECT_EQ(c[j * 4 + 2], pe[j * 2]);
    EXPECT_EQ(c[j * 4 + 3], pe[j * 2 + 1]);
  }
}

TEST(Trajectory, WrongControlCountIsRejected) {
  Autoencoder<float> model(tiny(Strategy::spline));
  ad::Tape<float> tape;
  auto lat = tape.constant({1, 3, 2}, std::vector<float>(6, 0.0f));
  EXPECT_THROW(model.make_trajectory(lat, 6), std::invalid_argument);
  Autoencoder<float> alibi(tiny(Strategy::alibi));
  EXPECT_THROW(alibi.make_trajectory(tape.constant({1, 4, 2}, std::vector<float>(8, 0.0f)), 6),
               std::invalid_argument);
}

TEST(Decode, ConstantTrajectoryGivesConstantOutput) {
  for (Strategy s : {Strategy::spline, Strategy::alibi_cat}) {
    Autoencoder<float> model(tiny(s));
    const std::size_t w = model.config().trajectory_width();
    std::vector<float> row(w);
    for (std::size_t k = 0; k < w; ++k) row[k] = 0.3f * static_cast<float>(k) - 0.4f;
    std::vector<float> traj;
    for (int j = 0; j < 40; ++j) traj.insert(traj.end(), row.begin(), row.end());
    ad::Tape<float> tape;
    auto wts = model.bind_frozen(tape);
    const auto out = model.decode(wts, tape.constant({1, 40, w}, traj)).value();
    ASSERT_EQ(out.size(), 80u);
    for (std::size_t j = 1; j < 40; ++j) {
      EXPECT_NEAR(out[j * 2], out[0], 1e-6);
      EXPECT_NEAR(out[j * 2 + 1], out[1], 1e-6);
    }
  }
}

TEST(Decode, WidthMismatchIsRejected) {
  Autoencoder<float> model(tiny(Strategy::alibi_cat));
  ad::Tape<float> tape;
  auto w = model.bind_frozen(tape);
  EXPECT_THROW(model.decode(w, tape.constant({1, 4, 2}, std::vector<float>(8, 0.0f))),
               std::invalid_argument);
}

TEST(Forward, ShapesRoundTrip) {
  for (Strategy s : {Strategy::spline, Strategy::alibi, Strategy::alibi_cat}) {
    Autoencoder<float> model(tiny(s));
    const auto x = random_curves<float>(3, 6, 1);
    const auto inf = run_forward<float>(model, x, 3, 6, 6);
    EXPECT_EQ(inf.recon.size(), x.size());
    EXPECT_EQ(inf.latent.size(), 3u * model.config().n_ctrl * 2u);
    EXPECT_EQ(inf.trajectory.size(), 3u * 6u * model.config().trajectory_width());
  }
}

TEST(Forward, DeterministicAcrossCalls) {
  Autoencoder<float> a(tiny(Strategy::spline));
  Autoencoder<float> b(tiny(Strategy::spline));
  const auto x = random_curves<float>(2, 6, 2);
  EXPECT_EQ(run_forward<float>(a, x, 2, 6, 6).recon, run_forward<float>(b, x, 2, 6, 6).recon);
}

class TinyModelGradients : public ::testing::TestWithParam<std::pair<Strategy, NormPlacement>> {};

TEST_P(TinyModelGradients, EveryParameterMatchesFiniteDifferences) {
  auto cfg = tiny(GetParam().first);
  cfg.norm = GetParam().second;
  Autoencoder<double> model(cfg);
  const std::size_t B = 2, L = 6;
  const auto x = random_curves<double>(B, L, 11);
  {
    ad::Tape<double> tape;
    auto w = model.bind(tape);
    auto in = tape.constant({B, L, 2}, x);
    tape.backward(ad::mse_loss(model.forward(w, in, L).recon, in));
  }
  const double h = 1e-6;
  for (auto* p : model.parameters()) {
    double diff = 0.0, na = 0.0, nf = 0.0;
    if (p->grad.empty() && cfg.norm == NormPlacement::post &&
        p->name.find("final_norm") != std::string::npos) {
      continue;  // post-norm stacks end in a block norm
    }
    ASSERT_EQ(p->grad.size(), p->value.size()) << p->name;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss_of(model, x, B, L);
      p->value[i] = saved - h;
      const double down = loss_of(model, x, B, L);
      p->value[i] = saved;
      const double fd = (up - down) / (2 * h);
      diff += (fd - p->grad[i]) * (fd - p->grad[i]);
      na += p->grad[i] * p->grad[i];
      nf += fd * fd;
    }
    const double denom = std::sqrt(std::max(na, nf));
    if (denom > 1e-12) EXPECT_LT(std::sqrt(diff) / denom, 1e-5) << p->name;
  }
}

INSTANTIATE_TEST_SUITE_P(Strategies, TinyModelGradients,
                         ::testing::Values(std::pair{Strategy::spline, NormPlacement::pre},
                                           std::pair{Strategy::alibi, NormPlacement::pre},
                                           std::pair{Strategy::alibi_cat, NormPlacement::pre},
                                           std::pair{Strategy::spline, NormPlacement::post}),
                         [](const auto& info) {
                           return to_string(info.param.first) +
                                  (info.param.second == NormPlacement::pre ? "_pre" : "_post");
                         });

TEST(Parameters, CountAndInitialisation) {
  Autoencoder<float> model(tiny(Strategy::spline));
  EXPECT_EQ(model.weights().control_tokens.shape, (ad::Shape{4, 8}));
  for (float g : model.weights().encoder.final_norm.value) EXPECT_EQ(g, 1.0f);
  for (float b : model.weights().dec_out.bias.value) EXPECT_EQ(b, 0.0f);
  std::size_t total = 0;
  for (const auto* p : model.parameters()) total += p->size();
  EXPECT_EQ(model.parameter_count(), total);
  EXPECT_NE(model.find("encoder.0.wq"), nullptr);
  EXPECT_EQ(model.find("encoder.1.wq"), nullptr);
}
