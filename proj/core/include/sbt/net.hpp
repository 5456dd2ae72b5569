// SPDX-License-Identifier: Apache-2.0
//
// Transformer sequence autoencoder with a selectable latent strategy:
//
//   spline     n_ctrl control tokens -> n_ctrl latent points -> Bezier
//              trajectory sampled at t = j / (L_out - 1)
//   alibi      one control token -> latent code repeated L_out times plus a
//              sinusoidal position vector
//   alibi_cat  as alibi, but the position vector is concatenated (width 2d)
//
// Encoder and decoder are stacks of T5-style blocks (RMS norm, bias-free
// attention and FFN, GeLU) with a symmetric ALiBi bias in every layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sbt/autodiff.hpp"
#include "sbt/config.hpp"

namespace sbt {

enum class Strategy { spline, alibi, alibi_cat };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

enum class NormPlacement { pre, post };

struct ModelConfig {
  std::size_t latent_dim = 3;  // d
  std::size_t n_layers = 4;    // per stack
  std::size_t heads = 4;
  std::size_t width = 64;  // c
  std::size_t ffn_factor = 1;
  std::size_t n_ctrl = 4;
  Strategy strategy = Strategy::spline;
  std::size_t data_dim = 2;
  std::size_t seq_len = 256;
  std::size_t max_len = 4096;  // longest accepted input / output sequence
  double norm_eps = 1e-6;
  NormPlacement norm = NormPlacement::pre;
  double pe_base = 10000.0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
  /// Width of one trajectory row fed to the decoder (2d for alibi_cat).
  std::size_t trajectory_width() const;

  KeyValues to_keyvalues() const;
  static ModelConfig from_keyvalues(const KeyValues& kv);
  static const std::vector<std::string>& keys();
};

/// Spline: 4 control tokens; baselines: a single [CLS]-style token.
std::size_t default_ctrl_count(Strategy s);

// Weight layout shared by stored parameters (P = ad::Parameter<T>) and their
// per-tape bindings (P = ad::Var<T>). Linear weights are [in, out].
template <typename P>
struct Linear {
  P weight;
  P bias;
};

template <typename P>
struct Block {
  P attn_norm;
  P wq, wk, wv, wo;
  P ffn_norm;
  P ffn_in, ffn_out;
};

template <typename P>
struct Stack {
  std::vector<Block<P>> blocks;
  P final_norm;  // applied only with pre-norm placement
};

template <typename P>
struct Weights {
  Linear<P> enc_in, enc_hidden;  // token MLP encoder
  P control_tokens;              // [n_ctrl, c]
  Stack<P> encoder;
  Linear<P> to_latent;    // c -> d
  Linear<P> from_latent;  // trajectory width -> c
  Stack<P> decoder;
  Linear<P> dec_hidden, dec_out;  // token MLP decoder, no activation at the end

  /// Visits every slot with its canonical name, in canonical order.
  template <typename F>
  void for_each(F&& f);
};

template <typename P>
template <typename F>
void Weights<P>::for_each(F&& f) {
  auto linear = [&](const std::string& name, Linear<P>& l) {
    f(name + ".weight", l.weight);
    f(name + ".bias", l.bias);
  };
  auto stack = [&](const std::string& name, Stack<P>& s) {
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      const std::string p = name + "." + std::to_string(i) + ".";
      Block<P>& b = s.blocks[i];
      f(p + "attn_norm", b.attn_norm);
      f(p + "wq", b.wq);
      f(p + "wk", b.wk);
      f(p + "wv", b.wv);
      f(p + "wo", b.wo);
      f(p + "ffn_norm", b.ffn_norm);
      f(p + "ffn_in", b.ffn_in);
      f(p + "ffn_out", b.ffn_out);
    }
    f(name + ".final_norm", s.final_norm);
  };
  linear("enc_in", enc_in);
  linear("enc_hidden", enc_hidden);
  f(std::string("control_tokens"), control_tokens);
  stack("encoder", encoder);
  linear("to_latent", to_latent);
  linear("from_latent", from_latent);
  stack("decoder", decoder);
  linear("dec_hidden", dec_hidden);
  linear("dec_out", dec_out);
}

/// Per-head additive bias -slope_h * |i - j|, slopes 2^(-8h/heads), h = 1..heads.
/// Returned row-major as [heads, len, len].
std::vector<double> alibi_slopes(std::size_t heads);
template <typename T>
std::vector<T> alibi_bias(std::size_t heads, std::size_t len);

/// Sinusoidal position vectors [len, width]: even columns sin(pos / base^(2i/width)),
/// odd columns cos of the same angle.
template <typename T>
std::vector<T> sinusoid_table(std::size_t len, std::size_t width, double base);

/// Bezier basis [len, n_ctrl] at t_j = j / (len - 1).
template <typename T>
std::vector<T> bezier_basis(std::size_t n_ctrl, std::size_t len);

template <typename T>
class Autoencoder {
 public:
  using Param = ad::Parameter<T>;
  using V = ad::Var<T>;

  /// Builds and initialises weights from cfg.seed: linear weights ~ N(0, 1/fan_in),
  /// biases 0, norm gains 1, control tokens ~ N(0, 1).
  explicit Autoencoder(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  Weights<Param>& weights() { return weights_; }
  const Weights<Param>& weights() const { return weights_; }

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  Param* find(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();

  /// Records every parameter on `tape`; backward() accumulates into param.grad.
  Weights<V> bind(ad::Tape<T>& tape);
  /// Records parameters as constants (read-only, shareable across threads).
  Weights<V> bind_frozen(ad::Tape<T>& tape) const;

  /// x [B, L, data_dim] -> latent control points [B, n_ctrl, d].
  V encode(const Weights<V>& w, V x) const;
  /// latent [B, n_ctrl, d] -> trajectory [B, out_len, d or 2d].
  V make_trajectory(V latent, std::size_t out_len) const;
  /// trajectory [B, out_len, width] -> reconstruction [B, out_len, data_dim].
  V decode(const Weights<V>& w, V trajectory) const;

  struct Forward {
    V recon;
    V latent;
    V trajectory;
  };
  Forward forward(const Weights<V>& w, V x, std::size_t out_len) const;

  /// Embedding of data tokens by the token MLP alone, [B, L, c].
  V embed_tokens(const Weights<V>& w, V x) const;

 private:
  V linear(V x, const Linear<V>& l) const;
  V attention(V x, const Block<V>& b, V bias) const;
  V block(V x, const Block<V>& b, V bias) const;
  V stack(V x, const Stack<V>& s) const;

  ModelConfig cfg_;
  Weights<Param> weights_;
};

// --- plain-data inference helpers (frozen parameters, thread-safe) -----------

template <typename T>
struct Inference {
  std::size_t batch = 0;
  std::size_t out_len = 0;
  std::vector<T> recon;       // [batch, out_len, data_dim]
  std::vector<T> latent;      // [batch, n_ctrl, d]
  std::vector<T> trajectory;  // [batch, out_len, trajectory width]
};

/// Full pass over `batch` sequences of length `len` stored back to back.
template <typename T>
Inference<T> run_forward(const Autoencoder<T>& model, std::span<const T> x, std::size_t batch,
                         std::size_t len, std::size_t out_len);

/// Latent control points only: [batch, n_ctrl, d].
template <typename T>
std::vector<T> run_encode(const Autoencoder<T>& model, std::span<const T> x, std::size_t batch,
                          std::size_t len);

/// Decodes user-supplied latent points [batch, n_ctrl, d].
template <typename T>
Inference<T> run_decode(const Autoencoder<T>& model, std::span<const T> latent,
                        std::size_t batch, std::size_t out_len);

// --- checkpoints ------------------------------------------------------------------
//
// Layout (all integers little-endian u32):
//   "SBTF" | version | config length | config text (UTF-8 key=value lines)
//   | tensor count | per tensor: name length, name, rank, dims..., f32 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Autoencoder<float>& model);
std::vector<unsigned char> serialize_checkpoint(const Autoencoder<float>& model);
/// Throws std::runtime_error on bad magic, version, truncation or layout mismatch.
Autoencoder<float> load_checkpoint(const std::string& path);
Autoencoder<float> deserialize_checkpoint(std::span<const unsigned char> bytes);

/// Copies all weights, converting precision. Configs must match.
template <typename To, typename From>
void copy_weights(const Autoencoder<From>& src, Autoencoder<To>& dst);

}  // namespace sbt
