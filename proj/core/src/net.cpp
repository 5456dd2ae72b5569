// SPDX-License-Identifier: Apache-2.0

#include "sbt/net.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "sbt/splines.hpp"

namespace sbt {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::spline:
      return "spline";
    case Strategy::alibi:
      return "alibi";
    case Strategy::alibi_cat:
      return "alibi_cat";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "spline") return Strategy::spline;
  if (name == "alibi") return Strategy::alibi;
  if (name == "alibi_cat" || name == "alibi-cat") return Strategy::alibi_cat;
  throw std::invalid_argument("unknown strategy '" + name +
                              "' (valid: spline, alibi, alibi_cat)");
}

std::size_t default_ctrl_count(Strategy s) { return s == Strategy::spline ? 4 : 1; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("model config: " + what);
  };
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (width < 1 || width % heads != 0) fail("width must be a positive multiple of heads");
  if (ffn_factor < 1) fail("ffn_factor must be >= 1");
  if (data_dim < 1) fail("data_dim must be >= 1");
  if (seq_len < 2) fail("seq_len must be >= 2");
  if (seq_len > max_len) fail("seq_len exceeds max_len");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!(pe_base > 1.0)) fail("pe_base must exceed 1");
  if (strategy == Strategy::spline && n_ctrl < 2) fail("spline strategy needs n_ctrl >= 2");
  if (strategy != Strategy::spline && n_ctrl != 1) {
    fail(to_string(strategy) + " strategy uses exactly one control token");
  }
}

std::size_t ModelConfig::trajectory_width() const {
  return strategy == Strategy::alibi_cat ? 2 * latent_dim : latent_dim;
}

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k = {
      "latent_dim", "n_layers", "heads",    "width", "ffn_factor", "n_ctrl",  "strategy",
      "data_dim",   "seq_len",  "max_len",  "norm_eps", "norm",   "pe_base", "seed"};
  return k;
}

KeyValues ModelConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("latent_dim", std::to_string(latent_dim));
  kv.set("n_layers", std::to_string(n_layers));
  kv.set("heads", std::to_string(heads));
  kv.set("width", std::to_string(width));
  kv.set("ffn_factor", std::to_string(ffn_factor));
  kv.set("n_ctrl", std::to_string(n_ctrl));
  kv.set("strategy", to_string(strategy));
  kv.set("data_dim", std::to_string(data_dim));
  kv.set("seq_len", std::to_string(seq_len));
  kv.set("max_len", std::to_string(max_len));
  kv.set("norm_eps", format_double(norm_eps));
  kv.set("norm", norm == NormPlacement::pre ? "pre" : "post");
  kv.set("pe_base", format_double(pe_base));
  kv.set("seed", std::to_string(seed));
  return kv;
}

ModelConfig ModelConfig::from_keyvalues(const KeyValues& kv) {
  ModelConfig cfg;
  bool ctrl_given = false;
  for (const auto& [key, value] : kv.entries()) {
    if (key == "latent_dim") cfg.latent_dim = parse_uint(key, value);
    else if (key == "n_layers") cfg.n_layers = parse_uint(key, value);
    else if (key == "heads") cfg.heads = parse_uint(key, value);
    else if (key == "width") cfg.width = parse_uint(key, value);
    else if (key == "ffn_factor") cfg.ffn_factor = parse_uint(key, value);
    else if (key == "n_ctrl") { cfg.n_ctrl = parse_uint(key, value); ctrl_given = true; }
    else if (key == "strategy") cfg.strategy = parse_strategy(value);
    else if (key == "data_dim") cfg.data_dim = parse_uint(key, value);
    else if (key == "seq_len") cfg.seq_len = parse_uint(key, value);
    else if (key == "max_len") cfg.max_len = parse_uint(key, value);
    else if (key == "norm_eps") cfg.norm_eps = parse_double(key, value);
    else if (key == "norm") {
      if (value == "pre") cfg.norm = NormPlacement::pre;
      else if (value == "post") cfg.norm = NormPlacement::post;
      else throw std::invalid_argument("config key 'norm': expected pre or post");
    }
    else if (key == "pe_base") cfg.pe_base = parse_double(key, value);
    else if (key == "seed") cfg.seed = parse_uint(key, value);
    else throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  if (!ctrl_given) cfg.n_ctrl = default_ctrl_count(cfg.strategy);
  cfg.validate();
  return cfg;
}

// --- fixed tables -------------------------------------------------------------------

std::vector<double> alibi_slopes(std::size_t heads) {
  std::vector<double> slopes(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    slopes[h] = std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(heads));
  }
  return slopes;
}

template <typename T>
std::vector<T> alibi_bias(std::size_t heads, std::size_t len) {
  const auto slopes = alibi_slopes(heads);
  std::vector<T> bias(heads * len * len);
  for (std::size_t h = 0; h < heads; ++h) {
    T* m = bias.data() + h * len * len;
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        const double dist = i > j ? static_cast<double>(i - j) : static_cast<double>(j - i);
        m[i * len + j] = static_cast<T>(-slopes[h] * dist);
      }
    }
  }
  return bias;
}

template <typename T>
std::vector<T> sinusoid_table(std::size_t len, std::size_t width, double base) {
  std::vector<T> table(len * width);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t col = 0; col < width; ++col) {
      const std::size_t pair = col / 2;
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      table[pos * width + col] = static_cast<T>(col % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

template <typename T>
std::vector<T> bezier_basis(std::size_t n_ctrl, std::size_t len) {
  const auto params = splines::uniform_params(len);
  std::vector<T> basis(len * n_ctrl);
  for (std::size_t j = 0; j < len; ++j) {
    const double t = params[j];
    if (n_ctrl == 4) {
      const auto w = splines::cubic_bernstein(t);
      for (std::size_t i = 0; i < 4; ++i) basis[j * 4 + i] = static_cast<T>(w[i]);
      continue;
    }
    const std::size_t deg = n_ctrl - 1;
    double binom = 1.0;
    for (std::size_t i = 0; i <= deg; ++i) {
      basis[j * n_ctrl + i] = static_cast<T>(binom * std::pow(t, static_cast<double>(i)) *
                                             std::pow(1.0 - t, static_cast<double>(deg - i)));
      binom = binom * static_cast<double>(deg - i) / static_cast<double>(i + 1);
    }
  }
  return basis;
}

// --- Autoencoder ----------------------------------------------------------------------

namespace {

template <typename P>
void resize_layout(Weights<P>& w, std::size_t layers) {
  w.encoder.blocks.resize(layers);
  w.decoder.blocks.resize(layers);
}

}  // namespace

template <typename T>
Autoencoder<T>::Autoencoder(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t c = cfg_.width;
  const std::size_t inner = c * cfg_.ffn_factor;
  resize_layout(weights_, cfg_.n_layers);

  auto shape_of = [&](const std::string& name) -> ad::Shape {
    auto ends_with = [&](const char* s) {
      const std::string suffix(s);
      return name.size() >= suffix.size() &&
             name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (name == "enc_in.weight") return {cfg_.data_dim, c};
    if (name == "enc_hidden.weight" || name == "dec_hidden.weight") return {c, c};
    if (name == "dec_out.weight") return {c, cfg_.data_dim};
    if (name == "dec_out.bias") return {cfg_.data_dim};
    if (name == "control_tokens") return {cfg_.n_ctrl, c};
    if (name == "to_latent.weight") return {c, cfg_.latent_dim};
    if (name == "to_latent.bias") return {cfg_.latent_dim};
    if (name == "from_latent.weight") return {cfg_.trajectory_width(), c};
    if (ends_with(".ffn_in")) return {c, inner};
    if (ends_with(".ffn_out")) return {inner, c};
    if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo")) {
      return {c, c};
    }
    return {c};  // norms and remaining biases
  };

  std::mt19937_64 rng(cfg_.seed);
  weights_.for_each([&](const std::string& name, Param& p) {
    p = Param(name, shape_of(name));
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_norm) {
      std::fill(p.value.begin(), p.value.end(), T(1));
    } else if (is_bias) {
      std::fill(p.value.begin(), p.value.end(), T(0));
    } else {
      const double stddev =
          name == "control_tokens" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(p.shape[0]));
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& v : p.value) v = static_cast<T>(dist(rng));
    }
  });
}

template <typename T>
std::vector<ad::Parameter<T>*> Autoencoder<T>::parameters() {
  std::vector<Param*> out;
  weights_.for_each([&](const std::string&, Param& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<const ad::Parameter<T>*> Autoencoder<T>::parameters() const {
  std::vector<const Param*> out;
  const_cast<Weights<Param>&>(weights_).for_each(
      [&](const std::string&, Param& p) { out.push_back(&p); });
  return out;
}

template <typename T>
ad::Parameter<T>* Autoencoder<T>::find(const std::string& name) {
  for (auto* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
std::size_t Autoencoder<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename T>
void Autoencoder<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
Weights<ad::Var<T>> Autoencoder<T>::bind(ad::Tape<T>& tape) {
  Weights<V> bound;
  resize_layout(bound, cfg_.n_layers);
  std::vector<V*> slots;
  bound.for_each([&](const std::string&, V& v) { slots.push_back(&v); });
  std::size_t i = 0;
  weights_.for_each([&](const std::string&, Param& p) { *slots[i++] = tape.param(p); });
  return bound;
}

template <typename T>
Weights<ad::Var<T>> Autoencoder<T>::bind_frozen(ad::Tape<T>& tape) const {
  Weights<V> bound;
  resize_layout(bound, cfg_.n_layers);
  std::vector<V*> slots;
  bound.for_each([&](const std::string&, V& v) { slots.push_back(&v); });
  std::size_t i = 0;
  for (const Param* p : parameters()) *slots[i++] = tape.constant(p->shape, p->value);
  return bound;
}

template <typename T>
ad::Var<T> Autoencoder<T>::linear(V x, const Linear<V>& l) const {
  return ad::add_bias(ad::matmul(x, l.weight), l.bias);
}

template <typename T>
ad::Var<T> Autoencoder<T>::attention(V x, const Block<V>& b, V bias) const {
  const std::size_t h = cfg_.heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg_.width / h));
  V q = ad::split_heads(ad::matmul(x, b.wq), h);
  V k = ad::split_heads(ad::matmul(x, b.wk), h);
  V v = ad::split_heads(ad::matmul(x, b.wv), h);
  return ad::matmul(ad::merge_heads(ad::attention(q, k, v, bias, scale), h), b.wo);
}

template <typename T>
ad::Var<T> Autoencoder<T>::block(V x, const Block<V>& b, V bias) const {
  const T eps = static_cast<T>(cfg_.norm_eps);
  auto ffn = [&](V y) { return ad::matmul(ad::gelu(ad::matmul(y, b.ffn_in)), b.ffn_out); };
  if (cfg_.norm == NormPlacement::pre) {
    x = ad::add(x, attention(ad::rms_norm(x, b.attn_norm, eps), b, bias));
    return ad::add(x, ffn(ad::rms_norm(x, b.ffn_norm, eps)));
  }
  x = ad::rms_norm(ad::add(x, attention(x, b, bias)), b.attn_norm, eps);
  return ad::rms_norm(ad::add(x, ffn(x)), b.ffn_norm, eps);
}

template <typename T>
ad::Var<T> Autoencoder<T>::stack(V x, const Stack<V>& s) const {
  const std::size_t len = x.dim(1);
  V bias = x.tape().constant({cfg_.heads, len, len}, alibi_bias<T>(cfg_.heads, len));
  for (const auto& b : s.blocks) x = block(x, b, bias);
  if (cfg_.norm == NormPlacement::pre) {
    x = ad::rms_norm(x, s.final_norm, static_cast<T>(cfg_.norm_eps));
  }
  return x;
}

template <typename T>
ad::Var<T> Autoencoder<T>::embed_tokens(const Weights<V>& w, V x) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.data_dim) {
    throw std::invalid_argument("encode: expected input [B, L, " +
                                std::to_string(cfg_.data_dim) + "], got " +
                                ad::shape_str(x.shape()));
  }
  return linear(ad::gelu(linear(x, w.enc_in)), w.enc_hidden);
}

template <typename T>
ad::Var<T> Autoencoder<T>::encode(const Weights<V>& w, V x) const {
  V emb = embed_tokens(w, x);
  const std::size_t len = x.dim(1);
  if (len < 1 || len > cfg_.max_len) {
    throw std::invalid_argument("encode: sequence length " + std::to_string(len) +
                                " outside [1, " + std::to_string(cfg_.max_len) + "]");
  }
  V out = stack(ad::prepend_rows(w.control_tokens, emb), w.encoder);
  return linear(ad::slice_rows(out, 0, cfg_.n_ctrl), w.to_latent);
}

template <typename T>
ad::Var<T> Autoencoder<T>::make_trajectory(V latent, std::size_t out_len) const {
  if (latent.rank() != 3 || latent.dim(1) != cfg_.n_ctrl || latent.dim(2) != cfg_.latent_dim) {
    throw std::invalid_argument("make_trajectory: expected latent [B, " +
                                std::to_string(cfg_.n_ctrl) + ", " +
                                std::to_string(cfg_.latent_dim) + "] for " +
                                to_string(cfg_.strategy) + ", got " +
                                ad::shape_str(latent.shape()));
  }
  if (out_len > cfg_.max_len) {
    throw std::invalid_argument("make_trajectory: length " + std::to_string(out_len) +
                                " exceeds max_len " + std::to_string(cfg_.max_len));
  }
  switch (cfg_.strategy) {
    case Strategy::spline: {
      const auto basis = bezier_basis<T>(cfg_.n_ctrl, out_len);
      return ad::mix_rows<T>(basis, out_len, latent);
    }
    case Strategy::alibi: {
      if (out_len < 1) throw std::invalid_argument("make_trajectory: empty output");
      V pe = latent.tape().constant({out_len, cfg_.latent_dim},
                                    sinusoid_table<T>(out_len, cfg_.latent_dim, cfg_.pe_base));
      return ad::add_broadcast(ad::tile_rows(latent, out_len), pe);
    }
    case Strategy::alibi_cat: {
      if (out_len < 1) throw std::invalid_argument("make_trajectory: empty output");
      V pe = latent.tape().constant({out_len, cfg_.latent_dim},
                                    sinusoid_table<T>(out_len, cfg_.latent_dim, cfg_.pe_base));
      return ad::concat_last(ad::tile_rows(latent, out_len), pe);
    }
  }
  throw std::logic_error("make_trajectory: unhandled strategy");
}

template <typename T>
ad::Var<T> Autoencoder<T>::decode(const Weights<V>& w, V trajectory) const {
  if (trajectory.rank() != 3 || trajectory.dim(2) != cfg_.trajectory_width()) {
    throw std::invalid_argument("decode: expected trajectory [B, L, " +
                                std::to_string(cfg_.trajectory_width()) + "], got " +
                                ad::shape_str(trajectory.shape()));
  }
  V h = stack(linear(trajectory, w.from_latent), w.decoder);
  return linear(ad::gelu(linear(h, w.dec_hidden)), w.dec_out);
}

template <typename T>
typename Autoencoder<T>::Forward Autoencoder<T>::forward(const Weights<V>& w, V x,
                                                         std::size_t out_len) const {
  Forward f;
  f.latent = encode(w, x);
  f.trajectory = make_trajectory(f.latent, out_len);
  f.recon = decode(w, f.trajectory);
  return f;
}

// --- plain-data helpers ---------------------------------------------------------------

template <typename T>
Inference<T> run_forward(const Autoencoder<T>& model, std::span<const T> x, std::size_t batch,
                         std::size_t len, std::size_t out_len) {
  const auto& cfg = model.config();
  if (x.size() != batch * len * cfg.data_dim) {
    throw std::invalid_argument("run_forward: input size does not match batch x len x data_dim");
  }
  ad::Tape<T> tape;
  auto w = model.bind_frozen(tape);
  auto in = tape.constant({batch, len, cfg.data_dim}, std::vector<T>(x.begin(), x.end()));
  auto f = model.forward(w, in, out_len);
  return {batch, out_len, f.recon.value(), f.latent.value(), f.trajectory.value()};
}

template <typename T>
std::vector<T> run_encode(const Autoencoder<T>& model, std::span<const T> x, std::size_t batch,
                          std::size_t len) {
  const auto& cfg = model.config();
  if (x.size() != batch * len * cfg.data_dim) {
    throw std::invalid_argument("run_encode: input size does not match batch x len x data_dim");
  }
  ad::Tape<T> tape;
  auto w = model.bind_frozen(tape);
  auto in = tape.constant({batch, len, cfg.data_dim}, std::vector<T>(x.begin(), x.end()));
  return model.encode(w, in).value();
}

template <typename T>
Inference<T> run_decode(const Autoencoder<T>& model, std::span<const T> latent,
                        std::size_t batch, std::size_t out_len) {
  const auto& cfg = model.config();
  if (latent.size() != batch * cfg.n_ctrl * cfg.latent_dim) {
    throw std::invalid_argument("run_decode: latent size does not match batch x n_ctrl x d");
  }
  ad::Tape<T> tape;
  auto w = model.bind_frozen(tape);
  auto lat = tape.constant({batch, cfg.n_ctrl, cfg.latent_dim},
                           std::vector<T>(latent.begin(), latent.end()));
  auto traj = model.make_trajectory(lat, out_len);
  auto recon = model.decode(w, traj);
  return {batch, out_len, recon.value(), lat.value(), traj.value()};
}

template <typename To, typename From>
void copy_weights(const Autoencoder<From>& src, Autoencoder<To>& dst) {
  auto s = src.parameters();
  auto d = dst.parameters();
  if (s.size() != d.size()) throw std::invalid_argument("copy_weights: layout mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i]->shape != d[i]->shape || s[i]->name != d[i]->name) {
      throw std::invalid_argument("copy_weights: mismatch at " + s[i]->name);
    }
    for (std::size_t j = 0; j < s[i]->value.size(); ++j) {
      d[i]->value[j] = static_cast<To>(s[i]->value[j]);
    }
  }
}

#define SBT_INSTANTIATE_NET(T)                                                              \
  template class Autoencoder<T>;                                                            \
  template std::vector<T> alibi_bias<T>(std::size_t, std::size_t);                          \
  template std::vector<T> sinusoid_table<T>(std::size_t, std::size_t, double);              \
  template std::vector<T> bezier_basis<T>(std::size_t, std::size_t);                        \
  template Inference<T> run_forward(const Autoencoder<T>&, std::span<const T>, std::size_t, \
                                    std::size_t, std::size_t);                              \
  template std::vector<T> run_encode(const Autoencoder<T>&, std::span<const T>,             \
                                     std::size_t, std::size_t);                             \
  template Inference<T> run_decode(const Autoencoder<T>&, std::span<const T>, std::size_t,  \
                                   std::size_t);

SBT_INSTANTIATE_NET(float)
SBT_INSTANTIATE_NET(double)

template void copy_weights(const Autoencoder<float>&, Autoencoder<double>&);
template void copy_weights(const Autoencoder<double>&, Autoencoder<float>&);
template void copy_weights(const Autoencoder<float>&, Autoencoder<float>&);
template void copy_weights(const Autoencoder<double>&, Autoencoder<double>&);

}  // namespace sbt
