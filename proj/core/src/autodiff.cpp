// SPDX-License-Identifier: Apache-2.0

#include "sbt/autodiff.hpp"

// Small products otherwise take a coefficient-wise path whose vectorisation
// depends on the destination address; the blocked kernels do not.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <unsupported/Eigen/SpecialFunctions>

namespace sbt::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;

// Vectorised transcendental functions and reductions peel an unaligned head
// with scalar code, so their results would depend on where a buffer happens
// to live. Element-wise kernels therefore run on aligned staging chunks.
constexpr Eigen::Index kStage = 1024;

template <typename T, typename F>
void staged_unary(const T* in, T* out, std::size_t count, F f) {
  Arr<T> xb(kStage), ob(kStage);
  for (std::size_t first = 0; first < count; first += kStage) {
    const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(kStage, count - first));
    xb.head(n) = Eigen::Map<const Arr<T>>(in + first, n);
    ob.head(n) = f(xb.head(n));
    Eigen::Map<Arr<T>>(out + first, n) = ob.head(n);
  }
}

template <typename T, typename F>
void staged_binary_add(const T* a, const T* b, T* acc, std::size_t count, F f) {
  Arr<T> ab(kStage), bb(kStage), ob(kStage);
  for (std::size_t first = 0; first < count; first += kStage) {
    const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(kStage, count - first));
    ab.head(n) = Eigen::Map<const Arr<T>>(a + first, n);
    bb.head(n) = Eigen::Map<const Arr<T>>(b + first, n);
    ob.head(n) = f(ab.head(n), bb.head(n));
    Eigen::Map<Arr<T>>(acc + first, n) += ob.head(n);
  }
}

// In-place stabilised softmax of an aligned row.
template <typename Row>
void softmax_row(Row&& row) {
  row = (row - row.maxCoeff()).exp();
  row *= typename std::decay_t<Row>::Scalar(1) / row.sum();
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

bool is_suffix(const Shape& suffix, const Shape& full) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) shape_error(op, "operands live on different tapes");
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// --- Var / Tape ----------------------------------------------------------------

template <typename T>
const Shape& Var<T>::shape() const {
  return tape_->shape(id_);
}
template <typename T>
const std::vector<T>& Var<T>::value() const {
  return tape_->value(id_);
}
template <typename T>
const std::vector<T>& Var<T>::grad() const {
  return tape_->grad(id_);
}
template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, std::vector<T> value) {
  return leaf(std::move(shape), std::move(value), false);
}

template <typename T>
Var<T> Tape<T>::leaf(Shape shape, std::vector<T> value, bool requires_grad) {
  if (shape.empty() || numel(shape) != value.size()) {
    shape_error("leaf", "shape " + shape_str(shape) + " does not match " +
                            std::to_string(value.size()) + " values");
  }
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  auto v = leaf(p.shape, p.value, true);
  nodes_.back().param = &p;
  return v;
}

template <typename T>
Var<T> Tape<T>::record(Shape shape, std::vector<T> value, std::vector<std::size_t> inputs,
                       BackwardFn backward) {
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(value);
  node.is_leaf = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) shape_error("record", "input recorded after its consumer");
    node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::span<T> Tape<T>::grad_for(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) shape_error("backward", "loss belongs to another tape");
  if (numel(loss.shape()) != 1) {
    shape_error("backward", "loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  for (Node& node : nodes_) {
    if (!node.is_leaf || node.param != nullptr) node.grad.clear();
  }
  auto seed = grad_for(loss.id());
  if (seed.empty()) return;
  seed[0] += T(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.backward && !node.grad.empty()) node.backward(*this, id);
  }
  for (Node& node : nodes_) {
    if (node.param == nullptr || node.grad.empty()) continue;
    auto& dst = node.param->grad;
    if (dst.empty()) dst.assign(node.grad.size(), T(0));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    node.grad.clear();
  }
}

// --- linear algebra -------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() != 2 || as.back() != bs[0]) {
    shape_error("matmul", "incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t k = bs[0], n = bs[1];
  const std::size_t m = numel(as) / k;
  Shape out_shape = as;
  out_shape.back() = n;
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.value().data(), m, k) * ConstMap<T>(b.value().data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out_shape), std::move(out), {ia, ib},
                         [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
                           ConstMap<T> g(t.grad(self).data(), m, n);
                           if (auto ga = t.grad_for(ia); !ga.empty()) {
                             MutMap<T>(ga.data(), m, k).noalias() +=
                                 g * ConstMap<T>(t.value(ib).data(), k, n).transpose();
                           }
                           if (auto gb = t.grad_for(ib); !gb.empty()) {
                             MutMap<T>(gb.data(), k, n).noalias() +=
                                 ConstMap<T>(t.value(ia).data(), m, k).transpose() * g;
                           }
                         });
}

template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b, T alpha) {
  check_same_tape(a, b, "batched_matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t r = as.size();
  if (r < 3 || bs.size() != r || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    shape_error("batched_matmul", "need [..., m, k] and [..., ., .] with equal batch axes, got " +
                                      shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[r - 2], k = as[r - 1];
  const std::size_t batch = numel(as) / (m * k);
  const std::size_t n = transpose_b ? bs[r - 2] : bs[r - 1];
  if ((transpose_b ? bs[r - 1] : bs[r - 2]) != k) {
    shape_error("batched_matmul", "inner dimensions differ: " + shape_str(as) + " and " +
                                      shape_str(bs) + (transpose_b ? " (transposed)" : ""));
  }
  std::vector<T> out(batch * m * n);
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap<T> am(av + i * m * k, m, k);
    MutMap<T> om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = alpha * (am * ConstMap<T>(bv + i * n * k, n, k).transpose());
    } else {
      om.noalias() = alpha * (am * ConstMap<T>(bv + i * k * n, k, n));
    }
  }
  Shape out_shape = as;
  out_shape[r - 1] = n;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out_shape), std::move(out), {ia, ib},
      [=](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        const T* av = t.value(ia).data();
        const T* bv = t.value(ib).data();
        auto ga = t.grad_for(ia);
        auto gb = t.grad_for(ib);
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMap<T> gm(g + i * m * n, m, n);
          ConstMap<T> am(av + i * m * k, m, k);
          if (transpose_b) {
            ConstMap<T> bm(bv + i * n * k, n, k);
            if (!ga.empty()) MutMap<T>(ga.data() + i * m * k, m, k).noalias() += alpha * (gm * bm);
            if (!gb.empty()) {
              MutMap<T>(gb.data() + i * n * k, n, k).noalias() += alpha * (gm.transpose() * am);
            }
          } else {
            ConstMap<T> bm(bv + i * k * n, k, n);
            if (!ga.empty()) {
              MutMap<T>(ga.data() + i * m * k, m, k).noalias() += alpha * (gm * bm.transpose());
            }
            if (!gb.empty()) {
              MutMap<T>(gb.data() + i * k * n, k, n).noalias() += alpha * (am.transpose() * gm);
            }
          }
        }
      });
}

// --- elementwise ------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    shape_error("add", "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {ia, ib},
                         [ia, ib](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           for (auto id : {ia, ib}) {
                             auto gi = t.grad_for(id);
                             for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
                           }
                         });
}

namespace {

// x + y where y's shape is a suffix of x's shape.
template <typename T>
Var<T> add_suffix(Var<T> x, Var<T> y, const char* op) {
  check_same_tape(x, y, op);
  if (!is_suffix(y.shape(), x.shape())) {
    shape_error(op, "cannot broadcast " + shape_str(y.shape()) + " onto " + shape_str(x.shape()));
  }
  const std::size_t period = y.value().size();
  std::vector<T> out(x.value());
  const auto& yv = y.value();
  for (std::size_t i = 0; i < out.size(); i += period) {
    for (std::size_t j = 0; j < period; ++j) out[i + j] += yv[j];
  }
  const std::size_t ix = x.id(), iy = y.id();
  return x.tape().record(x.shape(), std::move(out), {ix, iy},
                         [ix, iy, period](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           if (auto gx = t.grad_for(ix); !gx.empty()) {
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                           }
                           if (auto gy = t.grad_for(iy); !gy.empty()) {
                             for (std::size_t i = 0; i < g.size(); i += period) {
                               for (std::size_t j = 0; j < period; ++j) gy[j] += g[i + j];
                             }
                           }
                         });
}

}  // namespace

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  if (bias.rank() != 1) shape_error("add_bias", "bias must be rank 1");
  return add_suffix(x, bias, "add_bias");
}

template <typename T>
Var<T> add_broadcast(Var<T> x, Var<T> y) {
  return add_suffix(x, y, "add_broadcast");
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  std::vector<T> out(x.value());
  for (auto& v : out) v *= factor;
  const std::size_t ix = x.id();
  return x.tape().record(x.shape(), std::move(out), {ix},
                         [ix, factor](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
                         });
}

template <typename T>
Var<T> softmax_with_bias(Var<T> scores, Var<T> bias) {
  check_same_tape(scores, bias, "softmax_with_bias");
  const Shape& ss = scores.shape();
  const Shape& bs = bias.shape();
  if (ss.size() < 2 || ss[ss.size() - 1] != ss[ss.size() - 2]) {
    shape_error("softmax_with_bias", "scores must end in a square [L, L], got " + shape_str(ss));
  }
  if (bs.size() < 2 || !is_suffix(bs, ss)) {
    shape_error("softmax_with_bias",
                "bias " + shape_str(bs) + " not broadcastable onto " + shape_str(ss));
  }
  const std::size_t len = ss.back();
  const std::size_t row_count = numel(ss) / len;
  const std::size_t bias_rows = numel(bs) / len;
  std::vector<T> out(numel(ss));
  const T* sv = scores.value().data();
  const T* bv = bias.value().data();
  const auto n = static_cast<Eigen::Index>(len);
  Arr<T> row(n);
  for (std::size_t r = 0; r < row_count; ++r) {
    row = Eigen::Map<const Arr<T>>(sv + r * len, n) +
          Eigen::Map<const Arr<T>>(bv + (r % bias_rows) * len, n);
    softmax_row(row);
    ArrayMap<T>(out.data() + r * len, n) = row;
  }
  const std::size_t is = scores.id(), ib = bias.id();
  return scores.tape().record(
      ss, std::move(out), {is, ib},
      [is, ib, len, row_count, bias_rows](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        const T* p = t.value(self).data();
        auto gs = t.grad_for(is);
        auto gb = t.grad_for(ib);
        std::vector<T> tmp(len);
        for (std::size_t r = 0; r < row_count; ++r) {
          const T* gr = g + r * len;
          const T* pr = p + r * len;
          T dot = T(0);
          for (std::size_t j = 0; j < len; ++j) dot += gr[j] * pr[j];
          for (std::size_t j = 0; j < len; ++j) tmp[j] = pr[j] * (gr[j] - dot);
          if (!gs.empty()) {
            T* dst = gs.data() + r * len;
            for (std::size_t j = 0; j < len; ++j) dst[j] += tmp[j];
          }
          if (!gb.empty()) {
            T* dst = gb.data() + (r % bias_rows) * len;
            for (std::size_t j = 0; j < len; ++j) dst[j] += tmp[j];
          }
        }
      });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, Var<T> bias, T scale) {
  check_same_tape(q, k, "attention");
  check_same_tape(q, v, "attention");
  check_same_tape(q, bias, "attention");
  const Shape& qs = q.shape();
  if (qs.size() < 3 || k.shape() != qs || v.shape() != qs) {
    shape_error("attention", "q, k, v must share a shape [..., L, dh], got " + shape_str(qs) +
                                 ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t len = qs[qs.size() - 2], dh = qs.back();
  const std::size_t groups = numel(qs) / (len * dh);
  Shape score_shape(qs.begin(), qs.end() - 1);
  score_shape.push_back(len);
  const Shape& bs = bias.shape();
  if (bs.size() < 2 || !is_suffix(bs, score_shape)) {
    shape_error("attention", "bias " + shape_str(bs) + " not broadcastable onto scores " +
                                 shape_str(score_shape));
  }
  const std::size_t bias_groups = numel(bs) / (len * len);
  const bool keep = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                    bias.requires_grad();
  auto probs = keep ? std::make_shared<std::vector<RowMat<T>>>(groups) : nullptr;

  const T* qv = q.value().data();
  const T* kv = k.value().data();
  const T* vv = v.value().data();
  const T* bv = bias.value().data();
  std::vector<T> out(groups * len * dh);
  T* ov = out.data();

  const auto n = static_cast<Eigen::Index>(len), e = static_cast<Eigen::Index>(dh);

  for (std::size_t g = 0; g < groups; ++g) {
    RowMat<T> scratch;
    RowMat<T>& p = keep ? (*probs)[g] : scratch;
    ConstMap<T> qg(qv + g * len * dh, n, e), kg(kv + g * len * dh, n, e);
    ConstMap<T> vg(vv + g * len * dh, n, e), bg(bv + (g % bias_groups) * len * len, n, n);
    p = bg;
    p.noalias() += scale * qg * kg.transpose();
    for (Eigen::Index i = 0; i < n; ++i) softmax_row(p.row(i).array());
    MutMap<T>(ov + g * len * dh, n, e).noalias() = p * vg;
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id(), ib = bias.id();
  return q.tape().record(
      qs, std::move(out), {iq, ik, iv, ib},
      [=](Tape<T>& t, std::size_t self) {
        const T* go = t.grad(self).data();
        const T* qv = t.value(iq).data();
        const T* kv = t.value(ik).data();
        const T* vv = t.value(iv).data();
        auto gq = t.grad_for(iq);
        auto gk = t.grad_for(ik);
        auto gv = t.grad_for(iv);
        auto gb = t.grad_for(ib);
        const bool need_ds = !gq.empty() || !gk.empty() || !gb.empty();
        for (std::size_t g = 0; g < groups; ++g) {
          const RowMat<T>& p = (*probs)[g];
          ConstMap<T> dout(go + g * len * dh, n, e);
          if (!gv.empty()) MutMap<T>(gv.data() + g * len * dh, n, e).noalias() += p.transpose() * dout;
          if (!need_ds) continue;
          ConstMap<T> vg(vv + g * len * dh, n, e);
          RowMat<T> ds(n, n);
          ds.noalias() = dout * vg.transpose();
          for (Eigen::Index i = 0; i < n; ++i) {
            const T dot = ds.row(i).dot(p.row(i));
            ds.row(i).array() = p.row(i).array() * (ds.row(i).array() - dot);
          }
          if (!gb.empty()) MutMap<T>(gb.data() + (g % bias_groups) * len * len, n, n) += ds;
          if (!gq.empty()) {
            ConstMap<T> kg(kv + g * len * dh, n, e);
            MutMap<T>(gq.data() + g * len * dh, n, e).noalias() += scale * (ds * kg);
          }
          if (!gk.empty()) {
            ConstMap<T> qg(qv + g * len * dh, n, e);
            MutMap<T>(gk.data() + g * len * dh, n, e).noalias() += scale * (ds.transpose() * qg);
          }
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const auto& xv = x.value();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(xv.size());
  staged_unary(xv.data(), out.data(), xv.size(), [inv_sqrt2](const auto& xa) {
    return T(0.5) * xa * (T(1) + (xa * inv_sqrt2).erf());
  });
  const std::size_t ix = x.id();
  return x.tape().record(x.shape(), std::move(out), {ix},
                         [ix, inv_sqrt2](Tape<T>& t, std::size_t self) {
                           const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                           const auto& xv = t.value(ix);
                           auto gx = t.grad_for(ix);
                           staged_binary_add(
                               xv.data(), t.grad(self).data(), gx.data(), xv.size(),
                               [&](const auto& xa, const auto& ga) {
                                 const Arr<T> cdf = T(0.5) * (T(1) + (xa * inv_sqrt2).erf());
                                 const Arr<T> pdf = inv_sqrt_2pi * (T(-0.5) * xa.square()).exp();
                                 return Arr<T>(ga * (cdf + xa * pdf));
                               });
                         });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
  check_same_tape(x, gain, "rms_norm");
  const std::size_t c = x.shape().back();
  if (gain.shape() != Shape{c}) {
    shape_error("rms_norm", "gain " + shape_str(gain.shape()) + " does not match width " +
                                std::to_string(c));
  }
  const std::size_t rows = x.value().size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  std::vector<T> out(xv.size());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T ms = T(0);
    for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(ms + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xr[j] * inv * gv[j];
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return x.tape().record(
      x.shape(), std::move(out), {ix, ig},
      [ix, ig, c, rows, inv_rms = std::move(inv_rms)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xv = t.value(ix);
        const auto& gv = t.value(ig);
        auto gx = t.grad_for(ix);
        auto gg = t.grad_for(ig);
        for (std::size_t r = 0; r < rows; ++r) {
          const T inv = inv_rms[r];
          const T* xr = xv.data() + r * c;
          const T* gr = g.data() + r * c;
          if (!gg.empty()) {
            for (std::size_t j = 0; j < c; ++j) gg[j] += gr[j] * xr[j] * inv;
          }
          if (!gx.empty()) {
            // d/dx of x*inv: inv * (dxhat - xhat * mean(dxhat * xhat))
            T dot = T(0);
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * gv[j] * xr[j] * inv;
            dot /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              gx[r * c + j] += inv * (gr[j] * gv[j] - xr[j] * inv * dot);
            }
          }
        }
      });
}

template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
  check_same_tape(pred, target, "mse_loss");
  if (pred.shape() != target.shape()) {
    shape_error("mse_loss", "shapes differ: " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  const auto& pv = pred.value();
  const auto& tv = target.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double diff = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
    acc += diff * diff;
  }
  const auto count = static_cast<T>(pv.size());
  std::vector<T> out{static_cast<T>(acc / static_cast<double>(pv.size()))};
  const std::size_t ip = pred.id(), it = target.id();
  return pred.tape().record({1}, std::move(out), {ip, it},
                            [ip, it, count](Tape<T>& t, std::size_t self) {
                              const T g = t.grad(self)[0] * T(2) / count;
                              const auto& pv = t.value(ip);
                              const auto& tv = t.value(it);
                              if (auto gp = t.grad_for(ip); !gp.empty()) {
                                for (std::size_t i = 0; i < gp.size(); ++i) {
                                  gp[i] += g * (pv[i] - tv[i]);
                                }
                              }
                              if (auto gt = t.grad_for(it); !gt.empty()) {
                                for (std::size_t i = 0; i < gt.size(); ++i) {
                                  gt[i] -= g * (pv[i] - tv[i]);
                                }
                              }
                            });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc = T(0);
  for (T v : x.value()) acc += v;
  const std::size_t ix = x.id();
  return x.tape().record({1}, {acc}, {ix}, [ix](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad_for(ix)) v += g;
  });
}

// --- layout -----------------------------------------------------------------------

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads != 0) {
    shape_error("split_heads", "cannot split " + shape_str(s) + " into " +
                                   std::to_string(heads) + " heads");
  }
  const std::size_t batch = s[0], len = s[1], width = s[2], dh = width / heads;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + (b * len + l) * width + h * dh, dh,
                    out.data() + ((b * heads + h) * len + l) * dh);
  const std::size_t ix = x.id();
  return x.tape().record({batch, heads, len, dh}, std::move(out), {ix},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t l = 0; l < len; ++l)
                               for (std::size_t h = 0; h < heads; ++h) {
                                 const T* src = g.data() + ((b * heads + h) * len + l) * dh;
                                 T* dst = gx.data() + (b * len + l) * width + h * dh;
                                 for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
                               }
                         });
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != heads) {
    shape_error("merge_heads", "cannot merge " + shape_str(s) + " over " +
                                   std::to_string(heads) + " heads");
  }
  const std::size_t batch = s[0], len = s[2], dh = s[3], width = dh * heads;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xv.data() + ((b * heads + h) * len + l) * dh, dh,
                    out.data() + (b * len + l) * width + h * dh);
  const std::size_t ix = x.id();
  return x.tape().record({batch, len, width}, std::move(out), {ix},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t h = 0; h < heads; ++h)
                               for (std::size_t l = 0; l < len; ++l) {
                                 const T* src = g.data() + (b * len + l) * width + h * dh;
                                 T* dst = gx.data() + ((b * heads + h) * len + l) * dh;
                                 for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
                               }
                         });
}

template <typename T>
Var<T> prepend_rows(Var<T> tokens, Var<T> x) {
  check_same_tape(tokens, x, "prepend_rows");
  const Shape& ts = tokens.shape();
  const Shape& xs = x.shape();
  if (ts.size() != 2 || xs.size() != 3 || ts[1] != xs[2]) {
    shape_error("prepend_rows", "need tokens [n, c] and x [B, L, c], got " + shape_str(ts) +
                                    " and " + shape_str(xs));
  }
  const std::size_t n = ts[0], batch = xs[0], len = xs[1], c = xs[2];
  const std::size_t stride = (n + len) * c;
  std::vector<T> out(batch * stride);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(tokens.value().data(), n * c, out.data() + b * stride);
    std::copy_n(x.value().data() + b * len * c, len * c, out.data() + b * stride + n * c);
  }
  const std::size_t it = tokens.id(), ix = x.id();
  return x.tape().record({batch, n + len, c}, std::move(out), {it, ix},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gt = t.grad_for(it);
                           auto gx = t.grad_for(ix);
                           for (std::size_t b = 0; b < batch; ++b) {
                             const T* src = g.data() + b * stride;
                             if (!gt.empty())
                               for (std::size_t i = 0; i < n * c; ++i) gt[i] += src[i];
                             if (!gx.empty()) {
                               T* dst = gx.data() + b * len * c;
                               for (std::size_t i = 0; i < len * c; ++i) dst[i] += src[n * c + i];
                             }
                           }
                         });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  if (s.size() != 3 || count == 0 || start + count > s[1]) {
    shape_error("slice_rows", "rows [" + std::to_string(start) + ", " +
                                  std::to_string(start + count) + ") out of " + shape_str(s));
  }
  const std::size_t batch = s[0], len = s[1], c = s[2];
  std::vector<T> out(batch * count * c);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(x.value().data() + (b * len + start) * c, count * c,
                out.data() + b * count * c);
  }
  const std::size_t ix = x.id();
  return x.tape().record({batch, count, c}, std::move(out), {ix},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           for (std::size_t b = 0; b < batch; ++b) {
                             const T* src = g.data() + b * count * c;
                             T* dst = gx.data() + (b * len + start) * c;
                             for (std::size_t i = 0; i < count * c; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
Var<T> mix_rows(std::span<const T> weights, std::size_t out_rows, Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || weights.size() != out_rows * s[1]) {
    shape_error("mix_rows", std::to_string(weights.size()) + " weights cannot mix " +
                                shape_str(s) + " into " + std::to_string(out_rows) + " rows");
  }
  const std::size_t batch = s[0], n = s[1], c = s[2];
  std::vector<T> w(weights.begin(), weights.end());
  std::vector<T> out(batch * out_rows * c);
  ConstMap<T> wm(w.data(), out_rows, n);
  for (std::size_t b = 0; b < batch; ++b) {
    MutMap<T>(out.data() + b * out_rows * c, out_rows, c).noalias() =
        wm * ConstMap<T>(x.value().data() + b * n * c, n, c);
  }
  const std::size_t ix = x.id();
  return x.tape().record({batch, out_rows, c}, std::move(out), {ix},
                         [=, w = std::move(w)](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           ConstMap<T> wm(w.data(), out_rows, n);
                           for (std::size_t b = 0; b < batch; ++b) {
                             MutMap<T>(gx.data() + b * n * c, n, c).noalias() +=
                                 wm.transpose() *
                                 ConstMap<T>(g.data() + b * out_rows * c, out_rows, c);
                           }
                         });
}

template <typename T>
Var<T> tile_rows(Var<T> x, std::size_t count) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != 1 || count == 0) {
    shape_error("tile_rows", "need x [B, 1, c], got " + shape_str(s));
  }
  const std::size_t batch = s[0], c = s[2];
  std::vector<T> out(batch * count * c);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < count; ++r)
      std::copy_n(x.value().data() + b * c, c, out.data() + (b * count + r) * c);
  const std::size_t ix = x.id();
  return x.tape().record({batch, count, c}, std::move(out), {ix},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto gx = t.grad_for(ix);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t r = 0; r < count; ++r)
                               for (std::size_t j = 0; j < c; ++j)
                                 gx[b * c + j] += g[(b * count + r) * c + j];
                         });
}

template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "concat_last");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  Shape a_lead(as.begin(), as.end() - 1);
  Shape b_lead(bs.begin(), bs.end() - 1);
  if (bs.empty() || !is_suffix(b_lead, a_lead)) {
    shape_error("concat_last", "cannot concatenate " + shape_str(bs) + " onto " + shape_str(as));
  }
  const std::size_t p = as.back(), q = bs.back();
  const std::size_t rows = numel(as) / p;
  const std::size_t b_rows = numel(bs) / q;
  std::vector<T> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.value().data() + (r % b_rows) * q, q, out.data() + r * (p + q) + p);
  }
  Shape out_shape = as;
  out_shape.back() = p + q;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out_shape), std::move(out), {ia, ib},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto ga = t.grad_for(ia);
                           auto gb = t.grad_for(ib);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* src = g.data() + r * (p + q);
                             if (!ga.empty())
                               for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += src[j];
                             if (!gb.empty())
                               for (std::size_t j = 0; j < q; ++j)
                                 gb[(r % b_rows) * q + j] += src[p + j];
                           }
                         });
}

// --- instantiation ------------------------------------------------------------------

#define SBT_INSTANTIATE_AD(T)                                                      \
  template struct Parameter<T>;                                                    \
  template class Var<T>;                                                           \
  template class Tape<T>;                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                          \
  template Var<T> batched_matmul(Var<T>, Var<T>, bool, T);                         \
  template Var<T> add(Var<T>, Var<T>);                                             \
  template Var<T> add_bias(Var<T>, Var<T>);                                        \
  template Var<T> add_broadcast(Var<T>, Var<T>);                                   \
  template Var<T> scale(Var<T>, T);                                                \
  template Var<T> softmax_with_bias(Var<T>, Var<T>);                               \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, Var<T>, T);                   \
  template Var<T> gelu(Var<T>);                                                    \
  template Var<T> rms_norm(Var<T>, Var<T>, T);                                     \
  template Var<T> mse_loss(Var<T>, Var<T>);                                        \
  template Var<T> sum(Var<T>);                                                     \
  template Var<T> split_heads(Var<T>, std::size_t);                                \
  template Var<T> merge_heads(Var<T>, std::size_t);                                \
  template Var<T> prepend_rows(Var<T>, Var<T>);                                    \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                    \
  template Var<T> mix_rows(std::span<const T>, std::size_t, Var<T>);               \
  template Var<T> tile_rows(Var<T>, std::size_t);                                  \
  template Var<T> concat_last(Var<T>, Var<T>);

SBT_INSTANTIATE_AD(float)
SBT_INSTANTIATE_AD(double)

#undef SBT_INSTANTIATE_AD

}  // namespace sbt::ad
