// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-based reverse-mode differentiation over dense row-major
// tensors. A Tape records every operation in execution order, so replaying it
// backwards visits each node exactly once after all of its consumers.
//
// Shapes must match exactly except where an op documents a leading-axis
// broadcast. Instantiated for float (training and inference) and double
// (gradient checks).

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sbt::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Trainable tensor that outlives any single tape. `grad` is empty until a
/// backward pass reaches the parameter, and accumulates across passes.
template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string name_, Shape shape_)
      : name(std::move(name_)), shape(std::move(shape_)), value(numel(shape)) {}

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.clear(); }
  std::size_t size() const { return value.size(); }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
/// References returned by value() and grad() are invalidated when another
/// node is recorded on the same tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
  const std::vector<T>& value() const;
  /// Gradient after backward(); empty when the node was not reached.
  const std::vector<T>& grad() const;
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Shape shape, std::vector<T> value);
  Var<T> leaf(Shape shape, std::vector<T> value, bool requires_grad = true);
  /// Records a parameter. Backward adds this node's gradient into param.grad.
  Var<T> param(Parameter<T>& p);

  /// Records an op result. `backward` runs only if the node needs a gradient.
  Var<T> record(Shape shape, std::vector<T> value, std::vector<std::size_t> inputs,
                BackwardFn backward);

  /// Reverse sweep from a scalar node. Intermediate gradients are reset on
  /// every call; leaf and parameter gradients accumulate.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  const std::vector<T>& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Mutable gradient buffer of an input, zero-initialised on first use.
  /// Returns an empty span when the input does not require a gradient.
  std::span<T> grad_for(std::size_t id);

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// --- operations --------------------------------------------------------------

/// a[..., m, k] x b[k, n] -> [..., m, n]. Leading axes of `a` fold into rows.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// Batched product over shared leading axes: alpha * a[..., m, k] x op(b),
/// where op(b) is b[..., k, n] or, with transpose_b, b[..., n, k] transposed.
template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b, T alpha = T(1));

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// x[..., n] + bias[n]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias);

/// x[..., r, c] + y[r, c], y broadcast over the leading axes of x.
template <typename T>
Var<T> add_broadcast(Var<T> x, Var<T> y);

template <typename T>
Var<T> scale(Var<T> x, T factor);

/// Row-wise softmax of scores[..., L, L] + bias[..., L, L]; the bias' leading
/// axes must equal the trailing leading axes of scores and it is broadcast
/// over the rest. Rows are stabilised by max subtraction.
template <typename T>
Var<T> softmax_with_bias(Var<T> scores, Var<T> bias);

/// softmax(scale * q k^T + bias) v for q, k, v [..., L, dh]. The bias follows
/// the softmax_with_bias broadcast rule. Each [L, L] probability block is
/// built and consumed while cache-resident; probabilities are kept for the
/// backward pass only when some input requires a gradient.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, Var<T> bias, T scale);

/// Exact (erf) GeLU.
template <typename T>
Var<T> gelu(Var<T> x);

/// x / sqrt(mean(x^2) + eps) * gain over the last axis. No centring, no bias.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps);

/// Mean of squared differences; scalar (shape {1}).
template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> target);

template <typename T>
Var<T> sum(Var<T> x);

/// [B, L, h*dh] -> [B, h, L, dh]
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads);

/// [B, h, L, dh] -> [B, L, h*dh]
template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads);

/// tokens[n, c] placed before x[B, L, c] in every batch element -> [B, n+L, c].
template <typename T>
Var<T> prepend_rows(Var<T> tokens, Var<T> x);

/// x[B, N, c] -> x[B, start:start+count, c]
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count);

/// Fixed linear recombination of rows: weights[R, n] x x[B, n, c] -> [B, R, c].
/// `weights` is a constant row-major matrix.
template <typename T>
Var<T> mix_rows(std::span<const T> weights, std::size_t out_rows, Var<T> x);

/// x[B, 1, c] repeated along axis 1 -> [B, count, c].
template <typename T>
Var<T> tile_rows(Var<T> x, std::size_t count);

/// Concatenates along the last axis. `b` may omit leading axes of `a`, in
/// which case it is broadcast over them.
template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b);

}  // namespace sbt::ad
