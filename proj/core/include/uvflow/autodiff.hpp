#pragma once

// Minimal tape-based reverse-mode automatic differentiation over Tensor.
//
// A Tape records every op applied to Vars created from it. backward() walks
// the recorded nodes in reverse creation order, so any program that only
// composes the ops below is differentiable without extra bookkeeping.

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "uvflow/tensor.hpp"

namespace uvflow::ad {

/// A trainable tensor. grad accumulates across backward passes until zeroed.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = BasicTensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

template <typename T>
class BasicTape;

/// Handle to a node on a Tape. Cheap to copy.
template <typename T>
class BasicVar {
 public:
  using Tensor = BasicTensor<T>;
  using Tape = BasicTape<T>;

  BasicVar() = default;
  BasicVar(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  /// Gradient of the last backward() root w.r.t. this node (zeros if unreached).
  Tensor grad() const;
  const std::vector<int>& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  bool needs_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using Var = BasicVar<T>;
  using Parameter = BasicParameter<T>;

  /// With record == false no backward closures are kept (inference mode).
  explicit BasicTape(bool record = true) : record_(record) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf; read its gradient with Var::grad() after backward().
  Var input(Tensor value);
  /// Leaf bound to a Parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  /// Reverse sweep from a single-element root, seeded with d(root) = 1.
  void backward(const Var& root);

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Op-author interface.
  Var make(Tensor value, std::initializer_list<Var> parents);
  void set_backward(const Var& v, std::function<void()> fn);
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const Tensor& grad(int id);
  Tensor& grad_mut(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };
  std::deque<Node> nodes_;
  bool record_;
};

template <typename T>
const BasicTensor<T>& BasicVar<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
BasicTensor<T> BasicVar<T>::grad() const {
  if (tape_->has_grad(id_)) return tape_->grad(id_);
  return Tensor(value().shape());
}

template <typename T>
bool BasicVar<T>::needs_grad() const {
  return tape_->needs_grad(id_);
}

using Parameter = BasicParameter<double>;
using Var = BasicVar<double>;
using Tape = BasicTape<double>;
using ParameterF = BasicParameter<float>;
using VarF = BasicVar<float>;
using TapeF = BasicTape<float>;

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> scale(BasicVar<T> a, double s);
/// s * a + c, elementwise.
template <typename T>
BasicVar<T> affine(BasicVar<T> a, double s, double c);
template <typename T>
BasicVar<T> tanh(BasicVar<T> a);
template <typename T>
BasicVar<T> relu(BasicVar<T> a);
template <typename T>
BasicVar<T> leaky_relu(BasicVar<T> a, double slope);
template <typename T>
BasicVar<T> gelu(BasicVar<T> a);
template <typename T>
BasicVar<T> silu(BasicVar<T> a);
template <typename T>
BasicVar<T> reshape(BasicVar<T> a, std::vector<int> shape);
template <typename T>
BasicVar<T> sum(BasicVar<T> a);
template <typename T>
BasicVar<T> mean(BasicVar<T> a);
/// Mean of squared differences over all elements.
template <typename T>
BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b);
/// Squared difference summed over rows where mask[row] != 0, divided by
/// (selected rows * cols).
template <typename T>
BasicVar<T> masked_row_mse(BasicVar<T> a, BasicVar<T> b, const std::vector<std::uint8_t>& row_mask);

// ---------------------------------------------------------------------------
// Dense layers on rank-2 [rows, features]

template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);
/// x[m,k] * w[k,n] + bias[n]
template <typename T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, BasicVar<T> bias);
template <typename T>
BasicVar<T> add_bias(BasicVar<T> x, BasicVar<T> bias);
/// Layer normalization over the last axis without affine parameters.
template <typename T>
BasicVar<T> layer_norm(BasicVar<T> x, double eps = 1e-6);

// ---------------------------------------------------------------------------
// Token-sequence helpers. Sequences are stored batch-major as [batch*len, dim].

/// x[batch*len, d] + e[batch, d] broadcast over each sample's tokens.
template <typename T>
BasicVar<T> add_per_sample(BasicVar<T> x, BasicVar<T> e, int len);
/// x[batch*len, d] + p[len, d], the same rows added to every sample.
template <typename T>
BasicVar<T> add_tiled(BasicVar<T> x, BasicVar<T> p);
/// out.flat[i] = x.flat[index[i]] reshaped to `shape`; gradients scatter-add.
template <typename T>
BasicVar<T> gather(BasicVar<T> x, const std::vector<std::int64_t>& index, std::vector<int> shape);
/// Interleave per-sample: out sample b = [a_b ; c_b].
template <typename T>
BasicVar<T> concat_seq(BasicVar<T> a, BasicVar<T> c, int batch);
/// Rows [start, start+count) of every sample of length len.
template <typename T>
BasicVar<T> slice_seq(BasicVar<T> x, int batch, int len, int start, int count);
/// Rows with row_mask != 0 are replaced by the constant `replacement`
/// (an empty mask replaces every row). No gradient flows into replaced rows.
template <typename T>
BasicVar<T> replace_rows(BasicVar<T> x, const BasicTensor<T>& replacement, const std::vector<std::uint8_t>& row_mask);

/// Multi-head softmax attention. qkv is [batch*len, 3*d] laid out as
/// [q | k | v]; returns [batch*len, d]. Logits are multiplied by
/// logit_scale / sqrt(d/heads).
template <typename T>
BasicVar<T> attention(BasicVar<T> qkv, int batch, int len, int heads, double logit_scale = 1.0);

// ---------------------------------------------------------------------------
// Convolution on NHWC images [batch, h, w, c].

struct ConvShape {
  int in_h = 0;
  int in_w = 0;
  int in_c = 0;
  int out_c = 0;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;

  int pad() const { return dilation * (kernel / 2); }
  int out_h() const { return (in_h + 2 * pad() - dilation * (kernel - 1) - 1) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad() - dilation * (kernel - 1) - 1) / stride + 1; }
};

/// Reflect-padded convolution. weight is [kernel*kernel*in_c, out_c] with
/// rows ordered (ky, kx, c_in).
template <typename T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> weight, BasicVar<T> bias, const ConvShape& shape);

// ---------------------------------------------------------------------------
// Heatmap heads on [batch, h, w, k] logits.

struct HeatmapGrid {
  double cell = 4.0;    // pixels per heatmap cell
  double offset = 1.5;  // pixel coordinate of cell (0,0) center
  double tau = 0.1;     // softmax temperature
};

/// Soft-argmax expectation per channel; returns [batch, k, 2] as (x, y) pixels.
template <typename T>
BasicVar<T> soft_argmax(BasicVar<T> logits, const HeatmapGrid& grid);
/// Mean over (batch, k) of cross-entropy between target distributions and
/// softmax(logits / tau) over the spatial cells.
template <typename T>
BasicVar<T> heatmap_cross_entropy(BasicVar<T> logits, const BasicTensor<T>& targets, double tau);

}  // namespace uvflow::ad
