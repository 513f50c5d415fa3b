#include "uvflow/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "uvflow/error.hpp"

namespace uvflow::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<const RowMat<T>> as_mat(const BasicTensor<T>& t) {
  return {t.data(), t.dim(0), static_cast<Eigen::Index>(t.size() / static_cast<std::size_t>(t.dim(0)))};
}
template <typename T>
Eigen::Map<RowMat<T>> as_mat(BasicTensor<T>& t) {
  return {t.data(), t.dim(0), static_cast<Eigen::Index>(t.size() / static_cast<std::size_t>(t.dim(0)))};
}
template <typename T>
Eigen::Map<const Vec<T>> as_vec(const BasicTensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}
template <typename T>
Eigen::Map<Vec<T>> as_vec(BasicTensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

template <typename T>
void require_same_tape(const BasicVar<T>& a, const BasicVar<T>& b) {
  require(a.tape() == b.tape(), "vars belong to different tapes");
}

template <typename T>
void require_rank2(const BasicVar<T>& v, const char* op) {
  require(v.value().rank() == 2, std::string(op) + ": expected rank-2 input, got " + v.value().shape_str());
}

// Elementwise unary op: f computes y from x, df computes dy/dx from (x, y).
template <typename T, typename F, typename DF>
BasicVar<T> unary(BasicVar<T> a, F f, DF df) {
  BasicTape<T>& tape = *a.tape();
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  BasicVar<T> out = tape.make(std::move(y), {a});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, out, df] {
      const BasicTensor<T>& g = tape.grad(out.id());
      const BasicTensor<T>& xv = tape.value(a.id());
      const BasicTensor<T>& yv = tape.value(out.id());
      BasicTensor<T>& ga = tape.grad_mut(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
BasicVar<T> BasicTape<T>::make(Tensor value, std::initializer_list<Var> parents) {
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) {
      require(p.tape() == this, "op parent recorded on another tape");
      needs = needs || p.needs_grad();
    }
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
void BasicTape<T>::set_backward(const Var& v, std::function<void()> fn) {
  nodes_[static_cast<std::size_t>(v.id())].backward = std::move(fn);
}

template <typename T>
const BasicTensor<T>& BasicTape<T>::grad(int id) {
  return grad_mut(id);
}

template <typename T>
BasicTensor<T>& BasicTape<T>::grad_mut(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

template <typename T>
BasicVar<T> BasicTape<T>::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
BasicVar<T> BasicTape<T>::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, record_, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
BasicVar<T> BasicTape<T>::param(Parameter& p) {
  Var v = input(p.value);
  if (record_) {
    set_backward(v, [this, id = v.id(), &p] {
      const Tensor& g = grad(id);
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      as_vec(p.grad) += as_vec(g);
    });
  }
  return v;
}

template <typename T>
void BasicTape<T>::backward(const Var& root) {
  require(record_, "backward() on a non-recording tape");
  require(root.tape() == this, "backward root from another tape");
  require(root.value().size() == 1, "backward root must be a scalar, got " + root.value().shape_str());
  for (Node& n : nodes_) n.grad = Tensor{};
  grad_mut(root.id())[0] = T(1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.needs_grad && n.backward && !n.grad.empty()) n.backward();
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b);
  require(a.value().same_shape(b.value()), "add: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  BasicTape<T>& tape = *a.tape();
  BasicTensor<T> y = a.value();
  as_vec(y) += as_vec(b.value());
  BasicVar<T> out = tape.make(std::move(y), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out] {
      const auto& g = tape.grad(out.id());
      if (a.needs_grad()) as_vec(tape.grad_mut(a.id())) += as_vec(g);
      if (b.needs_grad()) as_vec(tape.grad_mut(b.id())) += as_vec(g);
    });
  }
  return out;
}

template <typename T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b);
  require(a.value().same_shape(b.value()), "sub: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  BasicTape<T>& tape = *a.tape();
  BasicTensor<T> y = a.value();
  as_vec(y) -= as_vec(b.value());
  BasicVar<T> out = tape.make(std::move(y), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out] {
      const auto& g = tape.grad(out.id());
      if (a.needs_grad()) as_vec(tape.grad_mut(a.id())) += as_vec(g);
      if (b.needs_grad()) as_vec(tape.grad_mut(b.id())) -= as_vec(g);
    });
  }
  return out;
}

template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b);
  require(a.value().same_shape(b.value()), "mul: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  BasicTape<T>& tape = *a.tape();
  BasicTensor<T> y = a.value();
  as_vec(y).array() *= as_vec(b.value()).array();
  BasicVar<T> out = tape.make(std::move(y), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out] {
      const auto& g = tape.grad(out.id());
      if (a.needs_grad()) as_vec(tape.grad_mut(a.id())).array() += as_vec(g).array() * as_vec(tape.value(b.id())).array();
      if (b.needs_grad()) as_vec(tape.grad_mut(b.id())).array() += as_vec(g).array() * as_vec(tape.value(a.id())).array();
    });
  }
  return out;
}

template <typename T>
BasicVar<T> scale(BasicVar<T> a, double s) {
  return affine(a, s, 0.0);
}

template <typename T>
BasicVar<T> affine(BasicVar<T> a, double s, double c) {
  const T ts = static_cast<T>(s);
  const T tc = static_cast<T>(c);
  return unary(a, [ts, tc](T x) { return ts * x + tc; }, [ts](T, T) { return ts; });
}

template <typename T>
BasicVar<T> tanh(BasicVar<T> a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicVar<T> relu(BasicVar<T> a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicVar<T> leaky_relu(BasicVar<T> a, double slope) {
  const T s = static_cast<T>(slope);
  return unary(a, [s](T x) { return x > T(0) ? x : s * x; }, [s](T x, T) { return x > T(0) ? T(1) : s; });
}

// GELU via the logistic approximation x * sigmoid(1.702 x).
template <typename T>
BasicVar<T> gelu(BasicVar<T> a) {
  static constexpr T k = T(1.702);
  BasicTape<T>& tape = *a.tape();
  const BasicTensor<T>& x = a.value();
  auto sig = std::make_shared<BasicTensor<T>>(x.shape());
  as_vec(*sig) = (T(1) + (-k * as_vec(x).array()).exp()).inverse().matrix();
  BasicTensor<T> y(x.shape());
  as_vec(y) = (as_vec(x).array() * as_vec(*sig).array()).matrix();
  BasicVar<T> out = tape.make(std::move(y), {a});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, out, sig] {
      const auto s = as_vec(*sig).array();
      const auto xv = as_vec(tape.value(a.id())).array();
      as_vec(tape.grad_mut(a.id())).array() +=
          as_vec(tape.grad(out.id())).array() * (s + k * xv * s * (T(1) - s));
    });
  }
  return out;
}

template <typename T>
BasicVar<T> silu(BasicVar<T> a) {
  BasicTape<T>& tape = *a.tape();
  const BasicTensor<T>& x = a.value();
  auto sig = std::make_shared<BasicTensor<T>>(x.shape());
  as_vec(*sig) = (T(1) + (-as_vec(x).array()).exp()).inverse().matrix();
  BasicTensor<T> y(x.shape());
  as_vec(y) = (as_vec(x).array() * as_vec(*sig).array()).matrix();
  BasicVar<T> out = tape.make(std::move(y), {a});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, out, sig] {
      const auto s = as_vec(*sig).array();
      const auto xv = as_vec(tape.value(a.id())).array();
      as_vec(tape.grad_mut(a.id())).array() += as_vec(tape.grad(out.id())).array() * (s * (T(1) + xv * (T(1) - s)));
    });
  }
  return out;
}

template <typename T>
BasicVar<T> reshape(BasicVar<T> a, std::vector<int> shape) {
  BasicTape<T>& tape = *a.tape();
  BasicVar<T> out = tape.make(a.value().reshaped(std::move(shape)), {a});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, out] { as_vec(tape.grad_mut(a.id())) += as_vec(tape.grad(out.id())); });
  }
  return out;
}

template <typename T>
BasicVar<T> sum(BasicVar<T> a) {
  BasicTape<T>& tape = *a.tape();
  BasicVar<T> out = tape.make(BasicTensor<T>({1}, static_cast<T>(a.value().sum())), {a});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, out] { as_vec(tape.grad_mut(a.id())).array() += tape.grad(out.id())[0]; });
  }
  return out;
}

template <typename T>
BasicVar<T> mean(BasicVar<T> a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

template <typename T>
BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b);
  require(a.value().same_shape(b.value()), "mse: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  BasicTape<T>& tape = *a.tape();
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  BasicVar<T> out = tape.make(BasicTensor<T>({1}, static_cast<T>(acc / n)), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out, n] {
      const T g = static_cast<T>(static_cast<double>(tape.grad(out.id())[0]) * 2.0 / n);
      Vec<T> d = as_vec(tape.value(a.id())) - as_vec(tape.value(b.id()));
      if (a.needs_grad()) as_vec(tape.grad_mut(a.id())) += g * d;
      if (b.needs_grad()) as_vec(tape.grad_mut(b.id())) -= g * d;
    });
  }
  return out;
}

template <typename T>
BasicVar<T> masked_row_mse(BasicVar<T> a, BasicVar<T> b, const std::vector<std::uint8_t>& row_mask) {
  require_same_tape(a, b);
  require_rank2(a, "masked_row_mse");
  require(a.value().same_shape(b.value()), "masked_row_mse: shape mismatch");
  require(static_cast<int>(row_mask.size()) == a.dim(0), "masked_row_mse: mask length mismatch");
  BasicTape<T>& tape = *a.tape();
  const int rows = a.dim(0);
  const int cols = a.dim(1);
  int selected = 0;
  for (auto m : row_mask) selected += m ? 1 : 0;
  require(selected > 0, "masked_row_mse: empty mask");
  const double n = static_cast<double>(selected) * cols;
  double acc = 0.0;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int r = 0; r < rows; ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) continue;
    for (int c = 0; c < cols; ++c) {
      const double d = static_cast<double>(av.at(r, c)) - static_cast<double>(bv.at(r, c));
      acc += d * d;
    }
  }
  BasicVar<T> out = tape.make(BasicTensor<T>({1}, static_cast<T>(acc / n)), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out, n, row_mask, rows, cols] {
      const T g = static_cast<T>(static_cast<double>(tape.grad(out.id())[0]) * 2.0 / n);
      const auto& av2 = tape.value(a.id());
      const auto& bv2 = tape.value(b.id());
      for (int r = 0; r < rows; ++r) {
        if (!row_mask[static_cast<std::size_t>(r)]) continue;
        for (int c = 0; c < cols; ++c) {
          const T d = g * (av2.at(r, c) - bv2.at(r, c));
          if (a.needs_grad()) tape.grad_mut(a.id()).at(r, c) += d;
          if (b.needs_grad()) tape.grad_mut(b.id()).at(r, c) -= d;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b);
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  require(a.dim(1) == b.dim(0), "matmul: inner dims " + a.value().shape_str() + " x " + b.value().shape_str());
  BasicTape<T>& tape = *a.tape();
  BasicTensor<T> y({a.dim(0), b.dim(1)});
  as_mat(y).noalias() = as_mat(a.value()) * as_mat(b.value());
  BasicVar<T> out = tape.make(std::move(y), {a, b});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, b, out] {
      const auto& g = tape.grad(out.id());
      if (a.needs_grad()) as_mat(tape.grad_mut(a.id())).noalias() += as_mat(g) * as_mat(tape.value(b.id())).transpose();
      if (b.needs_grad()) as_mat(tape.grad_mut(b.id())).noalias() += as_mat(tape.value(a.id())).transpose() * as_mat(g);
    });
  }
  return out;
}

template <typename T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, BasicVar<T> bias) {
  require_same_tape(x, w);
  require_same_tape(x, bias);
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  require(x.dim(1) == w.dim(0), "linear: input " + x.value().shape_str() + " vs weight " + w.value().shape_str());
  require(static_cast<int>(bias.value().size()) == w.dim(1), "linear: bias size mismatch");
  BasicTape<T>& tape = *x.tape();
  BasicTensor<T> y({x.dim(0), w.dim(1)});
  auto ym = as_mat(y);
  ym.noalias() = as_mat(x.value()) * as_mat(w.value());
  ym.rowwise() += as_vec(bias.value()).transpose();
  BasicVar<T> out = tape.make(std::move(y), {x, w, bias});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, w, bias, out] {
      const auto g = as_mat(tape.grad(out.id()));
      if (x.needs_grad()) as_mat(tape.grad_mut(x.id())).noalias() += g * as_mat(tape.value(w.id())).transpose();
      if (w.needs_grad()) as_mat(tape.grad_mut(w.id())).noalias() += as_mat(tape.value(x.id())).transpose() * g;
      if (bias.needs_grad()) as_vec(tape.grad_mut(bias.id())) += g.colwise().sum().transpose();
    });
  }
  return out;
}

template <typename T>
BasicVar<T> add_bias(BasicVar<T> x, BasicVar<T> bias) {
  require_same_tape(x, bias);
  require_rank2(x, "add_bias");
  require(static_cast<int>(bias.value().size()) == x.dim(1), "add_bias: bias size mismatch");
  BasicTape<T>& tape = *x.tape();
  BasicTensor<T> y = x.value();
  as_mat(y).rowwise() += as_vec(bias.value()).transpose();
  BasicVar<T> out = tape.make(std::move(y), {x, bias});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, bias, out] {
      const auto g = as_mat(tape.grad(out.id()));
      if (x.needs_grad()) as_vec(tape.grad_mut(x.id())) += as_vec(tape.grad(out.id()));
      if (bias.needs_grad()) as_vec(tape.grad_mut(bias.id())) += g.colwise().sum().transpose();
    });
  }
  return out;
}

template <typename T>
BasicVar<T> layer_norm(BasicVar<T> x, double eps) {
  require_rank2(x, "layer_norm");
  BasicTape<T>& tape = *x.tape();
  const int rows = x.dim(0);
  const int cols = x.dim(1);
  BasicTensor<T> y({rows, cols});
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const auto xm = as_mat(x.value());
  auto ym = as_mat(y);
  for (int r = 0; r < rows; ++r) {
    const T mu = xm.row(r).mean();
    const T var = (xm.row(r).array() - mu).square().mean();
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    ym.row(r) = (xm.row(r).array() - mu) * is;
  }
  BasicVar<T> out = tape.make(std::move(y), {x});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, out, inv_std, rows, cols] {
      const auto g = as_mat(tape.grad(out.id()));
      const auto yv = as_mat(tape.value(out.id()));
      auto gx = as_mat(tape.grad_mut(x.id()));
      for (int r = 0; r < rows; ++r) {
        const T gm = g.row(r).mean();
        const T gy = g.row(r).dot(yv.row(r)) / static_cast<T>(cols);
        gx.row(r).array() += (*inv_std)[static_cast<std::size_t>(r)] * (g.row(r).array() - gm - yv.row(r).array() * gy);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

template <typename T>
BasicVar<T> add_per_sample(BasicVar<T> x, BasicVar<T> e, int len) {
  require_same_tape(x, e);
  require_rank2(x, "add_per_sample");
  require_rank2(e, "add_per_sample");
  const int batch = e.dim(0);
  require(x.dim(0) == batch * len && x.dim(1) == e.dim(1),
          "add_per_sample: " + x.value().shape_str() + " vs " + e.value().shape_str());
  BasicTape<T>& tape = *x.tape();
  BasicTensor<T> y = x.value();
  auto ym = as_mat(y);
  const auto em = as_mat(e.value());
  for (int b = 0; b < batch; ++b) ym.middleRows(static_cast<Eigen::Index>(b) * len, len).rowwise() += em.row(b);
  BasicVar<T> out = tape.make(std::move(y), {x, e});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, e, out, batch, len] {
      const auto g = as_mat(tape.grad(out.id()));
      if (x.needs_grad()) as_vec(tape.grad_mut(x.id())) += as_vec(tape.grad(out.id()));
      if (e.needs_grad()) {
        auto ge = as_mat(tape.grad_mut(e.id()));
        for (int b = 0; b < batch; ++b) ge.row(b) += g.middleRows(static_cast<Eigen::Index>(b) * len, len).colwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> add_tiled(BasicVar<T> x, BasicVar<T> p) {
  require_same_tape(x, p);
  require_rank2(x, "add_tiled");
  require_rank2(p, "add_tiled");
  const int len = p.dim(0);
  require(len > 0 && x.dim(0) % len == 0 && x.dim(1) == p.dim(1),
          "add_tiled: " + x.value().shape_str() + " vs " + p.value().shape_str());
  const int batch = x.dim(0) / len;
  BasicTape<T>& tape = *x.tape();
  BasicTensor<T> y = x.value();
  auto ym = as_mat(y);
  const auto pm = as_mat(p.value());
  for (int b = 0; b < batch; ++b) ym.middleRows(static_cast<Eigen::Index>(b) * len, len) += pm;
  BasicVar<T> out = tape.make(std::move(y), {x, p});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, p, out, batch, len] {
      const auto g = as_mat(tape.grad(out.id()));
      if (x.needs_grad()) as_vec(tape.grad_mut(x.id())) += as_vec(tape.grad(out.id()));
      if (p.needs_grad()) {
        auto gp = as_mat(tape.grad_mut(p.id()));
        for (int b = 0; b < batch; ++b) gp += g.middleRows(static_cast<Eigen::Index>(b) * len, len);
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> gather(BasicVar<T> x, const std::vector<std::int64_t>& index, std::vector<int> shape) {
  BasicTensor<T> y(std::move(shape));
  require(y.size() == index.size(), "gather: index length does not match output shape");
  const auto n = static_cast<std::int64_t>(x.value().size());
  const T* src = x.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < n, "gather: index out of range");
    y[i] = src[index[i]];
  }
  BasicTape<T>& tape = *x.tape();
  BasicVar<T> out = tape.make(std::move(y), {x});
  if (out.needs_grad()) {
    auto idx = std::make_shared<const std::vector<std::int64_t>>(index);
    tape.set_backward(out, [&tape, x, out, idx] {
      const T* g = tape.grad(out.id()).data();
      T* gx = tape.grad_mut(x.id()).data();
      for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicVar<T> concat_seq(BasicVar<T> a, BasicVar<T> c, int batch) {
  require_same_tape(a, c);
  require_rank2(a, "concat_seq");
  require_rank2(c, "concat_seq");
  require(a.dim(1) == c.dim(1), "concat_seq: feature dims differ");
  require(batch > 0 && a.dim(0) % batch == 0 && c.dim(0) % batch == 0, "concat_seq: rows not divisible by batch");
  const int la = a.dim(0) / batch;
  const int lc = c.dim(0) / batch;
  BasicTape<T>& tape = *a.tape();
  BasicTensor<T> y({batch * (la + lc), a.dim(1)});
  auto ym = as_mat(y);
  const auto am = as_mat(a.value());
  const auto cm = as_mat(c.value());
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * (la + lc);
    ym.middleRows(base, la) = am.middleRows(static_cast<Eigen::Index>(b) * la, la);
    ym.middleRows(base + la, lc) = cm.middleRows(static_cast<Eigen::Index>(b) * lc, lc);
  }
  BasicVar<T> out = tape.make(std::move(y), {a, c});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, a, c, out, batch, la, lc] {
      const auto g = as_mat(tape.grad(out.id()));
      for (int b = 0; b < batch; ++b) {
        const Eigen::Index base = static_cast<Eigen::Index>(b) * (la + lc);
        if (a.needs_grad()) as_mat(tape.grad_mut(a.id())).middleRows(static_cast<Eigen::Index>(b) * la, la) += g.middleRows(base, la);
        if (c.needs_grad()) as_mat(tape.grad_mut(c.id())).middleRows(static_cast<Eigen::Index>(b) * lc, lc) += g.middleRows(base + la, lc);
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> slice_seq(BasicVar<T> x, int batch, int len, int start, int count) {
  require_rank2(x, "slice_seq");
  require(x.dim(0) == batch * len, "slice_seq: rows != batch*len");
  require(start >= 0 && count >= 0 && start + count <= len, "slice_seq: range out of bounds");
  BasicTape<T>& tape = *x.tape();
  BasicTensor<T> y({batch * count, x.dim(1)});
  auto ym = as_mat(y);
  const auto xm = as_mat(x.value());
  for (int b = 0; b < batch; ++b) {
    ym.middleRows(static_cast<Eigen::Index>(b) * count, count) = xm.middleRows(static_cast<Eigen::Index>(b) * len + start, count);
  }
  BasicVar<T> out = tape.make(std::move(y), {x});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, out, batch, len, start, count] {
      const auto g = as_mat(tape.grad(out.id()));
      auto gx = as_mat(tape.grad_mut(x.id()));
      for (int b = 0; b < batch; ++b) {
        gx.middleRows(static_cast<Eigen::Index>(b) * len + start, count) += g.middleRows(static_cast<Eigen::Index>(b) * count, count);
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> replace_rows(BasicVar<T> x, const BasicTensor<T>& replacement, const std::vector<std::uint8_t>& row_mask) {
  require_rank2(x, "replace_rows");
  require(replacement.same_shape(x.value()),
          "replace_rows: replacement " + replacement.shape_str() + " does not match " + x.value().shape_str());
  require(row_mask.empty() || static_cast<int>(row_mask.size()) == x.dim(0), "replace_rows: mask length mismatch");
  BasicTape<T>& tape = *x.tape();
  if (row_mask.empty()) return tape.constant(replacement);
  BasicTensor<T> y = x.value();
  const int cols = x.dim(1);
  for (int r = 0; r < x.dim(0); ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) continue;
    for (int c = 0; c < cols; ++c) y.at(r, c) = replacement.at(r, c);
  }
  BasicVar<T> out = tape.make(std::move(y), {x});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, out, row_mask, cols] {
      const auto& g = tape.grad(out.id());
      auto& gx = tape.grad_mut(x.id());
      for (int r = 0; r < g.dim(0); ++r) {
        if (row_mask[static_cast<std::size_t>(r)]) continue;
        for (int c = 0; c < cols; ++c) gx.at(r, c) += g.at(r, c);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
BasicVar<T> attention(BasicVar<T> qkv, int batch, int len, int heads, double logit_scale) {
  require_rank2(qkv, "attention");
  require(qkv.dim(0) == batch * len, "attention: rows != batch*len");
  require(qkv.dim(1) % 3 == 0, "attention: qkv width not divisible by 3");
  const int d = qkv.dim(1) / 3;
  require(heads > 0 && d % heads == 0, "attention: model dim not divisible by heads");
  const int dh = d / heads;
  const T s = static_cast<T>(logit_scale / std::sqrt(static_cast<double>(dh)));
  BasicTape<T>& tape = *qkv.tape();

  BasicTensor<T> y({batch * len, d});
  // Softmax probabilities per (batch, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(batch) * heads);
  const auto in = as_mat(qkv.value());
  auto ym = as_mat(y);
  for (int b = 0; b < batch; ++b) {
    const auto rows = in.middleRows(static_cast<Eigen::Index>(b) * len, len);
    for (int h = 0; h < heads; ++h) {
      RowMat<T> p = (rows.middleCols(h * dh, dh) * rows.middleCols(d + h * dh, dh).transpose()) * s;
      const Vec<T> m = p.rowwise().maxCoeff();
      p = (p - m.replicate(1, len)).array().exp().matrix();
      const Vec<T> z = p.rowwise().sum();
      p.array().colwise() /= z.array();
      ym.block(static_cast<Eigen::Index>(b) * len, h * dh, len, dh).noalias() = p * rows.middleCols(2 * d + h * dh, dh);
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(p);
    }
  }
  BasicVar<T> out = tape.make(std::move(y), {qkv});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, qkv, out, probs, batch, len, heads, d, dh, s] {
      const auto g = as_mat(tape.grad(out.id()));
      const auto in2 = as_mat(tape.value(qkv.id()));
      auto gin = as_mat(tape.grad_mut(qkv.id()));
      for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
        const auto rows = in2.middleRows(r0, len);
        for (int h = 0; h < heads; ++h) {
          const RowMat<T>& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
          const auto go = g.block(r0, h * dh, len, dh);
          RowMat<T> gs = go * rows.middleCols(2 * d + h * dh, dh).transpose();
          gs = p.cwiseProduct(gs);
          const Vec<T> rs = gs.rowwise().sum();
          gs -= p.cwiseProduct(rs.replicate(1, len));
          gs *= s;
          gin.block(r0, h * dh, len, dh).noalias() += gs * rows.middleCols(d + h * dh, dh);
          gin.block(r0, d + h * dh, len, dh).noalias() += gs.transpose() * rows.middleCols(h * dh, dh);
          gin.block(r0, 2 * d + h * dh, len, dh).noalias() += p.transpose() * go;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

// For each output pixel and kernel tap, the flat input pixel index (y*w + x).
std::shared_ptr<const std::vector<int>> conv_gather_table(const ConvShape& cs) {
  const int oh = cs.out_h();
  const int ow = cs.out_w();
  const int taps = cs.kernel * cs.kernel;
  auto table = std::make_shared<std::vector<int>>(static_cast<std::size_t>(oh) * ow * taps);
  const int pad = cs.pad();
  std::size_t n = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int ky = 0; ky < cs.kernel; ++ky) {
        for (int kx = 0; kx < cs.kernel; ++kx) {
          const int iy = reflect_index(oy * cs.stride - pad + ky * cs.dilation, cs.in_h);
          const int ix = reflect_index(ox * cs.stride - pad + kx * cs.dilation, cs.in_w);
          (*table)[n++] = iy * cs.in_w + ix;
        }
      }
    }
  }
  return table;
}

}  // namespace

template <typename T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> weight, BasicVar<T> bias, const ConvShape& cs) {
  require_same_tape(x, weight);
  require_same_tape(x, bias);
  const auto& xv = x.value();
  require(xv.rank() == 4 && xv.dim(1) == cs.in_h && xv.dim(2) == cs.in_w && xv.dim(3) == cs.in_c,
          "conv2d: input " + xv.shape_str() + " does not match geometry");
  const int taps = cs.kernel * cs.kernel;
  require(weight.value().rank() == 2 && weight.dim(0) == taps * cs.in_c && weight.dim(1) == cs.out_c,
          "conv2d: weight shape " + weight.value().shape_str());
  require(static_cast<int>(bias.value().size()) == cs.out_c, "conv2d: bias size mismatch");
  require(cs.pad() < cs.in_h && cs.pad() < cs.in_w, "conv2d: reflect padding larger than input");

  const int batch = xv.dim(0);
  const int oh = cs.out_h();
  const int ow = cs.out_w();
  const int opix = oh * ow;
  const int ipix = cs.in_h * cs.in_w;
  const int ckc = taps * cs.in_c;
  auto table = conv_gather_table(cs);

  auto cols = std::make_shared<RowMat<T>>(static_cast<Eigen::Index>(batch) * opix, ckc);
  for (int b = 0; b < batch; ++b) {
    const T* src = xv.data() + static_cast<std::size_t>(b) * ipix * cs.in_c;
    for (int p = 0; p < opix; ++p) {
      T* dst = cols->data() + (static_cast<std::size_t>(b) * opix + p) * ckc;
      for (int t = 0; t < taps; ++t) {
        const T* px = src + static_cast<std::size_t>((*table)[static_cast<std::size_t>(p) * taps + t]) * cs.in_c;
        std::copy(px, px + cs.in_c, dst + static_cast<std::size_t>(t) * cs.in_c);
      }
    }
  }
  BasicTensor<T> y({batch, oh, ow, cs.out_c});
  Eigen::Map<RowMat<T>> ym(y.data(), static_cast<Eigen::Index>(batch) * opix, cs.out_c);
  ym.noalias() = *cols * as_mat(weight.value());
  ym.rowwise() += as_vec(bias.value()).transpose();

  BasicTape<T>& tape = *x.tape();
  BasicVar<T> out = tape.make(std::move(y), {x, weight, bias});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, x, weight, bias, out, cols, table, batch, opix, ipix, ckc, taps, cs] {
      const auto& gt = tape.grad(out.id());
      Eigen::Map<const RowMat<T>> g(gt.data(), static_cast<Eigen::Index>(batch) * opix, cs.out_c);
      if (weight.needs_grad()) as_mat(tape.grad_mut(weight.id())).noalias() += cols->transpose() * g;
      if (bias.needs_grad()) as_vec(tape.grad_mut(bias.id())) += g.colwise().sum().transpose();
      if (x.needs_grad()) {
        const RowMat<T> gcols = g * as_mat(tape.value(weight.id())).transpose();
        auto& gx = tape.grad_mut(x.id());
        for (int b = 0; b < batch; ++b) {
          T* dst = gx.data() + static_cast<std::size_t>(b) * ipix * cs.in_c;
          for (int p = 0; p < opix; ++p) {
            const T* src = gcols.data() + (static_cast<std::size_t>(b) * opix + p) * ckc;
            for (int t = 0; t < taps; ++t) {
              T* px = dst + static_cast<std::size_t>((*table)[static_cast<std::size_t>(p) * taps + t]) * cs.in_c;
              const T* sp = src + static_cast<std::size_t>(t) * cs.in_c;
              for (int c = 0; c < cs.in_c; ++c) px[c] += sp[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

namespace {

// Softmax of logits / tau over spatial cells for every (batch, channel),
// laid out like the logits.
template <typename T>
BasicTensor<T> spatial_softmax(const BasicTensor<T>& logits, double tau) {
  const int batch = logits.dim(0);
  const int cells = logits.dim(1) * logits.dim(2);
  const int k = logits.dim(3);
  BasicTensor<T> p(logits.shape());
  std::vector<double> buf(static_cast<std::size_t>(cells));
  for (int b = 0; b < batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * cells * k;
    for (int j = 0; j < k; ++j) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < cells; ++c) {
        buf[static_cast<std::size_t>(c)] = static_cast<double>(logits[base + static_cast<std::size_t>(c) * k + j]) / tau;
        m = std::max(m, buf[static_cast<std::size_t>(c)]);
      }
      double z = 0.0;
      for (double& v : buf) {
        v = std::exp(v - m);
        z += v;
      }
      for (int c = 0; c < cells; ++c) {
        p[base + static_cast<std::size_t>(c) * k + j] = static_cast<T>(buf[static_cast<std::size_t>(c)] / z);
      }
    }
  }
  return p;
}

}  // namespace

template <typename T>
BasicVar<T> soft_argmax(BasicVar<T> logits, const HeatmapGrid& grid) {
  const auto& lv = logits.value();
  require(lv.rank() == 4, "soft_argmax: expected [batch, h, w, k] logits");
  require(grid.tau > 0.0, "soft_argmax: tau must be positive");
  const int batch = lv.dim(0);
  const int h = lv.dim(1);
  const int w = lv.dim(2);
  const int k = lv.dim(3);
  auto probs = std::make_shared<BasicTensor<T>>(spatial_softmax(lv, grid.tau));
  BasicTensor<T> y({batch, k, 2});
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < k; ++j) {
      double ex = 0.0;
      double ey = 0.0;
      for (int cy = 0; cy < h; ++cy) {
        for (int cx = 0; cx < w; ++cx) {
          const double p = static_cast<double>((*probs)[((static_cast<std::size_t>(b) * h + cy) * w + cx) * k + j]);
          ex += p * (grid.offset + grid.cell * cx);
          ey += p * (grid.offset + grid.cell * cy);
        }
      }
      y[(static_cast<std::size_t>(b) * k + j) * 2] = static_cast<T>(ex);
      y[(static_cast<std::size_t>(b) * k + j) * 2 + 1] = static_cast<T>(ey);
    }
  }
  BasicTape<T>& tape = *logits.tape();
  BasicVar<T> out = tape.make(std::move(y), {logits});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, logits, out, probs, grid, batch, h, w, k] {
      const auto& g = tape.grad(out.id());
      const auto& yv = tape.value(out.id());
      auto& gl = tape.grad_mut(logits.id());
      for (int b = 0; b < batch; ++b) {
        for (int j = 0; j < k; ++j) {
          const std::size_t o = (static_cast<std::size_t>(b) * k + j) * 2;
          const double gx = static_cast<double>(g[o]);
          const double gy = static_cast<double>(g[o + 1]);
          const double ex = static_cast<double>(yv[o]);
          const double ey = static_cast<double>(yv[o + 1]);
          for (int cy = 0; cy < h; ++cy) {
            for (int cx = 0; cx < w; ++cx) {
              const std::size_t i = ((static_cast<std::size_t>(b) * h + cy) * w + cx) * k + j;
              const double p = static_cast<double>((*probs)[i]);
              const double px = grid.offset + grid.cell * cx;
              const double py = grid.offset + grid.cell * cy;
              gl[i] += static_cast<T>(p * (gx * (px - ex) + gy * (py - ey)) / grid.tau);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> heatmap_cross_entropy(BasicVar<T> logits, const BasicTensor<T>& targets, double tau) {
  const auto& lv = logits.value();
  require(lv.rank() == 4, "heatmap_cross_entropy: expected [batch, h, w, k] logits");
  require(targets.same_shape(lv), "heatmap_cross_entropy: target shape mismatch");
  require(tau > 0.0, "heatmap_cross_entropy: tau must be positive");
  const int batch = lv.dim(0);
  const int k = lv.dim(3);
  auto probs = std::make_shared<BasicTensor<T>>(spatial_softmax(lv, tau));
  const double norm = static_cast<double>(batch) * k;
  double loss = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (targets[i] > T(0)) loss -= static_cast<double>(targets[i]) * std::log(std::max(static_cast<double>((*probs)[i]), 1e-300));
  }
  BasicTape<T>& tape = *logits.tape();
  BasicVar<T> out = tape.make(BasicTensor<T>({1}, static_cast<T>(loss / norm)), {logits});
  if (out.needs_grad()) {
    tape.set_backward(out, [&tape, logits, out, probs, targets, tau, norm, batch, k] {
      const double g = static_cast<double>(tape.grad(out.id())[0]) / (norm * tau);
      auto& gl = tape.grad_mut(logits.id());
      const int cells = static_cast<int>(targets.size() / (static_cast<std::size_t>(batch) * k));
      for (int b = 0; b < batch; ++b) {
        for (int j = 0; j < k; ++j) {
          double tsum = 0.0;
          for (int c = 0; c < cells; ++c) tsum += static_cast<double>(targets[(static_cast<std::size_t>(b) * cells + c) * k + j]);
          for (int c = 0; c < cells; ++c) {
            const std::size_t i = (static_cast<std::size_t>(b) * cells + c) * k + j;
            gl[i] += static_cast<T>(g * (static_cast<double>((*probs)[i]) * tsum - static_cast<double>(targets[i])));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define UVFLOW_INSTANTIATE_AD(T)                                                                              \
  template class BasicTape<T>;                                                                                \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                                         \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                                         \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                                         \
  template BasicVar<T> scale(BasicVar<T>, double);                                                            \
  template BasicVar<T> affine(BasicVar<T>, double, double);                                                   \
  template BasicVar<T> tanh(BasicVar<T>);                                                                     \
  template BasicVar<T> relu(BasicVar<T>);                                                                     \
  template BasicVar<T> leaky_relu(BasicVar<T>, double);                                                       \
  template BasicVar<T> gelu(BasicVar<T>);                                                                     \
  template BasicVar<T> silu(BasicVar<T>);                                                                     \
  template BasicVar<T> reshape(BasicVar<T>, std::vector<int>);                                                \
  template BasicVar<T> sum(BasicVar<T>);                                                                      \
  template BasicVar<T> mean(BasicVar<T>);                                                                     \
  template BasicVar<T> mse(BasicVar<T>, BasicVar<T>);                                                         \
  template BasicVar<T> masked_row_mse(BasicVar<T>, BasicVar<T>, const std::vector<std::uint8_t>&);            \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                                      \
  template BasicVar<T> linear(BasicVar<T>, BasicVar<T>, BasicVar<T>);                                         \
  template BasicVar<T> add_bias(BasicVar<T>, BasicVar<T>);                                                    \
  template BasicVar<T> layer_norm(BasicVar<T>, double);                                                       \
  template BasicVar<T> add_per_sample(BasicVar<T>, BasicVar<T>, int);                                         \
  template BasicVar<T> add_tiled(BasicVar<T>, BasicVar<T>);                                                   \
  template BasicVar<T> gather(BasicVar<T>, const std::vector<std::int64_t>&, std::vector<int>);              \
  template BasicVar<T> concat_seq(BasicVar<T>, BasicVar<T>, int);                                             \
  template BasicVar<T> slice_seq(BasicVar<T>, int, int, int, int);                                            \
  template BasicVar<T> replace_rows(BasicVar<T>, const BasicTensor<T>&, const std::vector<std::uint8_t>&);    \
  template BasicVar<T> attention(BasicVar<T>, int, int, int, double);                                         \
  template BasicVar<T> conv2d(BasicVar<T>, BasicVar<T>, BasicVar<T>, const ConvShape&);                       \
  template BasicVar<T> soft_argmax(BasicVar<T>, const HeatmapGrid&);                                          \
  template BasicVar<T> heatmap_cross_entropy(BasicVar<T>, const BasicTensor<T>&, double);

UVFLOW_INSTANTIATE_AD(float)
UVFLOW_INSTANTIATE_AD(double)

#undef UVFLOW_INSTANTIATE_AD

}  // namespace uvflow::ad
