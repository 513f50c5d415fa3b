#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "uvflow/autodiff.hpp"

namespace ad = uvflow::ad;
using uvflow::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.storage()) v = n(rng);
  return t;
}

// Builds a scalar from a list of inputs; checks reverse-mode gradients of every
// input against central differences along a random direction.
void check_grad(const std::vector<Tensor>& inputs,
                const std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>& f, double tol = 1e-6,
                double h = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  auto out = f(tape, vars);
  ASSERT_EQ(out.value().size(), 1u);
  tape.backward(out);

  std::mt19937_64 rng(99);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor dir = random_tensor(inputs[i].shape(), rng);
    Tensor g = vars[i].grad();
    double analytic = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) analytic += g[k] * dir[k];

    auto eval = [&](double step) {
      ad::Tape t2(false);
      std::vector<ad::Var> v2;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        Tensor x = inputs[j];
        if (j == i)
          for (std::size_t k = 0; k < x.size(); ++k) x[k] += step * dir[k];
        v2.push_back(t2.input(x));
      }
      return f(t2, v2).value()[0];
    };
    double numeric = (eval(h) - eval(-h)) / (2 * h);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    EXPECT_LT(std::abs(analytic - numeric) / denom, tol) << "input " << i << " analytic " << analytic << " numeric "
                                                          << numeric;
  }
}

// Weighted sum so every output element gets a distinct cotangent.
ad::Var weighted(ad::Tape& tape, ad::Var x) {
  std::mt19937_64 rng(5);
  Tensor w = random_tensor(x.shape(), rng);
  return ad::sum(ad::mul(x, tape.constant(w)));
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({4, 5}, rng);
  check_grad({a, b}, [](ad::Tape& t, auto& v) { return weighted(t, ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]))); });
  check_grad({a}, [](ad::Tape& t, auto& v) { return weighted(t, ad::tanh(ad::affine(v[0], 0.7, 0.1))); });
  check_grad({a}, [](ad::Tape& t, auto& v) { return weighted(t, ad::gelu(v[0])); });
  check_grad({a}, [](ad::Tape& t, auto& v) { return weighted(t, ad::silu(ad::scale(v[0], 1.3))); });
  check_grad({a}, [](ad::Tape& t, auto& v) { return weighted(t, ad::leaky_relu(v[0], 0.1)); });
  check_grad({a, b}, [](ad::Tape&, auto& v) { return ad::mse(v[0], v[1]); });
  check_grad({a}, [](ad::Tape&, auto& v) { return ad::mean(ad::mul(v[0], v[0])); });
}

TEST(Autodiff, MaskedRowMse) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({6, 3}, rng), b = random_tensor({6, 3}, rng);
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 0};
  check_grad({a, b}, [&](ad::Tape&, auto& v) { return ad::masked_row_mse(v[0], v[1], mask); });

  ad::Tape tape;
  auto out = ad::masked_row_mse(tape.constant(a), tape.constant(b), mask);
  double ref = 0.0;
  for (int r : {0, 2, 3})
    for (int c = 0; c < 3; ++c) ref += std::pow(a.at(r, c) - b.at(r, c), 2);
  EXPECT_NEAR(out.value()[0], ref / 9.0, 1e-12);
}

TEST(Autodiff, LinearAndLayerNorm) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({5, 4}, rng), w = random_tensor({4, 3}, rng), bias = random_tensor({3}, rng);
  check_grad({x, w, bias}, [](ad::Tape& t, auto& v) { return weighted(t, ad::linear(v[0], v[1], v[2])); });
  check_grad({x}, [](ad::Tape& t, auto& v) { return weighted(t, ad::layer_norm(v[0])); });

  ad::Tape tape;
  auto y = ad::layer_norm(tape.constant(x)).value();
  for (int r = 0; r < 5; ++r) {
    double m = 0, s = 0;
    for (int c = 0; c < 4; ++c) m += y.at(r, c);
    for (int c = 0; c < 4; ++c) s += y.at(r, c) * y.at(r, c);
    EXPECT_NEAR(m / 4, 0.0, 1e-12);
    EXPECT_NEAR(s / 4, 1.0, 1e-4);
  }
}

TEST(Autodiff, SequenceHelpers) {
  std::mt19937_64 rng(4);
  const int B = 2;
  Tensor a = random_tensor({B * 3, 4}, rng), c = random_tensor({B * 2, 4}, rng), e = random_tensor({B, 4}, rng);
  check_grad({a, c}, [](ad::Tape& t, auto& v) { return weighted(t, ad::concat_seq(v[0], v[1], B)); });
  check_grad({a}, [](ad::Tape& t, auto& v) { return weighted(t, ad::slice_seq(v[0], B, 3, 1, 2)); });
  check_grad({a, e}, [](ad::Tape& t, auto& v) { return weighted(t, ad::add_per_sample(v[0], v[1], 3)); });
  Tensor pos = random_tensor({3, 4}, rng);
  check_grad({a, pos}, [](ad::Tape& t, auto& v) { return weighted(t, ad::add_tiled(v[0], v[1])); });
  // repeated indices must accumulate
  std::vector<std::int64_t> idx{5, 0, 5, 11, 2, 2};
  check_grad({a}, [&](ad::Tape& t, auto& v) { return weighted(t, ad::gather(v[0], idx, {2, 3})); });
  {
    ad::Tape t;
    auto tiled = ad::add_tiled(t.constant(a), t.constant(pos)).value();
    EXPECT_EQ(tiled.at(4, 2), a.at(4, 2) + pos.at(1, 2));
    auto g = ad::gather(t.constant(a), idx, {2, 3}).value();
    EXPECT_EQ(g[3], a[11]);
  }

  ad::Tape tape;
  auto cat = ad::concat_seq(tape.constant(a), tape.constant(c), B).value();
  ASSERT_EQ(cat.dim(0), B * 5);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(cat.at(0, k), a.at(0, k));
    EXPECT_EQ(cat.at(3, k), c.at(0, k));
    EXPECT_EQ(cat.at(5, k), a.at(3, k));
    EXPECT_EQ(cat.at(8, k), c.at(2, k));
  }
}

TEST(Autodiff, ReplaceRowsBlocksGradient) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({4, 3}, rng), rep = random_tensor({4, 3}, rng);
  std::vector<std::uint8_t> mask{0, 1, 0, 1};
  ad::Tape tape;
  auto xv = tape.input(x);
  auto y = ad::replace_rows(xv, rep, mask);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(y.value().at(0, c), x.at(0, c));
    EXPECT_EQ(y.value().at(1, c), rep.at(1, c));
  }
  tape.backward(ad::sum(y));
  auto g = xv.grad();
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(g.at(0, c), 1.0);
    EXPECT_EQ(g.at(1, c), 0.0);
  }
  ad::Tape t2;
  auto all = ad::replace_rows(t2.constant(x), rep, {});
  EXPECT_EQ(all.value(), rep);
}

TEST(Autodiff, AttentionGradientAndNormalization) {
  std::mt19937_64 rng(7);
  const int B = 2, L = 5, D = 8, H = 2;
  Tensor qkv = random_tensor({B * L, 3 * D}, rng);
  check_grad({qkv}, [](ad::Tape& t, auto& v) { return weighted(t, ad::attention(v[0], B, L, H)); });
  check_grad({qkv}, [](ad::Tape& t, auto& v) { return weighted(t, ad::attention(v[0], B, L, H, 0.3)); });

  // With identical keys the softmax is uniform, so each output row is the mean of v.
  Tensor same = qkv;
  for (int r = 0; r < B * L; ++r)
    for (int k = 0; k < D; ++k) same.at(r, D + k) = 0.25;
  ad::Tape tape;
  auto out = ad::attention(tape.constant(same), B, L, H).value();
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < D; ++k) {
      double m = 0;
      for (int j = 0; j < L; ++j) m += same.at(b * L + j, 2 * D + k);
      EXPECT_NEAR(out.at(b * L, k), m / L, 1e-12);
    }
}

TEST(Autodiff, Conv2dMatchesDirectLoop) {
  std::mt19937_64 rng(8);
  ad::ConvShape cs{7, 6, 2, 3, 3, 2, 1};
  Tensor x = random_tensor({1, 7, 6, 2}, rng), w = random_tensor({9 * 2, 3}, rng), b = random_tensor({3}, rng);
  ad::Tape tape;
  auto y = ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), cs).value();
  ASSERT_EQ(y.shape(), (std::vector<int>{1, cs.out_h(), cs.out_w(), 3}));
  auto reflect = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  for (int oy = 0; oy < cs.out_h(); ++oy)
    for (int ox = 0; ox < cs.out_w(); ++ox)
      for (int o = 0; o < 3; ++o) {
        double s = b[o];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int c = 0; c < 2; ++c) {
              int iy = reflect(oy * 2 + ky - 1, 7), ix = reflect(ox * 2 + kx - 1, 6);
              s += x[(iy * 6 + ix) * 2 + c] * w.at((ky * 3 + kx) * 2 + c, o);
            }
        EXPECT_NEAR(y[(oy * cs.out_w() + ox) * 3 + o], s, 1e-12);
      }
}

TEST(Autodiff, Conv2dGradient) {
  std::mt19937_64 rng(9);
  ad::ConvShape cs{6, 6, 2, 3, 3, 1, 2};
  Tensor x = random_tensor({2, 6, 6, 2}, rng), w = random_tensor({18, 3}, rng), b = random_tensor({3}, rng);
  check_grad({x, w, b}, [&](ad::Tape& t, auto& v) { return weighted(t, ad::conv2d(v[0], v[1], v[2], cs)); });
}

TEST(Autodiff, SoftArgmaxAndCrossEntropy) {
  std::mt19937_64 rng(10);
  ad::HeatmapGrid grid;
  Tensor logits = random_tensor({2, 4, 4, 3}, rng, 0.05);
  check_grad({logits}, [&](ad::Tape& t, auto& v) { return weighted(t, ad::soft_argmax(v[0], grid)); }, 1e-5);

  Tensor target({2, 4, 4, 3}, 1.0 / 16);
  check_grad({logits}, [&](ad::Tape&, auto& v) { return ad::heatmap_cross_entropy(v[0], target, grid.tau); }, 1e-5);

  // Uniform logits put every point at the grid centre.
  ad::Tape tape;
  auto pts = ad::soft_argmax(tape.constant(Tensor({1, 4, 4, 2})), grid).value();
  for (int k = 0; k < 2; ++k) {
    EXPECT_NEAR(pts[k * 2], 1.5 + 4 * 1.5, 1e-12);
    EXPECT_NEAR(pts[k * 2 + 1], 1.5 + 4 * 1.5, 1e-12);
  }
}

TEST(Autodiff, FloatTapeAgreesWithDouble) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({6, 4}, rng), w = random_tensor({4, 4}, rng), b = random_tensor({4}, rng);
  ad::Tape td;
  auto yd = ad::gelu(ad::linear(td.constant(x), td.constant(w), td.constant(b))).value();
  ad::TapeF tf;
  auto yf = ad::gelu(ad::linear(tf.constant(x.cast<float>()), tf.constant(w.cast<float>()), tf.constant(b.cast<float>())))
                .value();
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}

TEST(Autodiff, ParameterGradAccumulates) {
  ad::Parameter p{"w", Tensor({2}, std::vector<double>{1.0, 2.0}), {}};
  p.zero_grad();
  for (int i = 0; i < 2; ++i) {
    ad::Tape tape;
    tape.backward(ad::sum(ad::mul(tape.param(p), tape.param(p))));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 8.0);
}
