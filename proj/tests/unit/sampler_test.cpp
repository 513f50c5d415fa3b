#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "uvflow/error.hpp"
#include "uvflow/sampler.hpp"

using namespace uvflow;

namespace {

dit::ModelConfig tiny() {
  dit::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.token_dim = 16;
  c.heads = 2;
  c.n_double = 1;
  c.n_single = 2;
  c.group_boundaries = {1, 2};
  c.time_dim = 8;
  c.cond_tokens = 16;
  c.mlp_ratio = 2;
  return c;
}

lmk::DetectorConfig tiny_det() {
  lmk::DetectorConfig d;
  d.image_size = 16;
  d.stack = {{8, 1, 1}, {8, 2, 1}, {8, 2, 1}};
  return d;
}

Tensor image(int s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor t({s, s, 3});
  for (double& v : t.storage()) v = u(rng);
  return t;
}

toy::LandmarkSet target() {
  toy::LandmarkSet l;
  for (int k = 0; k < toy::kNumLandmarks; ++k) l.points.push_back({2.0 + k, 3.0 + 0.5 * k});
  return l;
}

struct Fixture : ::testing::Test {
  sample::Model model{tiny(), 3};
  lmk::Detector det{tiny_det(), 4};
  Tensor portrait = image(16, 9);
};

}  // namespace

TEST(X0Estimate, Identities) {
  Tensor x = image(8, 1), x0 = image(8, 2), x1 = image(8, 3);
  EXPECT_EQ(sample::x0_estimate(x, image(8, 4), 0.0), x);
  Tensor zero(x.shape());
  EXPECT_EQ(sample::x0_estimate(x, zero, 1.0), x);
  for (double t : {0.1, 0.37, 0.9}) {
    Tensor xt(x.shape()), v(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      xt[i] = (1 - t) * x0[i] + t * x1[i];
      v[i] = x1[i] - x0[i];
    }
    auto est = sample::x0_estimate(xt, v, t);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(est[i], x0[i], 1e-14);
  }
}

TEST(EulerStep, ConstantFieldIsExact) {
  Tensor x0 = image(8, 5), x1 = image(8, 6), v(x0.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x1[i] - x0[i];
  auto one = sample::euler_step(x1, 1.0, 1.0, v);
  Tensor many = x1;
  for (int i = 0; i < 20; ++i) {
    const double t = 1.0 - i / 20.0;
    many = sample::euler_step(many, t, 0.05, v);
  }
  for (std::size_t i = 0; i < x0.size(); ++i) {
    EXPECT_NEAR(one[i], x0[i], 1e-12);
    EXPECT_NEAR(many[i], x0[i], 1e-6);
  }
  EXPECT_EQ(sample::euler_step(x1, 0.5, 0.1, Tensor(x1.shape())), x1);
  EXPECT_THROW(sample::euler_step(x1, 0.5, 0.0, v), ValidationError);
  EXPECT_THROW(sample::euler_step(x1, 0.1, 0.5, v), ValidationError);
}

TEST(GuidanceConfig, Validation) {
  sample::GuidanceConfig g;
  EXPECT_NO_THROW(g.validate());
  g.eta = -1;
  EXPECT_THROW(g.validate(), ValidationError);
  g = {};
  g.steps = 0;
  EXPECT_THROW(g.validate(), ValidationError);
  g = {};
  g.guide_from_t = 0.2;
  g.guide_to_t = 0.5;
  EXPECT_THROW(g.validate(), ValidationError);
  g = {};
  EXPECT_TRUE(g.active_at(0.8));
  EXPECT_FALSE(g.active_at(0.85));
  g.eta = 0;
  EXPECT_FALSE(g.active_at(0.5));
}

TEST_F(Fixture, UnguidedIsDeterministicAndClamped) {
  auto a = sample::unguided_sample(portrait, model, 5, 11);
  auto b = sample::unguided_sample(portrait, model, 5, 11);
  auto c = sample::unguided_sample(portrait, model, 5, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  ASSERT_EQ(a.shape(), (std::vector<int>{16, 16, 3}));
  for (double v : a.storage()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(Fixture, SingleStepIsOneEstimate) {
  auto x1 = sample::initial_noise(16, 21);
  TensorF cond = dit::to_model_space(portrait.reshaped({1, 16, 16, 3}).cast<float>());
  Tensor v = model.velocity(x1.cast<float>(), {1.0}, cond).cast<double>();
  Tensor expect = sample::x0_estimate(x1, v, 1.0).reshaped({16, 16, 3});
  for (double& p : expect.storage()) p = std::clamp(0.5 * (p + 1.0), 0.0, 1.0);
  EXPECT_EQ(sample::unguided_sample(portrait, model, 1, 21), expect);
}

TEST_F(Fixture, ZeroEtaMatchesEmptyInterval) {
  sample::GuidanceConfig a, b;
  a.eta = 0.0;
  b.guide_from_t = 0.01;  // no grid point of a 20-step run lies in [0.01, 0.01]
  b.guide_to_t = 0.01;
  auto ra = sample::guided_sample(portrait, model, &det, target(), a, 5);
  auto rb = sample::guided_sample(portrait, model, &det, target(), b, 5);
  EXPECT_EQ(ra.texture, rb.texture);
  EXPECT_EQ(ra.texture, sample::unguided_sample(portrait, model, 20, 5));
  for (const auto& s : rb.trace.steps) EXPECT_EQ(s.grad_norm, 0.0);
}

TEST_F(Fixture, GuidanceTraceAndCost) {
  sample::GuidanceConfig g;
  g.steps = 10;
  auto r = sample::guided_sample(portrait, model, &det, target(), g, 7);
  ASSERT_EQ(r.trace.steps.size(), 10u);
  EXPECT_EQ(r.model_evals, 10);
  int active = 0;
  for (std::size_t i = 0; i < r.trace.steps.size(); ++i) {
    const auto& s = r.trace.steps[i];
    EXPECT_TRUE(std::isfinite(s.energy));
    EXPECT_GT(s.energy, 0.0);
    if (i > 0) EXPECT_LT(s.t, r.trace.steps[i - 1].t);
    if (g.active_at(s.t)) {
      ++active;
      EXPECT_GT(s.grad_norm, 0.0);
    } else {
      EXPECT_EQ(s.grad_norm, 0.0);
    }
  }
  EXPECT_EQ(active, 8);
  EXPECT_NE(r.texture, sample::unguided_sample(portrait, model, 10, 7));

  g.inner_iters = 3;
  auto r3 = sample::guided_sample(portrait, model, &det, target(), g, 7);
  EXPECT_EQ(r3.model_evals, 10 + 2 * active);

  auto csv = r.trace.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,t,energy,grad_norm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST_F(Fixture, LiteralVariantDiffers) {
  sample::GuidanceConfig g;
  g.steps = 6;
  auto a = sample::guided_sample(portrait, model, &det, target(), g, 3);
  g.literal_xt = true;
  auto b = sample::guided_sample(portrait, model, &det, target(), g, 3);
  EXPECT_NE(a.texture, b.texture);
}

TEST_F(Fixture, GuidanceVanishesAtTarget) {
  // l* equal to the detector's own reading is a stationary point of E
  Tensor img = image(16, 31);
  auto at = det.detect(img);
  auto eg = lmk::energy_grad(det, img, at);
  double sq = 0.0;
  for (double v : eg.grad.storage()) sq += v * v;
  EXPECT_LT(std::sqrt(sq), 1e-6);
  EXPECT_LT(eg.energy, 1e-12);
}

TEST_F(Fixture, Errors) {
  sample::GuidanceConfig g;
  EXPECT_THROW(sample::guided_sample(portrait, model, nullptr, target(), g, 1), ValidationError);
  auto big = tiny_det();
  big.image_size = 32;
  lmk::Detector wrong(big, 1);
  EXPECT_THROW(sample::guided_sample(portrait, model, &wrong, target(), g, 1), ValidationError);
  EXPECT_THROW(sample::guided_sample(image(8, 1), model, &det, target(), g, 1), ValidationError);
  std::vector<sample::Spec> specs(3);
  sample::StepHooks h;
  h.inject_steps = &specs;
  EXPECT_THROW(sample::guided_sample(portrait, model, &det, target(), g, 1, h), ValidationError);
}

TEST_F(Fixture, RecordAndReplayIsExact) {
  std::vector<sample::Cache> caches;
  sample::StepHooks rec;
  rec.record_steps = &caches;
  auto plain = sample::unguided_sample(portrait, model, 4, 2, rec);
  ASSERT_EQ(caches.size(), 4u);
  std::vector<int> all{0, 1, 2};
  std::vector<sample::Spec> specs;
  for (const auto& c : caches) specs.push_back(sample::Spec::replace(c, all));
  sample::StepHooks inj;
  inj.inject_steps = &specs;
  EXPECT_EQ(sample::unguided_sample(portrait, model, 4, 2, inj), plain);
  // injecting features from another condition changes the output
  std::vector<sample::Cache> other;
  sample::StepHooks rec2;
  rec2.record_steps = &other;
  sample::unguided_sample(image(16, 77), model, 4, 2, rec2);
  std::vector<sample::Spec> specs2;
  for (const auto& c : other) specs2.push_back(sample::Spec::replace(c, all));
  inj.inject_steps = &specs2;
  EXPECT_NE(sample::unguided_sample(portrait, model, 4, 2, inj), plain);
}
