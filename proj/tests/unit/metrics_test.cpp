#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "uvflow/error.hpp"
#include "uvflow/metrics.hpp"

using namespace uvflow;

namespace {

Tensor rand_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u;
  Tensor t({h, w, 3});
  for (double& v : t.storage()) v = u(rng);
  return t;
}

Tensor filled(int n, double v) {
  Tensor t({n, n, 3});
  for (double& p : t.storage()) p = v;
  return t;
}

}  // namespace

TEST(Psnr, Examples) {
  auto a = rand_image(16, 16, 1);
  EXPECT_EQ(metrics::psnr(a, a), std::numeric_limits<double>::infinity());
  EXPECT_NEAR(metrics::psnr(filled(8, 0.3), filled(8, 0.4)), 20.0, 1e-9);
  auto b = rand_image(16, 16, 2);
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += std::pow(a[i] - b[i], 2);
  EXPECT_NEAR(metrics::psnr(a, b), -10.0 * std::log10(se / a.size()), 1e-9);
  EXPECT_EQ(metrics::psnr(a, b), metrics::psnr(b, a));
  EXPECT_GT(metrics::psnr(filled(8, 0.3), filled(8, 0.35)), metrics::psnr(filled(8, 0.3), filled(8, 0.4)));
  EXPECT_THROW(metrics::psnr(a, rand_image(8, 8, 1)), ValidationError);
}

TEST(Ssim, Examples) {
  auto a = rand_image(24, 24, 3);
  EXPECT_NEAR(metrics::ssim(a, a), 1.0, 1e-12);
  auto b = rand_image(24, 24, 4);
  EXPECT_NEAR(metrics::ssim(a, b), metrics::ssim(b, a), 1e-15);
  EXPECT_LT(metrics::ssim(a, b), 0.5);

  // constant images: only the luminance term survives
  const double c1 = 1e-4, c2 = 9e-4, m1 = 0.2, m2 = 0.6;
  const double expect = (2 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
  EXPECT_NEAR(metrics::ssim(filled(16, m1), filled(16, m2)), expect, 1e-9);

  // inverted checkerboard
  Tensor cb({16, 16, 3}), inv({16, 16, 3});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) {
        cb[(y * 16 + x) * 3 + c] = (x + y) % 2;
        inv[(y * 16 + x) * 3 + c] = 1 - (x + y) % 2;
      }
  EXPECT_LT(metrics::ssim(cb, inv), -0.9);
  EXPECT_THROW(metrics::ssim(rand_image(8, 8, 1), rand_image(8, 8, 2)), ValidationError);
}

TEST(LandmarkL2, SetsAndErrors) {
  toy::LandmarkSet a, b;
  for (int k = 0; k < 4; ++k) {
    a.points.push_back({1.0 * k, 2.0});
    b.points.push_back({1.0 * k + 3.0, 6.0});
  }
  EXPECT_DOUBLE_EQ(metrics::landmark_l2(a, b), 5.0);
  EXPECT_DOUBLE_EQ(metrics::landmark_l2(b, a), 5.0);
  EXPECT_DOUBLE_EQ(metrics::landmark_y_error(a, b), 4.0);
  EXPECT_THROW(metrics::landmark_l2(toy::LandmarkSet{}, toy::LandmarkSet{}), ValidationError);
  b.points.pop_back();
  EXPECT_THROW(metrics::landmark_l2(a, b), ValidationError);
  lmk::Detector det;
  EXPECT_THROW(metrics::landmark_l2(rand_image(64, 64, 1), det, a), ValidationError);
}

TEST(MaskedL2, Examples) {
  auto a = rand_image(64, 64, 5), b = rand_image(64, 64, 6);
  toy::Mask all(64 * 64, 1), none(64 * 64, 0);
  EXPECT_THROW(metrics::masked_l2(a, b, none), ValidationError);
  EXPECT_EQ(metrics::masked_l2(a, a, all), 0.0);
  EXPECT_EQ(metrics::masked_l2(a, b, all), metrics::masked_l2(b, a, all));
  EXPECT_THROW(metrics::masked_l2(a, b, toy::Mask(10, 1)), ValidationError);
  // one changed pixel
  toy::Mask one(64 * 64, 0);
  one[100] = 1;
  Tensor c = a;
  c[300] += 0.5;
  EXPECT_NEAR(metrics::masked_l2(a, c, one), 0.25 / 3.0, 1e-15);

  toy::FaceParams p;
  auto q = p;
  q.mouth.lip_color = {0.9, 0.1, 0.5};
  auto ta = toy::render_texture(p).pixels, tb = toy::render_texture(q).pixels;
  const auto& m = toy::region_masks();
  EXPECT_GT(metrics::masked_l2(ta, tb, m.mouth_mask), 0.0);
  EXPECT_EQ(metrics::masked_l2(ta, tb, m.brow_mask), 0.0);
}

TEST(PaletteHist, Examples) {
  auto a = rand_image(16, 16, 7), b = rand_image(16, 16, 8);
  EXPECT_EQ(metrics::palette_hist_distance(a, a), 0.0);
  EXPECT_EQ(metrics::palette_hist_distance(a, b), metrics::palette_hist_distance(b, a));
  EXPECT_NEAR(metrics::palette_hist_distance(filled(8, 0.1), filled(8, 0.9)), 2.0, 1e-12);
  // values inside one 1/16 bin are indistinguishable
  EXPECT_EQ(metrics::palette_hist_distance(filled(8, 0.51), filled(8, 0.55)), 0.0);
  // half the pixels moved to another bin
  Tensor c = filled(8, 0.1);
  for (std::size_t i = 0; i < c.size() / 2; ++i) c[i] = 0.9;
  EXPECT_NEAR(metrics::palette_hist_distance(filled(8, 0.1), c), 1.0, 1e-12);
  EXPECT_THROW(metrics::palette_hist_distance(Tensor({4, 4, 1}), Tensor({4, 4, 1})), ValidationError);
}

TEST(Masks, Helpers) {
  toy::Mask a{1, 0, 1, 0}, b{0, 0, 1, 1};
  EXPECT_EQ(metrics::mask_or(a, b), (toy::Mask{1, 0, 1, 1}));
  EXPECT_EQ(metrics::mask_not(a), (toy::Mask{0, 1, 0, 1}));
  EXPECT_THROW(metrics::mask_or(a, toy::Mask{1}), ValidationError);
}

TEST(MetricReport, AggregatesAndCsv) {
  metrics::MetricReport r;
  r.add("s0", {{"psnr", 20.0}, {"ssim", 0.5}});
  r.add("s1", {{"psnr", 30.0}, {"ssim", 0.7}});
  auto agg = r.aggregate();
  EXPECT_DOUBLE_EQ(agg["psnr"], 25.0);
  EXPECT_DOUBLE_EQ(agg["ssim"], 0.6);
  EXPECT_EQ(r.csv(), "sample_id,psnr,ssim\ns0,20,0.5\ns1,30,0.7\n");
  EXPECT_THROW(r.add("s2", {{"psnr", 1.0}}), ValidationError);
  EXPECT_THROW(r.add("s2", {{"psnr", 1.0}, {"ssim", 1.0}, {"x", 0.0}}), ValidationError);
}
