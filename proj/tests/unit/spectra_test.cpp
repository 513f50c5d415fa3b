#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "uvflow/error.hpp"
#include "uvflow/spectra.hpp"
#include "uvflow/toyfaces.hpp"

using namespace uvflow;

namespace {

Tensor gauss_image(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor t({n, n});
  for (double& v : t.storage()) v = g(rng);
  return t;
}

}  // namespace

TEST(PowerSpectrum, ConstantImageHasNoAcPower) {
  Tensor c({32, 32});
  for (double& v : c.storage()) v = 0.7;
  auto s = spec::power_spectrum(c);
  ASSERT_EQ(s.power.size(), 16u);
  for (std::size_t b = 0; b < s.power.size(); ++b) {
    EXPECT_EQ(s.freq[b], b + 1.0);
    EXPECT_LT(s.power[b], 1e-18);
  }
}

TEST(PowerSpectrum, SinusoidHitsOneBin) {
  const int n = 32, k = 5;
  Tensor img({n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) img.at(y, x) = std::cos(2 * std::numbers::pi * k * x / n);
  auto s = spec::power_spectrum(img);
  const double peak = s.power[k - 1];
  EXPECT_GT(peak, 0.0);
  for (std::size_t b = 0; b < s.power.size(); ++b)
    if (static_cast<int>(b) != k - 1) EXPECT_LT(s.power[b], 1e-10 * peak);
}

TEST(PowerSpectrum, WhiteNoiseIsFlat) {
  std::mt19937_64 rng(17);
  std::vector<spec::RadialSpectrum> all;
  for (int i = 0; i < 1000; ++i) all.push_back(spec::power_spectrum(gauss_image(32, rng)));
  auto mean = spec::average(all);
  auto analytic = spec::white_noise_spectrum(32);
  ASSERT_EQ(mean.freq, analytic.freq);
  for (std::size_t b = 0; b < mean.power.size(); ++b) EXPECT_NEAR(mean.power[b] / analytic.power[b], 1.0, 0.05) << b;
  EXPECT_NEAR(spec::fit_alpha(mean).alpha, 0.0, 0.1);
}

TEST(PowerSpectrum, ParsevalAndErrors) {
  std::mt19937_64 rng(3);
  Tensor img = gauss_image(24, rng);
  Tensor p = spec::dft_power(img);
  double energy = 0.0, spectral = 0.0;
  for (double v : img.storage()) energy += v * v;
  for (double v : p.storage()) spectral += v;
  EXPECT_NEAR(spectral / (24.0 * 24.0), energy, 1e-6 * energy);
  EXPECT_THROW(spec::power_spectrum(Tensor({16, 8})), ValidationError);
  EXPECT_THROW(spec::power_spectrum(Tensor({4, 4, 2})), ValidationError);
}

TEST(PowerSpectrum, ColorUsesLuminance) {
  std::mt19937_64 rng(8);
  Tensor rgb({16, 16, 3});
  std::uniform_real_distribution<double> u;
  for (double& v : rgb.storage()) v = u(rng);
  auto a = spec::power_spectrum(rgb);
  auto b = spec::power_spectrum(spec::luminance(rgb));
  EXPECT_EQ(a.power, b.power);
  auto h = spec::power_spectrum(rgb, spec::Window::hann);
  EXPECT_EQ(h.window, spec::Window::hann);
  EXPECT_NE(h.power, a.power);
}

TEST(FitAlpha, RecoversConstructedPowerLaw) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto field = spec::power_law_field(64, 2.0, seed);
    auto fit = spec::fit_alpha(spec::power_spectrum(field));
    EXPECT_NEAR(fit.alpha, 2.0, 0.1) << seed;
    EXPECT_GT(fit.r2, 0.95);
    EXPECT_EQ(fit.bins_used, 32);
  }
  auto f3 = spec::fit_alpha(spec::power_spectrum(spec::power_law_field(64, 3.0, 5)));
  EXPECT_NEAR(f3.alpha, 3.0, 0.1);
}

TEST(FitAlpha, ScaleInvariant) {
  auto field = spec::power_law_field(32, 2.0, 9);
  Tensor scaled = field;
  for (double& v : scaled.storage()) v *= 3.0;
  auto a = spec::fit_alpha(spec::power_spectrum(field));
  auto b = spec::fit_alpha(spec::power_spectrum(scaled));
  EXPECT_NEAR(a.alpha, b.alpha, 1e-10);
  EXPECT_NEAR(b.intercept - a.intercept, std::log(9.0), 1e-10);
}

TEST(FitAlpha, NeedsEightBins) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(spec::fit_alpha(spec::power_spectrum(gauss_image(8, rng))), ValidationError);
  auto s = spec::power_spectrum(gauss_image(32, rng));
  for (std::size_t b = 0; b < 9; ++b) s.power[b] = 0.0;  // skipped, 7 left
  EXPECT_THROW(spec::fit_alpha(s), ValidationError);
  s.power[0] = 1.0;
  EXPECT_EQ(spec::fit_alpha(s).bins_used, 8);
}

TEST(SnrCurve, Identities) {
  auto x0 = spec::power_spectrum(spec::power_law_field(32, 2.0, 4));
  auto noise = spec::white_noise_spectrum(32);
  std::vector<double> ts{0.2, 0.5, 0.7};
  auto tab = spec::snr_curve(x0, noise, ts);
  ASSERT_EQ(tab.snr.size(), x0.freq.size());
  for (std::size_t b = 0; b < tab.snr.size(); ++b) {
    EXPECT_NEAR(tab.snr[b][1], x0.power[b] / noise.power[b], 1e-15);
    const double ratio = std::pow((1 - 0.7) * 0.2 / ((1 - 0.2) * 0.7), 2);
    EXPECT_NEAR(tab.snr[b][2] / tab.snr[b][0], ratio, 1e-12);
  }
  auto flat = noise;
  for (double& p : flat.power) p *= 0.3;
  auto ft = spec::snr_curve(flat, noise, ts);
  for (std::size_t b = 1; b < ft.snr.size(); ++b)
    for (std::size_t j = 0; j < ts.size(); ++j) EXPECT_DOUBLE_EQ(ft.snr[b][j], ft.snr[0][j]);
  EXPECT_THROW(spec::snr_curve(x0, noise, {0.0}), ValidationError);
  EXPECT_THROW(spec::snr_curve(x0, noise, {1.0}), ValidationError);
  EXPECT_THROW(spec::snr_curve(x0, spec::white_noise_spectrum(16), ts), ValidationError);
}

TEST(CrossingTime, ClosedForm) {
  EXPECT_DOUBLE_EQ(spec::crossing_time(5.0, 5.0), 0.5);
  EXPECT_NEAR(spec::crossing_time(4.0, 1.0), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(spec::crossing_time(0.0, 1.0), 0.0);
  EXPECT_THROW(spec::crossing_time(1.0, 0.0), ValidationError);
  // the crossing time really is where the table's SNR equals 1
  const double t = spec::crossing_time(2.5, 0.4);
  EXPECT_NEAR((1 - t) * (1 - t) * 2.5 / (t * t * 0.4), 1.0, 1e-12);
}

TEST(CrossingTime, PowerLawDecreasesWithFrequency) {
  auto x0 = spec::power_spectrum(spec::power_law_field(64, 2.0, 12));
  auto noise = spec::white_noise_spectrum(64);
  auto tab = spec::snr_curve(x0, noise, spec::parse_grid("0.05:0.95:19"));
  auto ts = spec::crossing_time(tab);
  ASSERT_EQ(ts.size(), 32u);
  for (std::size_t b = 0; b < ts.size(); ++b) {
    EXPECT_NEAR(ts[b], spec::crossing_time(x0.power[b], noise.power[b]), 1e-12);
    if (b > 0) EXPECT_LT(ts[b], ts[b - 1]) << b;
  }
}

TEST(CrossingTime, ToyTexturesWithWhiteNoise) {
  auto samples = toy::generate_samples(16, 5);
  std::vector<spec::RadialSpectrum> all;
  for (const auto& s : samples) {
    Tensor x = s.texture.pixels;
    for (double& v : x.storage()) v = 2 * v - 1;
    all.push_back(spec::power_spectrum(x));
  }
  auto mean = spec::average(all);
  auto ts = spec::crossing_time(spec::snr_curve(mean, spec::white_noise_spectrum(64), {0.5}));
  EXPECT_GT(spec::fit_alpha(mean).alpha, 0.0);
  // the average toy spectrum is not monotone bin by bin, so only the trend is checked here
  EXPECT_GT(ts.front(), ts.back());
}

TEST(ParseGrid, Forms) {
  auto g = spec::parse_grid("0.05:0.95:19");
  ASSERT_EQ(g.size(), 19u);
  EXPECT_DOUBLE_EQ(g.front(), 0.05);
  EXPECT_DOUBLE_EQ(g.back(), 0.95);
  EXPECT_NEAR(g[1], 0.1, 1e-15);
  EXPECT_EQ(spec::parse_grid("0.3:0.9:1"), std::vector<double>{0.3});
  EXPECT_THROW(spec::parse_grid("0.1-0.9-3"), ValidationError);
  EXPECT_THROW(spec::parse_grid("0.1:0.9:0"), ValidationError);
  EXPECT_THROW(spec::parse_grid("0.1:0.9:3x"), ValidationError);
}
