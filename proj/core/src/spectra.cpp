#include "uvflow/spectra.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>

#include "uvflow/error.hpp"
#include "uvflow/rng.hpp"

namespace uvflow::spec {

namespace {

std::mutex plan_mutex;  // fftw planning is not thread safe

// In-place 2-D complex DFT of a row-major size x size buffer.
void dft(std::vector<std::complex<double>>& buf, int size, int sign) {
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_plan plan;
  {
    std::lock_guard lock(plan_mutex);
    plan = fftw_plan_dft_2d(size, size, p, p, sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::lock_guard lock(plan_mutex);
  fftw_destroy_plan(plan);
}

int signed_freq(int k, int n) { return k <= n / 2 ? k : k - n; }

void require_square(const Tensor& g) {
  if (g.rank() != 2 || g.dim(0) != g.dim(1) || g.dim(0) < 2)
    throw ValidationError("spectrum needs a square image, got " + g.shape_str());
}

}  // namespace

Tensor luminance(const Tensor& image) {
  if (image.rank() == 2) return image;
  if (image.rank() != 3 || image.dim(2) != 3) throw ValidationError("expected [H, W] or [H, W, 3], got " + image.shape_str());
  Tensor g({image.dim(0), image.dim(1)});
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = 0.299 * image[3 * i] + 0.587 * image[3 * i + 1] + 0.114 * image[3 * i + 2];
  return g;
}

Tensor dft_power(const Tensor& gray) {
  require_square(gray);
  const int n = gray.dim(0);
  std::vector<std::complex<double>> buf(gray.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = gray[i];
  dft(buf, n, FFTW_FORWARD);
  Tensor p(gray.shape());
  for (std::size_t i = 0; i < buf.size(); ++i) p[i] = std::norm(buf[i]);
  return p;
}

RadialSpectrum power_spectrum(const Tensor& image, Window window) {
  Tensor g = luminance(image);
  require_square(g);
  const int n = g.dim(0);
  if (window == Window::hann) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / n));
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) g.at(y, x) *= w[y] * w[x];
  }
  Tensor p = dft_power(g);
  const int bins = n / 2;
  RadialSpectrum s;
  s.window = window;
  s.power.assign(bins, 0.0);
  s.count.assign(bins, 0);
  for (int ky = 0; ky < n; ++ky)
    for (int kx = 0; kx < n; ++kx) {
      double r = std::hypot(signed_freq(kx, n), signed_freq(ky, n));
      int b = static_cast<int>(std::lround(r));
      if (b < 1 || b > bins) continue;
      s.power[b - 1] += p.at(ky, kx);
      ++s.count[b - 1];
    }
  for (int b = 0; b < bins; ++b) {
    s.freq.push_back(b + 1);
    s.power[b] /= s.count[b];
  }
  return s;
}

RadialSpectrum average(const std::vector<RadialSpectrum>& spectra) {
  if (spectra.empty()) throw ValidationError("nothing to average");
  RadialSpectrum out = spectra.front();
  for (std::size_t i = 1; i < spectra.size(); ++i) {
    if (spectra[i].freq != out.freq) throw ValidationError("spectra have different binning");
    for (std::size_t b = 0; b < out.power.size(); ++b) out.power[b] += spectra[i].power[b];
  }
  for (double& p : out.power) p /= static_cast<double>(spectra.size());
  return out;
}

AlphaFit fit_alpha(const RadialSpectrum& s) {
  std::vector<double> lx, ly;
  for (std::size_t b = 0; b < s.power.size(); ++b) {
    if (s.power[b] > 0.0 && s.freq[b] > 0.0) {
      lx.push_back(std::log(s.freq[b]));
      ly.push_back(std::log(s.power[b]));
    }
  }
  const auto n = static_cast<double>(lx.size());
  if (lx.size() < 8) throw ValidationError("fit_alpha needs at least 8 bins with positive power, have " +
                                           std::to_string(lx.size()));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  AlphaFit f;
  const double slope = sxy / sxx;
  f.alpha = -slope;
  f.intercept = my - slope * mx;
  f.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  f.bins_used = static_cast<int>(lx.size());
  return f;
}

RadialSpectrum white_noise_spectrum(int size) {
  RadialSpectrum s;
  for (int b = 1; b <= size / 2; ++b) {
    s.freq.push_back(b);
    s.power.push_back(static_cast<double>(size) * size);
  }
  s.count.assign(s.freq.size(), 0);
  return s;
}

SnrTable snr_curve(const RadialSpectrum& x0, const RadialSpectrum& noise, const std::vector<double>& t_grid) {
  if (x0.freq != noise.freq) throw ValidationError("signal and noise spectra have different binning");
  SnrTable tab{x0.freq, t_grid, {}};
  for (double t : t_grid)
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("SNR is defined for t in (0, 1), got " + std::to_string(t));
  for (std::size_t b = 0; b < x0.freq.size(); ++b) {
    if (!(noise.power[b] > 0.0)) throw ValidationError("noise power must be positive");
    std::vector<double> row;
    for (double t : t_grid) row.push_back((1 - t) * (1 - t) * x0.power[b] / (t * t * noise.power[b]));
    tab.snr.push_back(std::move(row));
  }
  return tab;
}

double crossing_time(double p, double n) {
  if (!(n > 0.0)) throw ValidationError("noise power must be positive");
  if (p <= 0.0) return 0.0;
  double r = std::sqrt(p / n);
  return r / (1.0 + r);
}

std::vector<double> crossing_time(const SnrTable& table) {
  if (table.t.empty()) throw ValidationError("SNR table has no time columns");
  const double t = table.t.front();
  std::vector<double> out;
  for (const auto& row : table.snr) out.push_back(crossing_time(row.front() * t * t / ((1 - t) * (1 - t)), 1.0));
  return out;
}

Tensor power_law_field(int size, double alpha, std::uint64_t seed) {
  Rng rng(split_seed(seed, 0xF1E1D));
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(size) * size);
  for (auto& c : buf) c = gaussian(rng);
  dft(buf, size, FFTW_FORWARD);
  // keep the phases of real noise (Hermitian), impose the magnitude
  for (int ky = 0; ky < size; ++ky)
    for (int kx = 0; kx < size; ++kx) {
      auto& c = buf[static_cast<std::size_t>(ky) * size + kx];
      double r = std::hypot(signed_freq(kx, size), signed_freq(ky, size));
      double mag = std::abs(c);
      c = r == 0.0 || mag == 0.0 ? 0.0 : c / mag * std::pow(r, -alpha / 2.0);
    }
  dft(buf, size, FFTW_BACKWARD);
  Tensor out({size, size});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = buf[i].real() / (static_cast<double>(size) * size);
  return out;
}

std::vector<double> parse_grid(const std::string& text) {
  double lo = 0, hi = 0;
  int n = 0;
  char c1 = 0, c2 = 0;
  std::istringstream is(text);
  if (!(is >> lo >> c1 >> hi >> c2 >> n) || c1 != ':' || c2 != ':' || n < 1 || !is.eof())
    throw ValidationError("grid must look like lo:hi:n, got '" + text + "'");
  std::vector<double> g;
  for (int i = 0; i < n; ++i) g.push_back(n == 1 ? lo : lo + (hi - lo) * i / (n - 1));
  return g;
}

}  // namespace uvflow::spec
