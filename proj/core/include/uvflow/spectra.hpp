#pragma once

// Radially averaged power spectra and the signal-to-noise picture of the
// forward process: SNR(w, t) = (1-t)^2 P(w) / (t^2 N(w)).

#include <cstdint>
#include <string>
#include <vector>

#include "uvflow/tensor.hpp"

namespace uvflow::spec {

enum class Window { none, hann };

struct RadialSpectrum {
  std::vector<double> freq;   // cycles per image, 1 .. floor(H/2)
  std::vector<double> power;  // mean |X(w)|^2 over the bin
  std::vector<int> count;     // DFT coefficients in the bin
  Window window = Window::none;
};

/// [H, W] as is, or [H, W, 3] reduced to Rec.601 luminance.
Tensor luminance(const Tensor& image);

/// Unnormalized 2-D DFT power |X(kx, ky)|^2, [H, W].
Tensor dft_power(const Tensor& gray);

/// Coefficients are binned by rounded radius; radius 0 (DC) and radii above
/// floor(H/2) are excluded.
RadialSpectrum power_spectrum(const Tensor& image, Window window = Window::none);

/// Bin-wise mean of several spectra with identical binning.
RadialSpectrum average(const std::vector<RadialSpectrum>& spectra);

struct AlphaFit {
  double alpha = 0.0;
  double r2 = 0.0;
  double intercept = 0.0;
  int bins_used = 0;
};

/// Least squares of log power on log frequency; alpha = -slope. Bins with
/// nonpositive power are skipped; fewer than 8 usable bins is an error.
AlphaFit fit_alpha(const RadialSpectrum& s);

/// Expected radial spectrum of unit Gaussian noise: the image area per bin.
RadialSpectrum white_noise_spectrum(int size);

struct SnrTable {
  std::vector<double> freq;
  std::vector<double> t;
  std::vector<std::vector<double>> snr;  // [bin][t]
};

SnrTable snr_curve(const RadialSpectrum& x0, const RadialSpectrum& noise, const std::vector<double>& t_grid);

/// Solves (1-t)^2 P = t^2 N: t* = r / (1 + r), r = sqrt(P/N); P = 0 gives 0.
double crossing_time(double p, double n);
/// Per bin, recovering P/N from the first column of the table.
std::vector<double> crossing_time(const SnrTable& table);

/// Real field whose DFT has magnitude |w|^(-alpha/2) (0 at DC) and random
/// phases taken from white noise.
Tensor power_law_field(int size, double alpha, std::uint64_t seed);

/// Parses "lo:hi:n" into n evenly spaced values.
std::vector<double> parse_grid(const std::string& text);

}  // namespace uvflow::spec
