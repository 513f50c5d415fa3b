#pragma once

// Image and landmark metrics. All functions are pure and symmetric in their
// two image arguments.

#include <map>
#include <string>
#include <vector>

#include "uvflow/landmarks.hpp"
#include "uvflow/tensor.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::metrics {

/// 10 log10(1 / MSE) on [0,1] images; +infinity when the images are equal.
double psnr(const Tensor& a, const Tensor& b);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the luminance,
/// C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Tensor& a, const Tensor& b);

/// Mean Euclidean distance between corresponding landmarks.
double landmark_l2(const toy::LandmarkSet& a, const toy::LandmarkSet& b);
double landmark_l2(const Tensor& texture, const lmk::Detector& detector, const toy::LandmarkSet& l_star);
/// Mean absolute vertical landmark offset.
double landmark_y_error(const toy::LandmarkSet& a, const toy::LandmarkSet& b);

/// Mean squared difference over all channels of the pixels where mask != 0.
double masked_l2(const Tensor& a, const Tensor& b, const toy::Mask& mask);

/// L1 distance between normalized 16x16x16 RGB histograms, in [0, 2].
double palette_hist_distance(const Tensor& a, const Tensor& b);

/// Mask union / complement helpers.
toy::Mask mask_or(const toy::Mask& a, const toy::Mask& b);
toy::Mask mask_not(const toy::Mask& a);

struct MetricReport {
  std::vector<std::string> sample_ids;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // one per sample, aligned with columns
  std::string config_digest;

  void add(const std::string& id, const std::map<std::string, double>& values);
  /// Column means over all samples.
  std::map<std::string, double> aggregate() const;
  std::string csv() const;
};

}  // namespace uvflow::metrics
