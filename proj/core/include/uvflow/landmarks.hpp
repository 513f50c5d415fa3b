#pragma once

// Differentiable landmark detector l(.) on UV textures and the structural
// energy E(x) = sum_k |l_k(x) - l*_k|^2 used for guidance.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uvflow/autodiff.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::lmk {

inline const std::string kMagic("UVLMK\0", 6);
inline constexpr std::uint32_t kVersion = 1;

struct ConvSpec {
  int out_c;
  int stride;
  int dilation;
};

struct DetectorConfig {
  int image_size = 64;
  int num_landmarks = toy::kNumLandmarks;
  double tau = 0.1;
  /// 3x3 reflect-padded conv stack; two stride-2 stages give H/4 heatmaps.
  std::vector<ConvSpec> stack{{16, 1, 1}, {32, 2, 1}, {48, 2, 1}, {48, 1, 2}, {48, 1, 4}};

  int heatmap_size() const;
  ad::HeatmapGrid grid() const;
};

class Detector {
 public:
  explicit Detector(DetectorConfig cfg = {}, std::uint64_t seed = 0);

  const DetectorConfig& config() const { return cfg_; }
  std::vector<ad::Parameter>& params() { return params_; }
  const std::vector<ad::Parameter>& params() const { return params_; }
  std::size_t parameter_count() const;

  /// Heatmap logits [B, h, w, K] for images [B, H, W, 3]; pvars must follow
  /// the order of params().
  template <typename T>
  static ad::BasicVar<T> logits(const DetectorConfig& cfg, const std::vector<ad::BasicVar<T>>& pvars,
                                ad::BasicVar<T> images);

  /// Landmarks (pixel coordinates) as a Var [B, K, 2].
  ad::Var points(ad::Tape& tape, ad::Var images) const;

  toy::LandmarkSet detect(const Tensor& image) const;
  std::vector<toy::LandmarkSet> detect_batch(const Tensor& images) const;
  /// Normalized heatmaps [h, w, K] for one image.
  Tensor heatmaps(const Tensor& image) const;

 private:
  DetectorConfig cfg_;
  std::vector<ad::Parameter> params_;
};

/// Accepts H x W x 3 or 1 x H x W x 3; throws NumericError on non-finite input.
Tensor as_batch(const Tensor& image, int image_size);

double energy(const Detector& det, const Tensor& image, const toy::LandmarkSet& l_star);

struct EnergyGrad {
  double energy = 0.0;
  Tensor grad;  // same shape as the input image
  toy::LandmarkSet detected;
};

/// Exact reverse-mode gradient of the energy w.r.t. every input pixel.
EnergyGrad energy_grad(const Detector& det, const Tensor& image, const toy::LandmarkSet& l_star);

// ---------------------------------------------------------------------------
// Training

struct DetectorTrainConfig {
  int epochs = 20;
  int batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  int max_shift = 4;        // translation augmentation, px
  double max_noise = 0.08;  // per-sample Gaussian noise std drawn from [0, max_noise]
  double blur_prob = 0.25;
  double heatmap_sigma = 1.5;  // px
  int log_every = 0;           // 0 disables progress logging
};

struct DetectorTrainReport {
  long steps = 0;
  std::vector<double> losses;  // per step
};

Detector train_detector(const std::vector<Tensor>& textures, const std::vector<toy::LandmarkSet>& labels,
                        const DetectorTrainConfig& cfg, const DetectorConfig& arch = {},
                        DetectorTrainReport* report = nullptr);

/// Mean Euclidean landmark error in px over all images and landmarks.
double mean_landmark_error(const Detector& det, const std::vector<Tensor>& textures,
                           const std::vector<toy::LandmarkSet>& labels);

/// Shift by (dx, dy) px with edge-replicate padding.
Tensor translate(const Tensor& image, int dx, int dy);

/// Textures over the full validated parameter ranges, for detector training.
void detector_training_set(int n, std::uint64_t seed, std::vector<Tensor>& textures,
                           std::vector<toy::LandmarkSet>& labels);

void save_detector(const std::filesystem::path& path, const Detector& det, const std::string& extra_meta = "{}");
Detector load_detector(const std::filesystem::path& path);
std::string serialize_detector(const Detector& det, const std::string& extra_meta = "{}");

}  // namespace uvflow::lmk
