#pragma once

// Attention ablation sweeps, style transfer by single-stream feature
// replacement, group-truncation training and group-wise regional editing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "uvflow/flowdit.hpp"
#include "uvflow/sampler.hpp"

namespace uvflow::edit {

/// Three consecutive layer ranges split at the model's group boundaries.
/// Group 1 carries skin and coarse layout, group 2 the mouth, group 3 the brows.
struct GroupSpec {
  std::array<std::vector<int>, 3> groups;
  std::array<std::string, 3> labels{"skin", "mouth", "brow"};

  static GroupSpec from_config(const dit::ModelConfig& cfg);
  /// Disjoint, ordered and covering 0..layers-1.
  void validate(int layers) const;
};

enum class Region { mouth, brow };
Region parse_region(const std::string& name);
std::set<Region> parse_regions(const std::string& csv);

struct EditRequest {
  Tensor source;     // portrait [H, W, 3]
  Tensor reference;  // portrait [H, W, 3]
  std::set<Region> regions;
};

/// Shared sampling setup for the editing passes.
struct SamplerSetup {
  const lmk::Detector* detector = nullptr;  // null: unguided
  toy::LandmarkSet l_star;
  sample::GuidanceConfig guidance;
  std::uint64_t seed = 0;

  sample::Result run(const Tensor& portrait, const sample::Model& model, const sample::StepHooks& hooks = {}) const;
};

// ---------------------------------------------------------------------------
// Ablation

/// "single_forward", "single_reverse", "double_forward", "all_forward" or
/// "all_reverse".
std::vector<int> layer_order(const dit::ModelConfig& cfg, const std::string& name);

struct AblationStep {
  int k = 0;                // number of ablated layers
  std::vector<int> layers;  // the ablated layers
  double nose = 0.0;        // masked L2 against the k = 0 output
  double eyes = 0.0;
  double mouth = 0.0;
  double total = 0.0;       // whole-image mean squared difference
  Tensor texture;
};

struct AblationResult {
  std::vector<AblationStep> steps;
  /// First k at which each region's degradation reaches half of its maximum
  /// over the sweep (nose, eyes, mouth); -1 when a region never changes.
  std::array<int, 3> onset{-1, -1, -1};
  std::string csv() const;
};

AblationResult ablation_sweep(const Tensor& portrait, const sample::Model& model, const SamplerSetup& setup,
                              const std::vector<int>& order, double eps, bool logits = false);

// ---------------------------------------------------------------------------
// Feature replacement

/// Records every step's features on the identity pass, then samples the style
/// portrait with all single-stream attention outputs replaced step by step.
Tensor style_transfer(const Tensor& identity, const Tensor& style, const sample::Model& model,
                      const SamplerSetup& setup);

/// Replaces the attention outputs of the layers named by `regions` with those
/// of the reference pass. `disentangled` is the checkpoint's training flag.
Tensor regional_edit(const EditRequest& req, const sample::Model& model, bool disentangled, const SamplerSetup& setup);

/// Baseline: every layer's attention output comes from the reference pass.
Tensor full_fuse(const EditRequest& req, const sample::Model& model, const SamplerSetup& setup);

/// Per-step replacement specs built from a recorded trajectory.
std::vector<sample::Spec> replay(const std::vector<sample::Cache>& caches, const std::vector<int>& layers);

// ---------------------------------------------------------------------------
// Training

/// Group-truncation training; saves a checkpoint flagged as disentangled.
dit::TrainReport disentangle_train(sample::Model& model, const dit::TrainData& data, dit::TrainConfig cfg,
                                   const std::filesystem::path& out);

}  // namespace uvflow::edit
