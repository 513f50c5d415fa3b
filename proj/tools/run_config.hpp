#pragma once

// The checked-in run configuration: every default the CLI and the acceptance
// suite rely on, in one JSON file. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include "uvflow/flowdit.hpp"
#include "uvflow/landmarks.hpp"
#include "uvflow/sampler.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::cli {

struct DataSection {
  int n = 2000;
  std::uint64_t seed = 1;
  toy::DatasetConfig gen;
};

struct AblationSection {
  double eps = 0.0;
  std::string order = "single_forward";
  bool logits = false;
};

struct RunConfig {
  DataSection data;
  lmk::DetectorTrainConfig detector;
  dit::ModelConfig model;
  dit::TrainConfig train;
  sample::GuidanceConfig guidance;
  AblationSection ablation;

  static RunConfig parse(const std::string& json_text);
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical JSON (sorted keys, fixed number formatting).
  std::string to_json() const;
  /// sha256 of to_json().
  std::string digest() const;
};

/// $UVFLOW_CONFIG if set, else the configs/default.json the build was made from.
std::filesystem::path default_config_path();

}  // namespace uvflow::cli
