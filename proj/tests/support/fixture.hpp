#pragma once

// Trained detector and flow model for the acceptance and integration suites.
// Both are trained from configs/default.json exactly as the CLI pipeline
// would, then cached in the build tree under a digest of the configuration.

#include <filesystem>
#include <memory>
#include <vector>

#include "run_config.hpp"
#include "uvflow/flowdit.hpp"
#include "uvflow/landmarks.hpp"
#include "uvflow/sampler.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::fixture {

struct Trained {
  cli::RunConfig cfg;
  lmk::Detector detector;
  sample::Model model;
  dit::CheckpointMeta meta;
  std::filesystem::path dir;
};

/// Loads the cached checkpoints, training them on first use.
const Trained& trained();

/// Held-out samples drawn from a master seed the training set never uses.
std::vector<toy::Sample> heldout(int n, const toy::DatasetConfig& gen, std::uint64_t stream = 0);

/// Guidance settings from the config plus the canonical landmark target.
sample::GuidanceConfig guidance(double eta);

}  // namespace uvflow::fixture
