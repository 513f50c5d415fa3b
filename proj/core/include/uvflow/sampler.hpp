#pragma once

// Euler integration of the rectified-flow ODE from noise (t = 1) to data
// (t = 0), with optional landmark-energy guidance on the denoised estimate.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "uvflow/flowdit.hpp"
#include "uvflow/landmarks.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::sample {

using Model = dit::FlowDiT<float>;
using Cache = dit::FeatureCache<float>;
using Spec = dit::InjectionSpec<float>;

struct GuidanceConfig {
  double eta = 0.5;
  int steps = 20;
  double guide_from_t = 0.8;
  double guide_to_t = 0.0;
  double grad_clip = 1.0;  // max gradient norm, <= 0 disables
  int inner_iters = 1;
  /// Differentiate the energy of x_t itself instead of the denoised estimate.
  bool literal_xt = false;

  void validate() const;
  bool active_at(double t) const { return eta > 0.0 && t <= guide_from_t && t >= guide_to_t; }
};

struct TraceStep {
  int step = 0;
  double t = 0.0;
  double energy = 0.0;     // E at the denoised estimate before any correction
  double grad_norm = 0.0;  // 0 on steps without guidance
  Tensor x0_hat;           // empty unless snapshots were requested
};

struct SampleTrace {
  std::vector<TraceStep> steps;
  /// Columns: step, t, energy, grad_norm.
  std::string csv() const;
};

/// x0 = x_t - t v.
Tensor x0_estimate(const Tensor& x_t, const Tensor& v, double t);
/// x_{t-dt} = x_t - dt v.
Tensor euler_step(const Tensor& x_t, double t, double dt, const Tensor& v);

/// Per-step feature plumbing for the editing passes. Step i of a run reads
/// inject_steps[i] and appends to record_steps.
struct StepHooks {
  const Spec* inject_all = nullptr;
  const std::vector<Spec>* inject_steps = nullptr;
  std::vector<Cache>* record_steps = nullptr;
  bool snapshots = false;
  /// Run only groups 1..group_k of the model (a truncated decode).
  int group_k = 3;
};

struct Result {
  Tensor texture;  // [H, W, 3] in [0,1]
  SampleTrace trace;
  int model_evals = 0;
};

/// Conditions on `portrait` ([H, W, 3] in [0,1]). The detector may be null
/// only when guidance is never active; with a detector every step's energy
/// is traced.
Result guided_sample(const Tensor& portrait, const Model& model, const lmk::Detector* detector,
                     const toy::LandmarkSet& l_star, const GuidanceConfig& cfg, std::uint64_t seed,
                     const StepHooks& hooks = {});

Tensor unguided_sample(const Tensor& portrait, const Model& model, int steps, std::uint64_t seed,
                       const StepHooks& hooks = {});

/// The starting noise x1 for a seed, [1, H, W, 3].
Tensor initial_noise(int image_size, std::uint64_t seed);

}  // namespace uvflow::sample
