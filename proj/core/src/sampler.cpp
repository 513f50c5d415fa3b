#include "uvflow/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "uvflow/error.hpp"
#include "uvflow/rng.hpp"

namespace uvflow::sample {

void GuidanceConfig::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ValidationError("guidance eta must be finite and >= 0");
  if (steps < 1) throw ValidationError("sampler needs at least one step");
  if (!(guide_from_t <= 1.0 && guide_from_t >= guide_to_t && guide_to_t >= 0.0))
    throw ValidationError("guidance interval must satisfy 1 >= from >= to >= 0");
  if (inner_iters < 1) throw ValidationError("inner_iters must be >= 1");
}

std::string SampleTrace::csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "step,t,energy,grad_norm\n";
  for (const auto& s : steps) os << s.step << ',' << s.t << ',' << s.energy << ',' << s.grad_norm << '\n';
  return os.str();
}

Tensor x0_estimate(const Tensor& x_t, const Tensor& v, double t) {
  if (x_t.shape() != v.shape()) throw ValidationError("x0_estimate: shape mismatch");
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - t * v[i];
  return out;
}

Tensor euler_step(const Tensor& x_t, double t, double dt, const Tensor& v) {
  if (x_t.shape() != v.shape()) throw ValidationError("euler_step: shape mismatch");
  if (!(dt > 0.0) || t - dt < -1e-12) throw ValidationError("euler_step needs dt > 0 and t - dt >= 0");
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - dt * v[i];
  return out;
}

Tensor initial_noise(int image_size, std::uint64_t seed) {
  Rng rng(split_seed(seed, 0x5A3));
  Tensor x({1, image_size, image_size, 3});
  for (double& v : x.storage()) v = gaussian(rng);
  return x;
}

namespace {

Tensor to_image(const Tensor& model_space) {
  const auto& s = model_space.shape();
  Tensor out = model_space.reshaped({s[1], s[2], s[3]});
  for (double& v : out.storage()) v = 0.5 * (v + 1.0);
  return out;
}

}  // namespace

Result guided_sample(const Tensor& portrait, const Model& model, const lmk::Detector* detector,
                     const toy::LandmarkSet& l_star, const GuidanceConfig& cfg, std::uint64_t seed,
                     const StepHooks& hooks) {
  cfg.validate();
  const auto& mc = model.config();
  const int S = mc.image_size;
  if (portrait.shape() != std::vector<int>{S, S, 3})
    throw ValidationError("portrait must be " + std::to_string(S) + "x" + std::to_string(S) + "x3, got " +
                          portrait.shape_str());
  if (detector && detector->config().image_size != S)
    throw ValidationError("detector resolution " + std::to_string(detector->config().image_size) +
                          " does not match model resolution " + std::to_string(S));
  if (hooks.inject_steps && static_cast<int>(hooks.inject_steps->size()) != cfg.steps)
    throw ValidationError("injection has " + std::to_string(hooks.inject_steps->size()) + " steps, sampler runs " +
                          std::to_string(cfg.steps));
  if (hooks.inject_all && hooks.inject_steps) throw ValidationError("use either per-step or global injection");
  bool any_guidance = false;
  for (int i = 0; i < cfg.steps; ++i) any_guidance |= cfg.active_at(1.0 - static_cast<double>(i) / cfg.steps);
  if (any_guidance && !detector) throw ValidationError("guided sampling needs a landmark detector");

  const TensorF cond = dit::to_model_space(portrait.reshaped({1, S, S, 3}).cast<float>());
  Tensor x = initial_noise(S, seed);
  const double dt = 1.0 / cfg.steps;
  Result res;

  auto eval = [&](const Tensor& state, double t, int step) {
    const Spec* spec = hooks.inject_all ? hooks.inject_all
                       : hooks.inject_steps ? &(*hooks.inject_steps)[static_cast<std::size_t>(step)]
                                            : nullptr;
    Cache cache;
    Tensor v = model.velocity(state.cast<float>(), {t}, cond, hooks.group_k, spec, hooks.record_steps ? &cache : nullptr)
                   .template cast<double>();
    if (hooks.record_steps) hooks.record_steps->push_back(std::move(cache));
    ++res.model_evals;
    if (!v.all_finite()) throw NumericError("model velocity is not finite at step " + std::to_string(step));
    return v;
  };

  for (int i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / cfg.steps;
    Tensor v = eval(x, t, i);
    TraceStep ts;
    ts.step = i;
    ts.t = t;
    const bool guide = cfg.active_at(t);
    for (int it = 0; it < (guide ? cfg.inner_iters : 1); ++it) {
      if (it > 0) v = eval(x, t, i);
      if (!detector) break;
      // the estimate maps to the detector's [0,1] range with slope 1/2
      Tensor probe = cfg.literal_xt ? x : x0_estimate(x, v, t);
      if (!guide) {
        ts.energy = lmk::energy(*detector, to_image(probe), l_star);
        break;
      }
      auto eg = lmk::energy_grad(*detector, to_image(probe), l_star);
      if (!std::isfinite(eg.energy) || !eg.grad.all_finite())
        throw NumericError("non-finite guidance energy at step " + std::to_string(i));
      if (it == 0) ts.energy = eg.energy;
      double sq = 0.0;
      for (double& g : eg.grad.storage()) {
        g *= 0.5;
        sq += g * g;
      }
      const double norm = std::sqrt(sq);
      const double f = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
      for (std::size_t k = 0; k < x.size(); ++k) x[k] -= cfg.eta * f * eg.grad[k];
      if (it == 0) ts.grad_norm = norm;
    }
    if (hooks.snapshots) ts.x0_hat = to_image(x0_estimate(x, v, t));
    res.trace.steps.push_back(std::move(ts));
    x = euler_step(x, t, std::min(dt, t), v);
  }
  res.texture = to_image(x);
  for (double& p : res.texture.storage()) p = std::clamp(p, 0.0, 1.0);
  return res;
}

Tensor unguided_sample(const Tensor& portrait, const Model& model, int steps, std::uint64_t seed,
                       const StepHooks& hooks) {
  GuidanceConfig cfg;
  cfg.eta = 0.0;
  cfg.steps = steps;
  return guided_sample(portrait, model, nullptr, {}, cfg, seed, hooks).texture;
}

}  // namespace uvflow::sample
