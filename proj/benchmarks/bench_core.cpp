// Throughput of the hot paths at the desk configuration. Models are randomly
// initialised; speed does not depend on training.

#include <benchmark/benchmark.h>

#include "uvflow/landmarks.hpp"
#include "uvflow/metrics.hpp"
#include "uvflow/sampler.hpp"
#include "uvflow/spectra.hpp"
#include "uvflow/toyfaces.hpp"

using namespace uvflow;

namespace {

dit::ModelConfig desk_model() {
  dit::ModelConfig c;
  c.token_dim = 64;
  c.n_double = 2;
  c.n_single = 4;
  c.group_boundaries = {2, 4};
  return c;
}

const toy::Sample& sample0() {
  static const toy::Sample s = toy::make_sample(1, 0, toy::Style::flat, {});
  return s;
}

void BM_RenderSample(benchmark::State& st) {
  std::uint64_t i = 0;
  for (auto _ : st) benchmark::DoNotOptimize(toy::make_sample(1, i++, toy::Style::painterly, {}));
}
BENCHMARK(BM_RenderSample);

void BM_DetectorForward(benchmark::State& st) {
  lmk::Detector det({}, 1);
  for (auto _ : st) benchmark::DoNotOptimize(det.detect(sample0().texture.pixels));
}
BENCHMARK(BM_DetectorForward);

void BM_EnergyGrad(benchmark::State& st) {
  lmk::Detector det({}, 1);
  const auto l_star = toy::canonical_landmarks();
  for (auto _ : st) benchmark::DoNotOptimize(lmk::energy_grad(det, sample0().texture.pixels, l_star));
}
BENCHMARK(BM_EnergyGrad);

void BM_Velocity(benchmark::State& st) {
  sample::Model model(desk_model(), 1);
  const int k = static_cast<int>(st.range(0));
  TensorF x = sample::initial_noise(64, 3).cast<float>();
  TensorF cond = dit::to_model_space(sample0().portrait.pixels.reshaped({1, 64, 64, 3}).cast<float>());
  for (auto _ : st) benchmark::DoNotOptimize(model.velocity(x, {0.5}, cond, k));
}
BENCHMARK(BM_Velocity)->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_GuidedSample(benchmark::State& st) {
  sample::Model model(desk_model(), 1);
  lmk::Detector det({}, 1);
  sample::GuidanceConfig g;
  g.eta = static_cast<double>(st.range(0)) / 10.0;
  for (auto _ : st)
    benchmark::DoNotOptimize(
        sample::guided_sample(sample0().portrait.pixels, model, &det, toy::canonical_landmarks(), g, 7));
}
BENCHMARK(BM_GuidedSample)->Arg(0)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_PowerSpectrum(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(spec::power_spectrum(sample0().texture.pixels));
}
BENCHMARK(BM_PowerSpectrum);

void BM_Ssim(benchmark::State& st) {
  const auto& s = sample0();
  for (auto _ : st) benchmark::DoNotOptimize(metrics::ssim(s.texture.pixels, s.layers.t_skin.pixels));
}
BENCHMARK(BM_Ssim);

}  // namespace

BENCHMARK_MAIN();
