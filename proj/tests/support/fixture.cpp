#include "fixture.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <mutex>

#include "uvflow/io.hpp"
#include "uvflow/rng.hpp"
#include "uvflow/runtime.hpp"

#ifndef UVFLOW_FIXTURE_DIR
#define UVFLOW_FIXTURE_DIR "fixtures"
#endif

namespace uvflow::fixture {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kHeldoutSeed = 0x4E1D07;

std::string key(const cli::RunConfig& cfg) {
  std::string s = cfg.to_json() + "|layout " + std::to_string(toy::kLayoutVersion) + "|dit " +
                  std::to_string(dit::kVersion) + "|lmk " + std::to_string(lmk::kVersion);
  return io::sha256_hex(s.data(), s.size()).substr(0, 16);
}

void log(const std::string& msg) { std::fprintf(stderr, "[fixture] %s\n", msg.c_str()); }

std::unique_ptr<Trained> build() {
  configure_runtime();
  auto cfg = cli::RunConfig::load(cli::default_config_path());
  const char* env = std::getenv("UVFLOW_FIXTURE_DIR");
  fs::path dir = fs::path(env && *env ? env : UVFLOW_FIXTURE_DIR) / key(cfg);
  fs::create_directories(dir);
  const fs::path det_path = dir / "detector.ckpt", model_path = dir / "model.ckpt";

  std::vector<toy::Sample> data;
  auto ensure_data = [&] {
    if (data.empty()) data = toy::generate_samples(cfg.data.n, cfg.data.seed, cfg.data.gen);
  };

  if (!fs::exists(det_path)) {
    ensure_data();
    std::vector<Tensor> tex;
    std::vector<toy::LandmarkSet> lab;
    for (const auto& s : data) {
      tex.push_back(s.texture.pixels);
      lab.push_back(s.landmarks);
    }
    log("training detector on " + std::to_string(tex.size()) + " textures");
    auto t0 = std::chrono::steady_clock::now();
    auto det = lmk::train_detector(tex, lab, cfg.detector);
    const double err = lmk::mean_landmark_error(det, tex, lab);
    lmk::save_detector(det_path, det, "{\"train_error_px\":" + std::to_string(err) + "}");
    log("detector done in " +
        std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  }
  if (!fs::exists(model_path)) {
    ensure_data();
    dit::TrainData td;
    for (const auto& s : data) {
      td.cond.push_back(s.portrait.pixels);
      td.x0.push_back(s.texture.pixels);
      td.t_skin.push_back(s.layers.t_skin.pixels);
      td.t_skin_mouth.push_back(s.layers.t_skin_mouth.pixels);
    }
    auto tc = cfg.train;
    double window = 0.0;
    auto t0 = std::chrono::steady_clock::now();
    tc.on_step = [&](long step, double loss, int) {
      window += loss;
      if ((step + 1) % 100 == 0) {
        const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log("model step " + std::to_string(step + 1) + "/" + std::to_string(tc.steps) + " loss " +
            std::to_string(window / 100) + " elapsed " + std::to_string(static_cast<int>(el)) + " s");
        window = 0.0;
      }
    };
    sample::Model model(cfg.model, tc.seed);
    log("training flow model, " + std::to_string(model.parameter_count()) + " parameters");
    auto rep = dit::train(model, td, tc);
    dit::CheckpointMeta meta;
    meta.step = tc.steps;
    meta.rng_state = rep.rng_state;
    meta.disentangled = tc.disentangle;
    dit::save_model(model_path, model, meta);
  }

  dit::CheckpointMeta meta;
  auto model = dit::load_model<float>(model_path, &meta);
  auto t = std::make_unique<Trained>(Trained{cfg, lmk::load_detector(det_path), std::move(model), meta, dir});
  return t;
}

}  // namespace

const Trained& trained() {
  static std::once_flag once;
  static std::unique_ptr<Trained> t;
  std::call_once(once, [] { t = build(); });
  return *t;
}

std::vector<toy::Sample> heldout(int n, const toy::DatasetConfig& gen, std::uint64_t stream) {
  return toy::generate_samples(n, split_seed(kHeldoutSeed, stream), gen);
}

sample::GuidanceConfig guidance(double eta) {
  auto g = trained().cfg.guidance;
  g.eta = eta;
  return g;
}

}  // namespace uvflow::fixture
