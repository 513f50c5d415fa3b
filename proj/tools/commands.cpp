#include "commands.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>

#include "manifest.hpp"
#include "run_config.hpp"
#include "uvflow/editkit.hpp"
#include "uvflow/error.hpp"
#include "uvflow/io.hpp"
#include "uvflow/metrics.hpp"
#include "uvflow/rng.hpp"
#include "uvflow/runtime.hpp"
#include "uvflow/spectra.hpp"

namespace uvflow::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
  int threads = 1;
  bool deterministic = false;
  std::string log_level = "info";
  std::string config;
};

std::string sample_name(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05llu", static_cast<unsigned long long>(index));
  return buf;
}

bool is_dataset(const fs::path& p) { return fs::is_directory(p) && fs::exists(p / "manifest.tsv"); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& s) {
  ensure_parent(p);
  io::write_atomic(p, s);
}

fs::path manifest_for(const fs::path& out) {
  return fs::is_directory(out) ? out / "run_manifest.json" : fs::path(out.string() + ".manifest.json");
}

class Run {
 public:
  Run(const Globals& g, int argc, char** argv) : g_(g), manifest_(argc, argv) {
    cfg_ = RunConfig::load(g.config.empty() ? default_config_path() : fs::path(g.config));
    manifest_.set_config_digest(cfg_.digest());
    manifest_.set_value("threads", std::to_string(threads()));
    manifest_.set_value("deterministic", g.deterministic ? "true" : "false");
  }
  RunConfig& cfg() { return cfg_; }
  RunManifest& manifest() { return manifest_; }
  int threads() const { return g_.deterministic ? 1 : std::max(1, g_.threads); }

  void finish(const fs::path& main_output) {
    manifest_.write(manifest_for(main_output));
    spdlog::info("outputs digest {}", manifest_.output_digest());
  }

 private:
  Globals g_;
  RunConfig cfg_;
  RunManifest manifest_;
};

std::vector<toy::Sample> load_samples(const fs::path& dir, int limit = 0) {
  if (!is_dataset(dir)) throw ValidationError(dir.string() + " is not a dataset directory (no manifest.tsv)");
  auto s = toy::load_dataset(dir);
  if (limit > 0 && static_cast<int>(s.size()) > limit) s.resize(static_cast<std::size_t>(limit));
  return s;
}

std::optional<lmk::Detector> maybe_detector(const std::string& path, RunManifest& m) {
  if (path.empty()) return std::nullopt;
  m.add_input(path);
  return lmk::load_detector(path);
}

sample::Model load_flow(const std::string& path, RunManifest& m, dit::CheckpointMeta* meta = nullptr) {
  m.add_input(path);
  return dit::load_model<float>(path, meta);
}

edit::SamplerSetup make_setup(const RunConfig& cfg, const std::optional<lmk::Detector>& det, std::uint64_t seed) {
  edit::SamplerSetup s;
  s.detector = det ? &*det : nullptr;
  s.l_star = toy::canonical_landmarks();
  s.guidance = cfg.guidance;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------

void cmd_gen(Run& run, const fs::path& out, std::optional<int> n, std::optional<std::uint64_t> seed) {
  auto& c = run.cfg();
  const int count = n.value_or(c.data.n);
  const std::uint64_t s = seed.value_or(c.data.seed);
  run.manifest().set_seed("data", s);
  spdlog::info("generating {} samples (seed {}) into {}", count, s, out.string());
  toy::dataset_gen(count, s, out, c.data.gen, run.threads());
  run.manifest().add_output(out);
  run.finish(out);
}

void cmd_train_landmarks(Run& run, const fs::path& data, const fs::path& out, std::optional<int> epochs,
                         std::optional<std::uint64_t> seed) {
  auto tc = run.cfg().detector;
  if (epochs) tc.epochs = *epochs;
  if (seed) tc.seed = *seed;
  tc.log_every = 50;
  run.manifest().set_seed("detector", tc.seed);
  run.manifest().add_input(data);
  auto samples = load_samples(data);
  std::vector<Tensor> tex;
  std::vector<toy::LandmarkSet> lab;
  for (const auto& s : samples) {
    tex.push_back(s.texture.pixels);
    lab.push_back(s.landmarks);
  }
  spdlog::info("training landmark detector on {} textures, {} epochs", tex.size(), tc.epochs);
  lmk::DetectorTrainReport rep;
  auto det = lmk::train_detector(tex, lab, tc, {}, &rep);
  const double err = lmk::mean_landmark_error(det, tex, lab);
  spdlog::info("{} steps, training-set landmark error {:.3f} px", rep.steps, err);
  ensure_parent(out);
  lmk::save_detector(out, det, json{{"train_error_px", err}, {"epochs", tc.epochs}}.dump());
  run.manifest().set_value("train_error_px", std::to_string(err));
  run.manifest().add_output(out);
  run.finish(out);
}

struct TrainFlags {
  std::optional<long> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> p;
  bool disentangle = false;
};

void cmd_train_model(Run& run, const fs::path& data, const fs::path& out, const TrainFlags& f) {
  auto& c = run.cfg();
  auto tc = c.train;
  if (f.steps) tc.steps = *f.steps;
  if (f.seed) tc.seed = *f.seed;
  if (f.p) tc.p = *f.p;
  tc.disentangle = tc.disentangle || f.disentangle;
  run.manifest().set_seed("train", tc.seed);
  run.manifest().add_input(data);
  auto samples = load_samples(data);
  dit::TrainData td;
  for (const auto& s : samples) {
    td.cond.push_back(s.portrait.pixels);
    td.x0.push_back(s.texture.pixels);
    td.t_skin.push_back(s.layers.t_skin.pixels);
    td.t_skin_mouth.push_back(s.layers.t_skin_mouth.pixels);
  }
  sample::Model model(c.model, tc.seed);
  spdlog::info("training flow model ({} parameters) for {} steps on {} samples{}", model.parameter_count(), tc.steps,
               td.x0.size(), tc.disentangle ? fmt::format(", group truncation p={}", tc.p) : "");
  double window = 0.0;
  tc.on_step = [&](long step, double loss, int) {
    window += loss;
    if ((step + 1) % 50 == 0) {
      spdlog::info("step {} loss {:.4f}", step + 1, window / 50);
      window = 0.0;
    }
  };
  auto rep = dit::train(model, td, tc);
  dit::CheckpointMeta meta;
  meta.step = tc.steps;
  meta.rng_state = rep.rng_state;
  meta.disentangled = tc.disentangle;
  meta.extra = json{{"config_digest", c.digest()}, {"seed", tc.seed}, {"p", tc.p}}.dump();
  ensure_parent(out);
  dit::save_model(out, model, meta);
  run.manifest().add_output(out);
  run.finish(out);
}

struct SampleFlags {
  std::string model, detector, input, out, trace;
  std::optional<double> eta;
  std::optional<int> steps;
  std::uint64_t seed = 0;
  int limit = 0;
};

void cmd_sample(Run& run, const SampleFlags& f) {
  auto& c = run.cfg();
  if (f.eta) c.guidance.eta = *f.eta;
  if (f.steps) c.guidance.steps = *f.steps;
  c.guidance.validate();
  auto model = load_flow(f.model, run.manifest());
  auto det = maybe_detector(f.detector, run.manifest());
  if (!det && c.guidance.eta > 0) {
    spdlog::warn("no detector given; sampling without guidance");
    c.guidance.eta = 0.0;
  }
  run.manifest().set_seed("sample", f.seed);
  run.manifest().add_input(f.input);
  const auto l_star = toy::canonical_landmarks();
  const fs::path out(f.out);
  if (is_dataset(f.input)) {
    auto samples = load_samples(f.input, f.limit);
    fs::create_directories(out);
    std::string traces;
    for (const auto& s : samples) {
      const std::uint64_t seed = split_seed(f.seed, s.index);
      auto r = sample::guided_sample(s.portrait.pixels, model, det ? &*det : nullptr, l_star, c.guidance, seed);
      io::write_png(out / (sample_name(s.index) + ".png"), r.texture);
      if (!f.trace.empty()) {
        auto csv = r.trace.csv();
        if (traces.empty()) traces = "sample_id," + csv.substr(0, csv.find('\n') + 1);
        std::istringstream is(csv.substr(csv.find('\n') + 1));
        for (std::string line; std::getline(is, line);) traces += sample_name(s.index) + "," + line + "\n";
      }
      spdlog::info("{} done", sample_name(s.index));
    }
    if (!f.trace.empty()) {
      write_text(f.trace, traces);
      run.manifest().add_output(f.trace);
    }
  } else {
    auto portrait = io::read_png(f.input);
    auto r = sample::guided_sample(portrait, model, det ? &*det : nullptr, l_star, c.guidance, f.seed);
    ensure_parent(out);
    io::write_png(out, r.texture);
    if (!f.trace.empty()) {
      write_text(f.trace, r.trace.csv());
      run.manifest().add_output(f.trace);
    }
  }
  run.manifest().add_output(out);
  run.finish(out);
}

struct PairFlags {
  std::string model, detector, a, b, out, metrics, regions;
  std::uint64_t seed = 0;
  std::optional<int> steps;
  std::optional<double> eta;
};

void pair_common(Run& run, PairFlags& f) {
  auto& c = run.cfg();
  if (f.eta) c.guidance.eta = *f.eta;
  if (f.steps) c.guidance.steps = *f.steps;
  if (f.detector.empty()) c.guidance.eta = 0.0;
  c.guidance.validate();
  run.manifest().set_seed("sample", f.seed);
  run.manifest().add_input(f.a);
  run.manifest().add_input(f.b);
}

void cmd_transfer(Run& run, PairFlags f) {
  pair_common(run, f);
  auto model = load_flow(f.model, run.manifest());
  auto det = maybe_detector(f.detector, run.manifest());
  auto setup = make_setup(run.cfg(), det, f.seed);
  auto identity = io::read_png(f.a), style = io::read_png(f.b);
  auto out = edit::style_transfer(identity, style, model, setup);
  ensure_parent(f.out);
  io::write_png(f.out, out);
  run.manifest().add_output(f.out);
  if (!f.metrics.empty()) {
    // compare against the plain reconstructions of both inputs
    auto rec_id = setup.run(identity, model).texture, rec_st = setup.run(style, model).texture;
    metrics::MetricReport rep;
    std::map<std::string, double> row{{"palette_to_identity", metrics::palette_hist_distance(out, rec_id)},
                                      {"palette_to_style", metrics::palette_hist_distance(out, rec_st)}};
    if (det) {
      row["landmark_l2_to_identity"] = metrics::landmark_l2(det->detect(out), det->detect(rec_id));
      row["landmark_l2_to_style"] = metrics::landmark_l2(det->detect(out), det->detect(rec_st));
    }
    rep.add("transfer", row);
    write_text(f.metrics, rep.csv());
    run.manifest().add_output(f.metrics);
  }
  run.finish(f.out);
}

void cmd_edit(Run& run, PairFlags f) {
  pair_common(run, f);
  dit::CheckpointMeta meta;
  auto model = load_flow(f.model, run.manifest(), &meta);
  auto det = maybe_detector(f.detector, run.manifest());
  auto setup = make_setup(run.cfg(), det, f.seed);
  edit::EditRequest req{io::read_png(f.a), io::read_png(f.b), edit::parse_regions(f.regions)};
  auto out = edit::regional_edit(req, model, meta.disentangled, setup);
  ensure_parent(f.out);
  io::write_png(f.out, out);
  run.manifest().add_output(f.out);
  if (!f.metrics.empty()) {
    auto rec_src = setup.run(req.source, model).texture, rec_ref = setup.run(req.reference, model).texture;
    const auto& m = toy::region_masks();
    auto in = metrics::mask_or(m.mouth_mask, m.brow_mask);
    metrics::MetricReport rep;
    rep.add("edit", {{"mouth_l2_to_reference", metrics::masked_l2(out, rec_ref, m.mouth_mask)},
                     {"brow_l2_to_reference", metrics::masked_l2(out, rec_ref, m.brow_mask)},
                     {"off_region_l2_to_source", metrics::masked_l2(out, rec_src, metrics::mask_not(in))}});
    write_text(f.metrics, rep.csv());
    run.manifest().add_output(f.metrics);
  }
  run.finish(f.out);
}

void cmd_snr(Run& run, const fs::path& data, const fs::path& out, const std::string& tgrid, bool hann, int limit) {
  run.manifest().add_input(data);
  auto samples = load_samples(data, limit);
  const auto window = hann ? spec::Window::hann : spec::Window::none;
  std::vector<spec::RadialSpectrum> all;
  for (const auto& s : samples) {
    Tensor x = s.texture.pixels;
    for (double& v : x.storage()) v = 2.0 * v - 1.0;  // model space
    all.push_back(spec::power_spectrum(x, window));
  }
  auto mean = spec::average(all);
  const int size = samples.front().texture.pixels.dim(0);
  auto grid = spec::parse_grid(tgrid);
  auto table = spec::snr_curve(mean, spec::white_noise_spectrum(size), grid);
  auto tstar = spec::crossing_time(table);
  std::ostringstream os;
  os.precision(10);
  os << "bin_freq,power";
  for (double t : grid) os << ",snr_t" << t;
  os << ",t_star\n";
  for (std::size_t b = 0; b < table.freq.size(); ++b) {
    os << table.freq[b] << ',' << mean.power[b];
    for (double v : table.snr[b]) os << ',' << v;
    os << ',' << tstar[b] << '\n';
  }
  write_text(out, os.str());
  auto fit = spec::fit_alpha(mean);
  spdlog::info("{} textures: alpha {:.3f} (r2 {:.3f})", samples.size(), fit.alpha, fit.r2);
  run.manifest().set_value("alpha", std::to_string(fit.alpha));
  run.manifest().set_value("alpha_r2", std::to_string(fit.r2));
  run.manifest().add_output(out);
  run.finish(out);
}

struct AblationFlags {
  std::string model, detector, input, out, order, image_dir;
  std::optional<double> eps;
  std::optional<int> steps;
  bool logits = false;
  std::uint64_t seed = 0;
};

void cmd_ablation(Run& run, AblationFlags f) {
  auto& c = run.cfg();
  if (f.steps) c.guidance.steps = *f.steps;
  if (f.detector.empty()) c.guidance.eta = 0.0;
  const double eps = f.eps.value_or(c.ablation.eps);
  const std::string order_name = f.order.empty() ? c.ablation.order : f.order;
  const bool logits = f.logits || c.ablation.logits;
  auto model = load_flow(f.model, run.manifest());
  auto det = maybe_detector(f.detector, run.manifest());
  run.manifest().add_input(f.input);
  run.manifest().set_seed("sample", f.seed);
  auto setup = make_setup(c, det, f.seed);
  auto order = edit::layer_order(model.config(), order_name);
  auto res = edit::ablation_sweep(io::read_png(f.input), model, setup, order, eps, logits);
  write_text(f.out, res.csv());
  run.manifest().add_output(f.out);
  if (!f.image_dir.empty()) {
    fs::create_directories(f.image_dir);
    for (const auto& s : res.steps) io::write_png(fs::path(f.image_dir) / ("k" + std::to_string(s.k) + ".png"), s.texture);
    run.manifest().add_output(f.image_dir);
  }
  spdlog::info("degradation onset (nose, eyes, mouth): {}, {}, {}", res.onset[0], res.onset[1], res.onset[2]);
  run.manifest().set_value("onset", fmt::format("{},{},{}", res.onset[0], res.onset[1], res.onset[2]));
  run.finish(f.out);
}

void cmd_eval(Run& run, const fs::path& pred, const fs::path& gt, const fs::path& out, const std::string& det_path) {
  auto det = maybe_detector(det_path, run.manifest());
  run.manifest().add_input(pred);
  run.manifest().add_input(gt);
  auto samples = load_samples(gt);
  const auto& m = toy::region_masks();
  metrics::MetricReport rep;
  rep.config_digest = run.cfg().digest();
  for (const auto& s : samples) {
    const auto file = pred / (sample_name(s.index) + ".png");
    if (!fs::exists(file)) continue;
    auto p = io::read_png(file);
    std::map<std::string, double> row{{"psnr", metrics::psnr(p, s.texture.pixels)},
                                      {"ssim", metrics::ssim(p, s.texture.pixels)},
                                      {"mouth_l2", metrics::masked_l2(p, s.texture.pixels, m.mouth_mask)},
                                      {"brow_l2", metrics::masked_l2(p, s.texture.pixels, m.brow_mask)},
                                      {"skin_l2", metrics::masked_l2(p, s.texture.pixels, m.skin_mask)}};
    if (det) row["landmark_l2"] = metrics::landmark_l2(det->detect(p), s.landmarks);
    rep.add(sample_name(s.index), row);
  }
  if (rep.rows.empty()) throw ValidationError("no predictions in " + pred.string() + " match samples in " + gt.string());
  write_text(out, rep.csv());
  for (const auto& [k, v] : rep.aggregate()) spdlog::info("mean {} = {:.4f}", k, v);
  run.manifest().add_output(out);
  run.finish(out);
}

}  // namespace

int dispatch(int argc, char** argv) {
  configure_runtime();
  auto logger = spdlog::stderr_color_mt("uvflow");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("%Y-%m-%d %H:%M:%S.%e [%l] %v");

  CLI::App app{"uvflow: UV texture reconstruction with a rectified-flow transformer on toy faces"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker cap for parallel stages")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Single worker, ordered reductions");
  app.add_option("--config", g.config, "Run configuration JSON (default: configs/default.json)");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn or error");

  std::function<void(Run&)> action;

  // gen
  auto* gen = app.add_subcommand("gen", "Write a toy dataset");
  std::string gen_out;
  std::optional<int> gen_n;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--n", gen_n, "Number of samples");
  gen->add_option("--seed", gen_seed, "Master seed");
  gen->callback([&] { action = [&](Run& r) { cmd_gen(r, gen_out, gen_n, gen_seed); }; });

  // train
  auto* train = app.add_subcommand("train", "Train the landmark detector or the flow model");
  train->require_subcommand(1);
  auto* tl = train->add_subcommand("landmarks", "Train the landmark detector");
  std::string tl_data, tl_out;
  std::optional<int> tl_epochs;
  std::optional<std::uint64_t> tl_seed;
  tl->add_option("--data", tl_data, "Dataset directory")->required();
  tl->add_option("--out", tl_out, "Detector checkpoint")->required();
  tl->add_option("--epochs", tl_epochs, "Epochs");
  tl->add_option("--seed", tl_seed, "Seed");
  tl->callback([&] { action = [&](Run& r) { cmd_train_landmarks(r, tl_data, tl_out, tl_epochs, tl_seed); }; });

  auto* tm = train->add_subcommand("model", "Train the flow model");
  std::string tm_data, tm_out;
  TrainFlags tf;
  tm->add_option("--data", tm_data, "Dataset directory")->required();
  tm->add_option("--out", tm_out, "Model checkpoint")->required();
  tm->add_option("--steps", tf.steps, "Optimizer steps");
  tm->add_option("--seed", tf.seed, "Seed");
  tm->add_flag("--disentangle", tf.disentangle, "Group-truncation training");
  tm->add_option("--p", tf.p, "Truncation probability per boundary")->check(CLI::Range(0.0, 1.0));
  tm->callback([&] { action = [&](Run& r) { cmd_train_model(r, tm_data, tm_out, tf); }; });

  // sample
  auto* smp = app.add_subcommand("sample", "Reconstruct textures from portraits");
  SampleFlags sf;
  smp->add_option("--model", sf.model, "Model checkpoint")->required();
  smp->add_option("--detector", sf.detector, "Detector checkpoint (needed for guidance)");
  smp->add_option("--input", sf.input, "Portrait PNG or dataset directory")->required();
  smp->add_option("--out", sf.out, "Texture PNG, or directory for a dataset input")->required();
  smp->add_option("--eta", sf.eta, "Guidance step size (0 disables)");
  smp->add_option("--steps", sf.steps, "Euler steps");
  smp->add_option("--seed", sf.seed, "Seed");
  smp->add_option("--trace", sf.trace, "Per-step trace CSV");
  smp->add_option("--limit", sf.limit, "Use only the first N samples of a dataset");
  smp->callback([&] { action = [&](Run& r) { cmd_sample(r, sf); }; });

  // transfer
  auto* tr = app.add_subcommand("transfer", "Style transfer by single-stream feature replacement");
  PairFlags trf;
  tr->add_option("--model", trf.model, "Model checkpoint")->required();
  tr->add_option("--detector", trf.detector, "Detector checkpoint");
  tr->add_option("--identity", trf.a, "Identity portrait PNG")->required();
  tr->add_option("--style", trf.b, "Style portrait PNG")->required();
  tr->add_option("--out", trf.out, "Output texture PNG")->required();
  tr->add_option("--metrics", trf.metrics, "Metrics CSV");
  tr->add_option("--seed", trf.seed, "Seed");
  tr->add_option("--steps", trf.steps, "Euler steps");
  tr->add_option("--eta", trf.eta, "Guidance step size");
  tr->callback([&] { action = [&](Run& r) { cmd_transfer(r, trf); }; });

  // edit
  auto* ed = app.add_subcommand("edit", "Regional edit by group-wise feature injection");
  PairFlags edf;
  ed->add_option("--model", edf.model, "Disentanglement-trained model checkpoint")->required();
  ed->add_option("--detector", edf.detector, "Detector checkpoint");
  ed->add_option("--source", edf.a, "Source portrait PNG")->required();
  ed->add_option("--reference", edf.b, "Reference portrait PNG")->required();
  ed->add_option("--regions", edf.regions, "Comma list of mouth, brow")->required();
  ed->add_option("--out", edf.out, "Output texture PNG")->required();
  ed->add_option("--metrics", edf.metrics, "Metrics CSV");
  ed->add_option("--seed", edf.seed, "Seed");
  ed->add_option("--steps", edf.steps, "Euler steps");
  ed->add_option("--eta", edf.eta, "Guidance step size");
  ed->callback([&] { action = [&](Run& r) { cmd_edit(r, edf); }; });

  // analyze
  auto* an = app.add_subcommand("analyze", "Spectral and ablation analyses");
  an->require_subcommand(1);
  auto* snr = an->add_subcommand("snr", "Radial spectra, SNR curves and crossing times of a dataset");
  std::string snr_data, snr_out, snr_grid = "0.05:0.95:19";
  bool snr_hann = false;
  int snr_limit = 0;
  snr->add_option("--data", snr_data, "Dataset directory")->required();
  snr->add_option("--out", snr_out, "CSV")->required();
  snr->add_option("--tgrid", snr_grid, "lo:hi:n");
  snr->add_flag("--hann", snr_hann, "Hann window before the DFT");
  snr->add_option("--limit", snr_limit, "Use only the first N samples");
  snr->callback([&] { action = [&](Run& r) { cmd_snr(r, snr_data, snr_out, snr_grid, snr_hann, snr_limit); }; });

  auto* abl = an->add_subcommand("ablation", "Attention-output scaling sweep");
  AblationFlags af;
  abl->add_option("--model", af.model, "Model checkpoint")->required();
  abl->add_option("--detector", af.detector, "Detector checkpoint");
  abl->add_option("--input", af.input, "Portrait PNG")->required();
  abl->add_option("--out", af.out, "CSV")->required();
  abl->add_option("--order", af.order, "single_forward, single_reverse, double_forward, all_forward, all_reverse");
  abl->add_option("--eps", af.eps, "Scale applied to the ablated layers");
  abl->add_flag("--logits", af.logits, "Scale attention logits instead of outputs");
  abl->add_option("--images", af.image_dir, "Directory for the per-k textures");
  abl->add_option("--steps", af.steps, "Euler steps");
  abl->add_option("--seed", af.seed, "Seed");
  abl->callback([&] { action = [&](Run& r) { cmd_ablation(r, af); }; });

  // eval
  auto* ev = app.add_subcommand("eval", "Score predicted textures against a dataset");
  std::string ev_pred, ev_gt, ev_out, ev_det;
  ev->add_option("--pred", ev_pred, "Directory of sample_NNNNN.png predictions")->required();
  ev->add_option("--gt", ev_gt, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "CSV")->required();
  ev->add_option("--detector", ev_det, "Detector checkpoint for landmark_l2");
  ev->callback([&] { action = [&](Run& r) { cmd_eval(r, ev_pred, ev_gt, ev_out, ev_det); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  spdlog::set_level(spdlog::level::from_str(g.log_level));
  try {
    Run run(g, argc, argv);
    action(run);
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}

}  // namespace uvflow::cli
