#include "run_config.hpp"

#include <cstdlib>
#include <nlohmann/json.hpp>
#include <set>

#include "uvflow/error.hpp"
#include "uvflow/io.hpp"

#ifndef UVFLOW_DEFAULT_CONFIG
#define UVFLOW_DEFAULT_CONFIG "configs/default.json"
#endif

namespace uvflow::cli {

using json = nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and complains about leftovers.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = root.at(name);
    if (!obj_.is_object()) throw ValidationError("config: '" + name + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!obj_.contains(key)) return;
    seen_.insert(key);
    try {
      const json& v = obj_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ValidationError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ValidationError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ValidationError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ValidationError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ValidationError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }
  bool has(const std::string& key) const { return obj_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) throw ValidationError("config: unknown key " + name_ + "." + k);
  }

 private:
  std::string name_;
  json obj_ = json::object();
  std::set<std::string> seen_;
};

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ValidationError("config must be a JSON object");
  static const std::set<std::string> top{"data", "detector", "model", "train", "guidance", "ablation"};
  for (const auto& [k, v] : root.items())
    if (!top.count(k)) throw ValidationError("config: unknown section '" + k + "'");

  RunConfig c;
  {
    Section s(root, "data");
    s.read("n", c.data.n);
    s.read("seed", c.data.seed);
    s.read("occlusion_prob", c.data.gen.occlusion_prob);
    s.read("max_pose_shift", c.data.gen.max_pose_shift);
    s.read("brow_offset_range", c.data.gen.brow_offset_range);
    s.read("spacing_range", c.data.gen.spacing_range);
    s.read("width_min", c.data.gen.width_min);
    s.read("width_max", c.data.gen.width_max);
    if (s.has("style_weights")) {
      const json& w = s.raw("style_weights");
      if (!w.is_array() || w.size() != toy::kNumStyles) throw ValidationError("config: data.style_weights needs 4 numbers");
      for (int i = 0; i < toy::kNumStyles; ++i) c.data.gen.style_weights[i] = w[i].get<double>();
    }
    s.finish();
  }
  {
    Section s(root, "detector");
    s.read("epochs", c.detector.epochs);
    s.read("batch", c.detector.batch);
    s.read("lr", c.detector.lr);
    s.read("seed", c.detector.seed);
    s.read("max_shift", c.detector.max_shift);
    s.read("max_noise", c.detector.max_noise);
    s.read("blur_prob", c.detector.blur_prob);
    s.read("heatmap_sigma", c.detector.heatmap_sigma);
    s.finish();
  }
  if (root.contains("model")) c.model = dit::config_from_json(root.at("model").dump());
  {
    Section s(root, "train");
    s.read("steps", c.train.steps);
    s.read("batch", c.train.batch);
    s.read("lr", c.train.lr);
    s.read("grad_clip", c.train.grad_clip);
    s.read("seed", c.train.seed);
    s.read("disentangle", c.train.disentangle);
    s.read("p", c.train.p);
    s.finish();
  }
  {
    Section s(root, "guidance");
    s.read("eta", c.guidance.eta);
    s.read("steps", c.guidance.steps);
    s.read("guide_from_t", c.guidance.guide_from_t);
    s.read("guide_to_t", c.guidance.guide_to_t);
    s.read("grad_clip", c.guidance.grad_clip);
    s.read("inner_iters", c.guidance.inner_iters);
    s.read("literal_xt", c.guidance.literal_xt);
    s.finish();
    c.guidance.validate();
  }
  {
    Section s(root, "ablation");
    s.read("eps", c.ablation.eps);
    s.read("order", c.ablation.order);
    s.read("logits", c.ablation.logits);
    s.finish();
  }
  if (c.data.n < 1) throw ValidationError("config: data.n must be positive");
  if (c.train.steps < 0 || c.train.batch < 1 || !(c.train.lr > 0))
    throw ValidationError("config: train needs steps >= 0, batch >= 1 and lr > 0");
  if (!(c.train.p >= 0.0 && c.train.p <= 1.0)) throw ValidationError("config: train.p must lie in [0, 1]");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config file " + path.string() + " does not exist");
  return parse(io::read_text(path));
}

std::string RunConfig::to_json() const {
  json j;
  j["data"] = {{"n", data.n},
               {"seed", data.seed},
               {"occlusion_prob", data.gen.occlusion_prob},
               {"max_pose_shift", data.gen.max_pose_shift},
               {"brow_offset_range", data.gen.brow_offset_range},
               {"spacing_range", data.gen.spacing_range},
               {"width_min", data.gen.width_min},
               {"width_max", data.gen.width_max},
               {"style_weights", data.gen.style_weights}};
  j["detector"] = {{"epochs", detector.epochs},       {"batch", detector.batch},
                   {"lr", detector.lr},               {"seed", detector.seed},
                   {"max_shift", detector.max_shift}, {"max_noise", detector.max_noise},
                   {"blur_prob", detector.blur_prob}, {"heatmap_sigma", detector.heatmap_sigma}};
  j["model"] = json::parse(dit::config_to_json(model));
  j["train"] = {{"steps", train.steps},         {"batch", train.batch}, {"lr", train.lr},
                {"grad_clip", train.grad_clip}, {"seed", train.seed},   {"disentangle", train.disentangle},
                {"p", train.p}};
  j["guidance"] = {{"eta", guidance.eta},
                   {"steps", guidance.steps},
                   {"guide_from_t", guidance.guide_from_t},
                   {"guide_to_t", guidance.guide_to_t},
                   {"grad_clip", guidance.grad_clip},
                   {"inner_iters", guidance.inner_iters},
                   {"literal_xt", guidance.literal_xt}};
  j["ablation"] = {{"eps", ablation.eps}, {"order", ablation.order}, {"logits", ablation.logits}};
  return j.dump(2);
}

std::string RunConfig::digest() const {
  const std::string s = to_json();
  return io::sha256_hex(s.data(), s.size());
}

std::filesystem::path default_config_path() {
  if (const char* env = std::getenv("UVFLOW_CONFIG"); env && *env) return env;
  return UVFLOW_DEFAULT_CONFIG;
}

}  // namespace uvflow::cli
