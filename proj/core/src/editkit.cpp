#include "uvflow/editkit.hpp"

#include <algorithm>
#include <sstream>

#include "uvflow/error.hpp"
#include "uvflow/metrics.hpp"

namespace uvflow::edit {

GroupSpec GroupSpec::from_config(const dit::ModelConfig& cfg) {
  cfg.validate();
  GroupSpec g;
  const std::array<int, 4> edges{0, cfg.group_end(1), cfg.group_end(2), cfg.group_end(3)};
  for (int k = 0; k < 3; ++k)
    for (int l = edges[k]; l < edges[k + 1]; ++l) g.groups[k].push_back(l);
  return g;
}

void GroupSpec::validate(int layers) const {
  int next = 0;
  for (const auto& g : groups)
    for (int l : g) {
      if (l != next) throw ValidationError("groups must list layers 0.." + std::to_string(layers - 1) + " in order");
      ++next;
    }
  if (next != layers) throw ValidationError("groups do not cover all " + std::to_string(layers) + " layers");
}

Region parse_region(const std::string& name) {
  if (name == "mouth") return Region::mouth;
  if (name == "brow") return Region::brow;
  throw ValidationError("unknown region '" + name + "' (expected mouth or brow)");
}

std::set<Region> parse_regions(const std::string& csv) {
  std::set<Region> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.insert(parse_region(item));
  return out;
}

sample::Result SamplerSetup::run(const Tensor& portrait, const sample::Model& model,
                                 const sample::StepHooks& hooks) const {
  sample::GuidanceConfig g = guidance;
  if (!detector) g.eta = 0.0;
  return sample::guided_sample(portrait, model, detector, l_star, g, seed, hooks);
}

// ---------------------------------------------------------------------------

std::vector<int> layer_order(const dit::ModelConfig& cfg, const std::string& name) {
  std::vector<int> out;
  const int L = cfg.num_layers();
  if (name == "single_forward" || name == "single_reverse") {
    for (int l = cfg.n_double; l < L; ++l) out.push_back(l);
  } else if (name == "double_forward") {
    for (int l = 0; l < cfg.n_double; ++l) out.push_back(l);
  } else if (name == "all_forward" || name == "all_reverse") {
    for (int l = 0; l < L; ++l) out.push_back(l);
  } else {
    throw ValidationError("unknown layer order '" + name + "'");
  }
  if (name.ends_with("_reverse")) std::reverse(out.begin(), out.end());
  return out;
}

std::string AblationResult::csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "k,layer,nose,eyes,mouth,total\n";
  for (const auto& s : steps)
    os << s.k << ',' << (s.layers.empty() ? -1 : s.layers.back()) << ',' << s.nose << ',' << s.eyes << ',' << s.mouth
       << ',' << s.total << '\n';
  return os.str();
}

AblationResult ablation_sweep(const Tensor& portrait, const sample::Model& model, const SamplerSetup& setup,
                              const std::vector<int>& order, double eps, bool logits) {
  const int L = model.config().num_layers();
  if (model.config().image_size != toy::kCanvas)
    throw ValidationError("ablation metrics need a " + std::to_string(toy::kCanvas) + " px model");
  for (int l : order)
    if (l < 0 || l >= L) throw ValidationError("layer " + std::to_string(l) + " is out of range");
  AblationResult res;
  const auto& masks = toy::region_masks();
  for (std::size_t k = 0; k <= order.size(); ++k) {
    AblationStep st;
    st.k = static_cast<int>(k);
    st.layers.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    auto spec = sample::Spec::scale(st.layers, eps, logits);
    sample::StepHooks hooks;
    if (k > 0) hooks.inject_all = &spec;
    st.texture = setup.run(portrait, model, hooks).texture;
    const Tensor& base = k == 0 ? st.texture : res.steps.front().texture;
    st.nose = metrics::masked_l2(st.texture, base, toy::nose_region_mask());
    st.eyes = metrics::masked_l2(st.texture, base, toy::eye_region_mask());
    st.mouth = metrics::masked_l2(st.texture, base, masks.mouth_mask);
    st.total = metrics::masked_l2(st.texture, base, toy::Mask(base.size() / 3, 1));
    res.steps.push_back(std::move(st));
  }
  auto onset = [&](auto field) {
    double mx = 0.0;
    for (const auto& s : res.steps) mx = std::max(mx, s.*field);
    if (mx <= 0.0) return -1;
    for (const auto& s : res.steps)
      if (s.*field >= 0.5 * mx) return s.k;
    return -1;
  };
  res.onset = {onset(&AblationStep::nose), onset(&AblationStep::eyes), onset(&AblationStep::mouth)};
  return res;
}

// ---------------------------------------------------------------------------

std::vector<sample::Spec> replay(const std::vector<sample::Cache>& caches, const std::vector<int>& layers) {
  std::vector<sample::Spec> specs;
  specs.reserve(caches.size());
  for (const auto& c : caches) specs.push_back(sample::Spec::replace(c, layers));
  return specs;
}

namespace {

Tensor replaced_pass(const Tensor& donor, const Tensor& target, const sample::Model& model, const SamplerSetup& setup,
                     const std::vector<int>& layers) {
  std::vector<sample::Cache> caches;
  sample::StepHooks rec;
  rec.record_steps = &caches;
  setup.run(donor, model, rec);
  auto specs = replay(caches, layers);
  sample::StepHooks inj;
  inj.inject_steps = &specs;
  return setup.run(target, model, inj).texture;
}

}  // namespace

Tensor style_transfer(const Tensor& identity, const Tensor& style, const sample::Model& model,
                      const SamplerSetup& setup) {
  std::vector<int> single;
  for (int l = model.config().n_double; l < model.config().num_layers(); ++l) single.push_back(l);
  if (single.empty()) throw ValidationError("style transfer needs single-stream blocks");
  return replaced_pass(identity, style, model, setup, single);
}

Tensor regional_edit(const EditRequest& req, const sample::Model& model, bool disentangled, const SamplerSetup& setup) {
  if (req.regions.empty()) throw ValidationError("regional edit needs at least one region");
  if (!disentangled) throw ValidationError("regional edit needs a disentanglement-trained checkpoint");
  auto groups = GroupSpec::from_config(model.config());
  std::vector<int> layers;
  if (req.regions.count(Region::mouth)) layers.insert(layers.end(), groups.groups[1].begin(), groups.groups[1].end());
  if (req.regions.count(Region::brow)) layers.insert(layers.end(), groups.groups[2].begin(), groups.groups[2].end());
  return replaced_pass(req.reference, req.source, model, setup, layers);
}

Tensor full_fuse(const EditRequest& req, const sample::Model& model, const SamplerSetup& setup) {
  std::vector<int> all(static_cast<std::size_t>(model.config().num_layers()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return replaced_pass(req.reference, req.source, model, setup, all);
}

dit::TrainReport disentangle_train(sample::Model& model, const dit::TrainData& data, dit::TrainConfig cfg,
                                   const std::filesystem::path& out) {
  cfg.disentangle = true;
  auto rep = dit::train(model, data, cfg);
  dit::CheckpointMeta meta;
  meta.step = cfg.steps;
  meta.rng_state = rep.rng_state;
  meta.disentangled = true;
  dit::save_model(out, model, meta);
  return rep;
}

}  // namespace uvflow::edit
