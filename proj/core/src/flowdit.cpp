#include "uvflow/flowdit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "uvflow/checkpoint.hpp"
#include "uvflow/error.hpp"
#include "uvflow/io.hpp"
#include "uvflow/optim.hpp"

namespace uvflow::dit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

int ModelConfig::group_end(int k) const {
  switch (k) {
    case 1: return group_boundaries[0];
    case 2: return group_boundaries[1];
    case 3: return num_layers();
    default: throw ValidationError("group index must be 1, 2 or 3, got " + std::to_string(k));
  }
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (token_dim <= 0 || heads <= 0 || token_dim % heads != 0) fail("token_dim must be divisible by heads");
  if (n_double < 0 || n_single < 0 || num_layers() < 1) fail("need at least one block");
  auto [b1, b2] = group_boundaries;
  // b1 == b2 is accepted: group 2 then decodes the same features as group 1
  if (!(0 < b1 && b1 <= b2 && b2 < num_layers())) fail("group boundaries must satisfy 0 < b1 <= b2 < layers");
  if (time_dim <= 0 || time_dim % 2 != 0) fail("time_dim must be a positive even number");
  if (cond_tokens != tokens()) fail("cond_tokens must equal (image_size/patch_size)^2 = " + std::to_string(tokens()));
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  ModelConfig c;
  const std::map<std::string, int*> ints{{"image_size", &c.image_size}, {"patch_size", &c.patch_size},
                                         {"token_dim", &c.token_dim},   {"heads", &c.heads},
                                         {"n_double", &c.n_double},     {"n_single", &c.n_single},
                                         {"time_dim", &c.time_dim},     {"cond_tokens", &c.cond_tokens},
                                         {"mlp_ratio", &c.mlp_ratio}};
  bool cond_given = false;
  for (const auto& [key, val] : j.items()) {
    if (key == "group_boundaries") {
      if (!val.is_array() || val.size() != 2 || !val[0].is_number_integer() || !val[1].is_number_integer())
        throw ValidationError("model config: group_boundaries must be two integers");
      c.group_boundaries = {val[0].get<int>(), val[1].get<int>()};
      continue;
    }
    auto it = ints.find(key);
    if (it == ints.end()) throw ValidationError("model config: unknown key '" + key + "'");
    if (!val.is_number_integer()) throw ValidationError("model config: '" + key + "' must be an integer");
    *it->second = val.get<int>();
    cond_given |= key == "cond_tokens";
  }
  if (!cond_given && c.patch_size > 0) c.cond_tokens = c.tokens();
  c.validate();
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  json j{{"image_size", c.image_size}, {"patch_size", c.patch_size},
         {"token_dim", c.token_dim},   {"heads", c.heads},
         {"n_double", c.n_double},     {"n_single", c.n_single},
         {"time_dim", c.time_dim},     {"cond_tokens", c.cond_tokens},
         {"mlp_ratio", c.mlp_ratio},   {"group_boundaries", {c.group_boundaries[0], c.group_boundaries[1]}}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Tokenization

namespace {

// index[token element] -> image element, for one batch of images
std::vector<std::int64_t> patch_index(int batch, int size, int patch, int channels) {
  const int g = size / patch;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(batch) * size * size * channels);
  for (int b = 0; b < batch; ++b)
    for (int k = 0; k < g * g; ++k) {
      const int bx = k % g, by = k / g;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < channels; ++c) {
            std::int64_t py = by * patch + y, px = bx * patch + x;
            idx.push_back(((static_cast<std::int64_t>(b) * size + py) * size + px) * channels + c);
          }
    }
  return idx;
}

std::vector<std::int64_t> inverse(const std::vector<std::int64_t>& idx) {
  std::vector<std::int64_t> inv(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) inv[static_cast<std::size_t>(idx[i])] = static_cast<std::int64_t>(i);
  return inv;
}

}  // namespace

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, int patch) {
  if (images.rank() != 4 || images.dim(1) != images.dim(2) || patch <= 0 || images.dim(1) % patch != 0) {
    throw ValidationError("patchify expects [B, S, S, C] with S divisible by " + std::to_string(patch) + ", got " +
                          images.shape_str());
  }
  const int b = images.dim(0), s = images.dim(1), c = images.dim(3);
  const int g = s / patch;
  auto idx = patch_index(b, s, patch, c);
  BasicTensor<T> out({b * g * g, patch * patch * c});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = images[static_cast<std::size_t>(idx[i])];
  return out;
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, int batch, int image_size, int patch, int channels) {
  const int g = image_size / patch;
  if (tokens.rank() != 2 || tokens.dim(0) != batch * g * g || tokens.dim(1) != patch * patch * channels) {
    throw ValidationError("unpatchify: token shape " + tokens.shape_str() + " does not match " + std::to_string(batch) +
                          " images of " + std::to_string(image_size) + "px, patch " + std::to_string(patch));
  }
  auto idx = patch_index(batch, image_size, patch, channels);
  BasicTensor<T> out({batch, image_size, image_size, channels});
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<std::size_t>(idx[i])] = tokens[i];
  return out;
}

template <typename T>
ad::BasicVar<T> unpatchify(ad::BasicVar<T> tokens, int batch, int image_size, int patch, int channels) {
  const int g = image_size / patch;
  if (tokens.value().rank() != 2 || tokens.dim(0) != batch * g * g || tokens.dim(1) != patch * patch * channels)
    throw ValidationError("unpatchify: token shape " + tokens.value().shape_str() + " does not match the image layout");
  return ad::gather(tokens, inverse(patch_index(batch, image_size, patch, channels)),
                    {batch, image_size, image_size, channels});
}

template <typename T>
BasicTensor<T> time_embedding(const std::vector<double>& t, int dim) {
  const int half = dim / 2;
  BasicTensor<T> out({static_cast<int>(t.size()), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (!std::isfinite(t[b])) throw NumericError("time value is not finite");
    for (int i = 0; i < half; ++i) {
      double f = std::exp(-std::log(10000.0) * i / half);
      double a = 1000.0 * t[b] * f;
      out.at(static_cast<int>(b), i) = static_cast<T>(std::sin(a));
      out.at(static_cast<int>(b), half + i) = static_cast<T>(std::cos(a));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Injection specs

template <typename T>
InjectionSpec<T> InjectionSpec<T>::scale(const std::vector<int>& layer_ids, double eps, bool logits) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ValidationError("scale factor must be finite and >= 0");
  InjectionSpec s;
  for (int l : layer_ids) {
    LayerInjection<T> li;
    li.kind = logits ? Directive::scale_logits : Directive::scale;
    li.eps = eps;
    s.layers[l] = std::move(li);
  }
  return s;
}

template <typename T>
InjectionSpec<T> InjectionSpec<T>::replace(const FeatureCache<T>& cache, const std::vector<int>& layer_ids) {
  InjectionSpec s;
  for (int l : layer_ids) {
    auto it = cache.layers.find(l);
    if (it == cache.layers.end()) throw ValidationError("feature cache has no layer " + std::to_string(l));
    LayerInjection<T> li;
    li.kind = Directive::replace;
    li.replacement = it->second;
    s.layers[l] = std::move(li);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model

namespace {

std::string block_name(const ModelConfig& c, int layer) {
  return layer < c.n_double ? "double" + std::to_string(layer) : "single" + std::to_string(layer - c.n_double);
}

std::vector<std::uint8_t> expand_mask(const std::vector<std::uint8_t>& token_mask, int batch, int len) {
  if (token_mask.empty()) return {};
  if (static_cast<int>(token_mask.size()) != len)
    throw ValidationError("token mask has " + std::to_string(token_mask.size()) + " entries, expected " +
                          std::to_string(len));
  std::vector<std::uint8_t> rows;
  rows.reserve(static_cast<std::size_t>(batch) * len);
  for (int b = 0; b < batch; ++b) rows.insert(rows.end(), token_mask.begin(), token_mask.end());
  return rows;
}

template <typename T>
ad::BasicVar<T> apply_injection(ad::BasicVar<T> a, const LayerInjection<T>& li, int layer, int batch, int len) {
  auto& tape = *a.tape();
  switch (li.kind) {
    case Directive::passthrough:
    case Directive::scale_logits:
      return a;
    case Directive::scale: {
      if (!(li.eps >= 0.0)) throw ValidationError("scale factor must be >= 0");
      if (li.token_mask.empty()) return ad::scale(a, li.eps);
      auto rows = expand_mask(li.token_mask, batch, len);
      BasicTensor<T> f(a.shape());
      const int d = a.dim(1);
      for (std::size_t r = 0; r < rows.size(); ++r)
        std::fill_n(f.data() + r * d, d, rows[r] ? static_cast<T>(li.eps) : T(1));
      return ad::mul(a, tape.constant(std::move(f)));
    }
    case Directive::replace:
      if (li.replacement.shape() != a.shape()) {
        throw ValidationError("layer " + std::to_string(layer) + " replacement has shape " +
                              li.replacement.shape_str() + ", expected " + a.value().shape_str());
      }
      return ad::replace_rows(a, li.replacement, expand_mask(li.token_mask, batch, len));
  }
  return a;
}

template <typename T>
void check_finite(const ad::BasicVar<T>& v, int layer) {
  if (!v.value().all_finite()) throw NumericError("non-finite activations after layer " + std::to_string(layer));
}

}  // namespace

template <typename T>
FlowDiT<T>::FlowDiT(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(split_seed(seed, 0xD17));
  const int D = cfg_.token_dim, P = cfg_.patch_dim(), N = cfg_.tokens(), H = cfg_.mlp_ratio * D;
  constexpr double s = 0.02;
  add("x_embed.w", {P, D}, s, rng);
  add("x_embed.b", {D}, 0, rng);
  add("c_embed.w", {P, D}, s, rng);
  add("c_embed.b", {D}, 0, rng);
  add("x_pos", {N, D}, s, rng);
  add("c_pos", {N, D}, s, rng);
  add("t_mlp1.w", {cfg_.time_dim, D}, s, rng);
  add("t_mlp1.b", {D}, 0, rng);
  add("t_mlp2.w", {D, D}, s, rng);
  add("t_mlp2.b", {D}, 0, rng);
  auto stream = [&](const std::string& pre) {
    add(pre + ".qkv.w", {D, 3 * D}, s, rng);
    add(pre + ".qkv.b", {3 * D}, 0, rng);
    add(pre + ".out.w", {D, D}, s, rng);
    add(pre + ".out.b", {D}, 0, rng);
    add(pre + ".mlp1.w", {D, H}, s, rng);
    add(pre + ".mlp1.b", {H}, 0, rng);
    add(pre + ".mlp2.w", {H, D}, s, rng);
    add(pre + ".mlp2.b", {D}, 0, rng);
  };
  for (int i = 0; i < cfg_.n_double; ++i) {
    stream(block_name(cfg_, i) + ".x");
    stream(block_name(cfg_, i) + ".c");
  }
  for (int i = cfg_.n_double; i < cfg_.num_layers(); ++i) stream(block_name(cfg_, i));
  add("head.w", {D, P}, s, rng);
  add("head.b", {P}, 0, rng);
}

template <typename T>
void FlowDiT<T>::add(const std::string& name, std::vector<int> shape, double std, Rng& rng) {
  TensorT t(std::move(shape));
  if (std > 0)
    for (T& v : t.storage()) v = static_cast<T>(std * gaussian(rng));
  index_[name] = static_cast<int>(params_.size());
  params_.push_back({name, std::move(t), {}});
}

template <typename T>
std::size_t FlowDiT<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
ad::BasicParameter<T>& FlowDiT<T>::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("model has no parameter '" + name + "'");
  return params_[static_cast<std::size_t>(it->second)];
}

template <typename T>
std::vector<typename FlowDiT<T>::Var> FlowDiT<T>::bind(Tape& tape) {
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (auto& p : params_) pv.push_back(tape.param(p));
  return pv;
}

template <typename T>
std::vector<typename FlowDiT<T>::Var> FlowDiT<T>::constants(Tape& tape) const {
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (const auto& p : params_) pv.push_back(tape.constant(p.value));
  return pv;
}

template <typename T>
typename FlowDiT<T>::Var FlowDiT<T>::forward_tokens(Tape& tape, const std::vector<Var>& pv, const TensorT& x_tokens,
                                                    const std::vector<double>& t, const TensorT& cond_tokens,
                                                    const InjectionSpec<T>* spec, FeatureCache<T>* record,
                                                    int layers) const {
  const int N = cfg_.tokens(), L = cfg_.num_layers();
  const int B = static_cast<int>(t.size());
  if (B < 1) throw ValidationError("forward needs at least one sample");
  if (x_tokens.rank() != 2 || x_tokens.dim(0) != B * N || x_tokens.dim(1) != cfg_.patch_dim())
    throw ValidationError("texture tokens have shape " + x_tokens.shape_str() + ", expected [" +
                          std::to_string(B * N) + ", " + std::to_string(cfg_.patch_dim()) + "]");
  if (cond_tokens.shape() != x_tokens.shape())
    throw ValidationError("condition tokens have shape " + cond_tokens.shape_str() + ", expected " +
                          x_tokens.shape_str());
  if (pv.size() != params_.size()) throw ValidationError("parameter binding does not match the model");
  if (layers < 0) layers = L;
  if (layers > L) throw ValidationError("cannot run " + std::to_string(layers) + " layers of " + std::to_string(L));
  auto P = [&](const std::string& name) { return pv[static_cast<std::size_t>(index_.at(name))]; };
  auto lin = [&](Var v, const std::string& pre) { return ad::linear(v, P(pre + ".w"), P(pre + ".b")); };
  auto mlp = [&](Var v, const std::string& pre) {
    return ad::add(v, lin(ad::gelu(lin(ad::layer_norm(v), pre + ".mlp1")), pre + ".mlp2"));
  };
  auto hook = [&](Var a, int layer, int len) {
    const LayerInjection<T>* li = spec ? spec->find(layer) : nullptr;
    if (li) a = apply_injection(a, *li, layer, B, len);
    if (record) record->layers[layer] = a.value();
    return a;
  };
  auto logit_scale = [&](int layer) {
    const LayerInjection<T>* li = spec ? spec->find(layer) : nullptr;
    return li && li->kind == Directive::scale_logits ? li->eps : 1.0;
  };

  auto temb = lin(ad::silu(lin(tape.constant(time_embedding<T>(t, cfg_.time_dim)), "t_mlp1")), "t_mlp2");
  Var x = ad::add_per_sample(ad::add_tiled(lin(tape.constant(x_tokens), "x_embed"), P("x_pos")), temb, N);
  Var c = ad::add_per_sample(ad::add_tiled(lin(tape.constant(cond_tokens), "c_embed"), P("c_pos")), temb, N);

  int layer = 0;
  for (; layer < std::min(layers, cfg_.n_double); ++layer) {
    const std::string pre = block_name(cfg_, layer);
    auto qkv = ad::concat_seq(lin(ad::layer_norm(x), pre + ".x.qkv"), lin(ad::layer_norm(c), pre + ".c.qkv"), B);
    auto a = ad::attention(qkv, B, 2 * N, cfg_.heads, logit_scale(layer));
    auto ax = lin(ad::slice_seq(a, B, 2 * N, 0, N), pre + ".x.out");
    auto ac = lin(ad::slice_seq(a, B, 2 * N, N, N), pre + ".c.out");
    if (record || (spec && spec->find(layer))) {
      auto joint = hook(ad::concat_seq(ax, ac, B), layer, 2 * N);
      ax = ad::slice_seq(joint, B, 2 * N, 0, N);
      ac = ad::slice_seq(joint, B, 2 * N, N, N);
    }
    x = mlp(ad::add(x, ax), pre + ".x");
    c = mlp(ad::add(c, ac), pre + ".c");
    check_finite(x, layer);
    check_finite(c, layer);
  }
  Var out_tokens = x;
  if (layer < layers) {
    Var z = ad::concat_seq(x, c, B);
    for (; layer < layers; ++layer) {
      const std::string pre = block_name(cfg_, layer);
      auto a = ad::attention(lin(ad::layer_norm(z), pre + ".qkv"), B, 2 * N, cfg_.heads, logit_scale(layer));
      a = hook(lin(a, pre + ".out"), layer, 2 * N);
      z = mlp(ad::add(z, a), pre);
      check_finite(z, layer);
    }
    out_tokens = ad::slice_seq(z, B, 2 * N, 0, N);
  }
  return lin(ad::layer_norm(out_tokens), "head");
}

template <typename T>
BasicTensor<T> FlowDiT<T>::forward(const TensorT& x_tokens, const std::vector<double>& t, const TensorT& cond_tokens,
                                   const InjectionSpec<T>& spec) const {
  Tape tape(false);
  return forward_tokens(tape, constants(tape), x_tokens, t, cond_tokens, &spec).value();
}

template <typename T>
std::pair<BasicTensor<T>, FeatureCache<T>> FlowDiT<T>::record_features(const TensorT& x_tokens,
                                                                      const std::vector<double>& t,
                                                                      const TensorT& cond_tokens) const {
  Tape tape(false);
  FeatureCache<T> cache;
  auto v = forward_tokens(tape, constants(tape), x_tokens, t, cond_tokens, nullptr, &cache).value();
  return {std::move(v), std::move(cache)};
}

template <typename T>
BasicTensor<T> FlowDiT<T>::forward_truncated(const TensorT& x_tokens, const std::vector<double>& t,
                                             const TensorT& cond_tokens, int group_k,
                                             const InjectionSpec<T>& spec) const {
  Tape tape(false);
  auto v = forward_tokens(tape, constants(tape), x_tokens, t, cond_tokens, &spec, nullptr, cfg_.group_end(group_k));
  return unpatchify(v.value(), static_cast<int>(t.size()), cfg_.image_size, cfg_.patch_size);
}

template <typename T>
BasicTensor<T> FlowDiT<T>::velocity(const TensorT& x, const std::vector<double>& t, const TensorT& cond, int group_k,
                                    const InjectionSpec<T>* spec, FeatureCache<T>* record) const {
  Tape tape(false);
  auto v = forward_tokens(tape, constants(tape), patchify(x, cfg_.patch_size), t, patchify(cond, cfg_.patch_size),
                          spec, record, cfg_.group_end(group_k));
  return unpatchify(v.value(), static_cast<int>(t.size()), cfg_.image_size, cfg_.patch_size);
}

// ---------------------------------------------------------------------------
// Objective

template <typename T>
BasicTensor<T> to_model_space(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.storage()) v = static_cast<T>(2 * v - 1);
  return y;
}

template <typename T>
BasicTensor<T> from_model_space(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.storage()) v = static_cast<T>((v + 1) / 2);
  return y;
}

template <typename T>
RfBatch<T> make_rf_batch(const BasicTensor<T>& x0, Rng& rng) {
  if (x0.rank() < 2 || x0.dim(0) < 1) throw ValidationError("flow batch must be [B, ...], got " + x0.shape_str());
  const int B = x0.dim(0);
  const std::size_t per = x0.size() / static_cast<std::size_t>(B);
  RfBatch<T> r;
  r.t.resize(static_cast<std::size_t>(B));
  for (double& t : r.t) t = uniform(rng, 0.0, 1.0);
  r.eps = BasicTensor<T>(x0.shape());
  for (T& v : r.eps.storage()) v = static_cast<T>(gaussian(rng));
  r.x_t = BasicTensor<T>(x0.shape());
  r.target = BasicTensor<T>(x0.shape());
  for (int b = 0; b < B; ++b) {
    const double t = r.t[static_cast<std::size_t>(b)];
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      double x = 2.0 * x0[i] - 1.0;
      r.x_t[i] = static_cast<T>((1.0 - t) * x + t * r.eps[i]);
      r.target[i] = static_cast<T>(r.eps[i] - x);
    }
  }
  return r;
}

template <typename T>
ad::BasicVar<T> loss_rf(ad::BasicTape<T>& tape, const VelocityFn<T>& v, const BasicTensor<T>& x0,
                        const BasicTensor<T>& cond, Rng& rng, RfBatch<T>* batch_out) {
  if (cond.dim(0) != x0.dim(0)) throw ValidationError("condition batch does not match the texture batch");
  RfBatch<T> r = make_rf_batch(x0, rng);
  auto pred = v(tape, r.x_t, r.t, to_model_space(cond));
  if (pred.shape() != x0.shape())
    throw ValidationError("velocity has shape " + pred.value().shape_str() + ", expected " + x0.shape_str());
  auto loss = ad::mse(pred, tape.constant(r.target));
  if (batch_out) *batch_out = std::move(r);
  return loss;
}

template <typename T>
VelocityFn<T> model_field(const FlowDiT<T>& model, std::vector<ad::BasicVar<T>>* bound, int group_k) {
  const int layers = model.config().group_end(group_k);
  return [&model, bound, layers](ad::BasicTape<T>& tape, const BasicTensor<T>& x_t, const std::vector<double>& t,
                                 const BasicTensor<T>& cond) {
    const auto& c = model.config();
    std::vector<ad::BasicVar<T>> local;
    if (!bound) local = model.constants(tape);
    auto v = model.forward_tokens(tape, bound ? *bound : local, patchify(x_t, c.patch_size), t,
                                  patchify(cond, c.patch_size), nullptr, nullptr, layers);
    return unpatchify(v, static_cast<int>(t.size()), c.image_size, c.patch_size);
  };
}

// ---------------------------------------------------------------------------
// Training

int truncation_branch(Rng& rng, double p) {
  if (uniform(rng, 0.0, 1.0) < p) return 1;
  if (uniform(rng, 0.0, 1.0) < p) return 2;
  return 3;
}

namespace {

template <typename T>
BasicTensor<T> stack(const std::vector<Tensor>& images, const std::vector<int>& idx) {
  const auto& s = images.front().shape();
  BasicTensor<T> out({static_cast<int>(idx.size()), s[0], s[1], s[2]});
  const std::size_t per = images.front().size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = images[static_cast<std::size_t>(idx[b])];
    if (img.shape() != s) throw ValidationError("training images differ in shape");
    std::transform(img.storage().begin(), img.storage().end(), out.data() + b * per,
                   [](double v) { return static_cast<T>(v); });
  }
  return out;
}

template <typename T>
void clip_grad_norm(std::vector<ad::BasicParameter<T>>& params, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad.storage()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const T f = static_cast<T>(max_norm / norm);
  for (auto& p : params)
    for (T& g : p.grad.storage()) g *= f;
}

}  // namespace

template <typename T>
TrainReport train(FlowDiT<T>& model, const TrainData& data, const TrainConfig& cfg) {
  const std::size_t n = data.x0.size();
  if (n == 0 || data.cond.size() != n) throw ValidationError("training data needs matching textures and portraits");
  if (cfg.disentangle && (data.t_skin.size() != n || data.t_skin_mouth.size() != n))
    throw ValidationError("disentanglement training needs layered targets for every sample");
  if (cfg.batch < 1 || cfg.steps < 0) throw ValidationError("invalid training schedule");
  if (cfg.disentangle && !(cfg.p >= 0.0 && cfg.p <= 1.0)) throw ValidationError("truncation probability must be in [0, 1]");
  const int S = model.config().image_size;
  if (data.x0.front().shape() != std::vector<int>{S, S, 3})
    throw ValidationError("training textures must be " + std::to_string(S) + "x" + std::to_string(S) + "x3");

  Rng rng(split_seed(cfg.seed, 0xF10));
  // separate stream: with p = 0 the data and noise draws match plain training
  Rng branch_rng(split_seed(cfg.seed, 0xB4A));
  Adam<T> opt;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  TrainReport rep;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < cfg.batch) {
      if (cursor == n) {
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i)))]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    int branch = cfg.disentangle ? truncation_branch(branch_rng, cfg.p) : 3;
    const auto& targets = branch == 1 ? data.t_skin : branch == 2 ? data.t_skin_mouth : data.x0;
    auto x0 = stack<T>(targets, idx);
    auto cond = stack<T>(data.cond, idx);

    for (auto& p : model.params()) p.zero_grad();
    ad::BasicTape<T> tape;
    auto pv = model.bind(tape);
    auto loss = loss_rf<T>(tape, model_field(model, &pv, branch), x0, cond, rng);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw NumericError("flow training diverged at step " + std::to_string(step));
    tape.backward(loss);
    clip_grad_norm(model.params(), cfg.grad_clip);
    opt.step(model.params(), cosine_lr(cfg.lr, step, cfg.steps));
    rep.losses.push_back(lv);
    rep.branches.push_back(branch);
    if (cfg.on_step) cfg.on_step(step, lv, branch);
  }
  std::ostringstream os;
  os << rng << ' ' << branch_rng;
  rep.rng_state = os.str();
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
std::string serialize_model(const FlowDiT<T>& model, const CheckpointMeta& meta) {
  json m;
  m["config"] = json::parse(config_to_json(model.config()));
  m["step"] = meta.step;
  m["rng_state"] = meta.rng_state;
  m["disentangled"] = meta.disentangled;
  m["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
  try {
    m["extra"] = json::parse(meta.extra);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint extra metadata is not JSON: ") + e.what());
  }
  ckpt::File f{kMagic, kVersion, m.dump(), {}};
  for (const auto& p : model.params()) f.tensors.push_back(ckpt::NamedTensor::from(p.name, p.value));
  return ckpt::serialize(f);
}

template <typename T>
void save_model(const std::filesystem::path& path, const FlowDiT<T>& model, const CheckpointMeta& meta) {
  io::write_atomic(path, serialize_model(model, meta));
}

namespace {

struct Parsed {
  ckpt::File file;
  ModelConfig cfg;
  CheckpointMeta meta;
};

Parsed parse_model_file(const std::filesystem::path& path) {
  Parsed p{ckpt::load(path, kMagic, kVersion), {}, {}};
  try {
    auto m = json::parse(p.file.metadata);
    p.cfg = config_from_json(m.at("config").dump());
    p.meta.step = m.at("step");
    p.meta.rng_state = m.at("rng_state");
    p.meta.disentangled = m.at("disentangled");
    p.meta.extra = m.at("extra").dump();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model checkpoint metadata: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("model checkpoint config: ") + e.what());
  }
  return p;
}

template <typename T>
void copy_weights(const ckpt::File& f, FlowDiT<T>& model) {
  for (auto& p : model.params()) {
    const auto* t = f.find(p.name);
    if (!t) throw FormatError("model checkpoint is missing tensor '" + p.name + "'");
    if (t->shape != p.value.shape()) {
      throw FormatError("model tensor '" + p.name + "' has shape " + shape_to_string(t->shape) +
                        " in the checkpoint, expected " + p.value.shape_str());
    }
    if constexpr (std::is_same_v<T, float>) p.value = t->as_float();
    else p.value = t->as_double();
  }
  if (f.tensors.size() != model.params().size()) {
    for (const auto& t : f.tensors) {
      bool known = std::any_of(model.params().begin(), model.params().end(),
                               [&](const auto& p) { return p.name == t.name; });
      if (!known) throw FormatError("model checkpoint has unexpected tensor '" + t.name + "'");
    }
  }
}

}  // namespace

template <typename T>
FlowDiT<T> load_model(const std::filesystem::path& path, CheckpointMeta* meta) {
  auto p = parse_model_file(path);
  FlowDiT<T> model(p.cfg);
  copy_weights(p.file, model);
  if (meta) *meta = p.meta;
  return model;
}

template <typename T>
void load_weights(const std::filesystem::path& path, FlowDiT<T>& model, CheckpointMeta* meta) {
  auto p = parse_model_file(path);
  copy_weights(p.file, model);
  // shapes can agree while e.g. heads or group boundaries differ
  if (!(p.cfg == model.config())) {
    throw FormatError("model checkpoint config " + config_to_json(p.cfg) + " does not match " +
                      config_to_json(model.config()));
  }
  if (meta) *meta = p.meta;
}

#define UVFLOW_INSTANTIATE_DIT(T)                                                                                   \
  template BasicTensor<T> patchify(const BasicTensor<T>&, int);                                                     \
  template BasicTensor<T> unpatchify(const BasicTensor<T>&, int, int, int, int);                                    \
  template ad::BasicVar<T> unpatchify(ad::BasicVar<T>, int, int, int, int);                                         \
  template BasicTensor<T> time_embedding<T>(const std::vector<double>&, int);                                       \
  template struct InjectionSpec<T>;                                                                                 \
  template class FlowDiT<T>;                                                                                        \
  template BasicTensor<T> to_model_space(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> from_model_space(const BasicTensor<T>&);                                                  \
  template RfBatch<T> make_rf_batch(const BasicTensor<T>&, Rng&);                                                   \
  template ad::BasicVar<T> loss_rf(ad::BasicTape<T>&, const VelocityFn<T>&, const BasicTensor<T>&,                  \
                                   const BasicTensor<T>&, Rng&, RfBatch<T>*);                                       \
  template VelocityFn<T> model_field(const FlowDiT<T>&, std::vector<ad::BasicVar<T>>*, int);                        \
  template TrainReport train(FlowDiT<T>&, const TrainData&, const TrainConfig&);                                    \
  template std::string serialize_model(const FlowDiT<T>&, const CheckpointMeta&);                                   \
  template void save_model(const std::filesystem::path&, const FlowDiT<T>&, const CheckpointMeta&);                 \
  template FlowDiT<T> load_model(const std::filesystem::path&, CheckpointMeta*);                                    \
  template void load_weights(const std::filesystem::path&, FlowDiT<T>&, CheckpointMeta*);

UVFLOW_INSTANTIATE_DIT(float)
UVFLOW_INSTANTIATE_DIT(double)

#undef UVFLOW_INSTANTIATE_DIT

}  // namespace uvflow::dit
