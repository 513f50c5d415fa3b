#pragma once

// Miniature rectified-flow diffusion transformer.
//
// Texture tokens and portrait (condition) tokens first pass through
// double-stream blocks (per-stream weights, joint attention), then the
// concatenated sequence runs through single-stream blocks. Layers are indexed
// in one unified order: double blocks 0..n_double-1, then single blocks.
//
// The "attention output" of a layer is the attention result after its output
// projection and before the residual add. It is the unit that is recorded,
// scaled or replaced. For double blocks it is stored as the per-sample
// concatenation [texture ; condition] so both kinds of block share a shape of
// [batch * 2N, token_dim]. Recording captures the value that flows on, i.e.
// after any injection at that layer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "uvflow/autodiff.hpp"
#include "uvflow/rng.hpp"

namespace uvflow::dit {

inline const std::string kMagic("UVDIT\0", 6);
inline constexpr std::uint32_t kVersion = 1;

struct ModelConfig {
  int image_size = 64;
  int patch_size = 4;
  int token_dim = 128;
  int heads = 4;
  int n_double = 4;
  int n_single = 8;
  /// Unified layer indices ending group 1 and group 2.
  std::array<int, 2> group_boundaries{4, 8};
  int time_dim = 64;
  int cond_tokens = 256;
  int mlp_ratio = 4;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int num_layers() const { return n_double + n_single; }
  /// Number of layers run before the head when decoding group k (1, 2 or 3).
  int group_end(int k) const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Parses a JSON object; every key must be a ModelConfig field.
ModelConfig config_from_json(const std::string& text);
std::string config_to_json(const ModelConfig& cfg);

/// [B, H, W, C] -> [B*N, p*p*C]. Token k of a sample covers the pixel block
/// at column (k mod G), row (k div G); features are (y, x, c) row-major.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, int patch);
template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, int batch, int image_size, int patch, int channels = 3);

enum class Stream { texture, condition };

template <typename T>
struct TokenSeq {
  BasicTensor<T> tokens;  // [batch*N, patch_dim] before embedding
  Stream stream = Stream::texture;
};

/// Differentiable unpatchify of a token Var.
template <typename T>
ad::BasicVar<T> unpatchify(ad::BasicVar<T> tokens, int batch, int image_size, int patch, int channels = 3);

enum class Directive { passthrough, replace, scale, scale_logits };

template <typename T>
struct LayerInjection {
  Directive kind = Directive::passthrough;
  double eps = 1.0;
  BasicTensor<T> replacement;  // [B*2N, D] for replace
  /// Per-sample token rows (length 2N, texture first). Empty = all rows.
  std::vector<std::uint8_t> token_mask;
};

template <typename T>
struct FeatureCache {
  std::map<int, BasicTensor<T>> layers;
};

template <typename T>
struct InjectionSpec {
  std::map<int, LayerInjection<T>> layers;

  const LayerInjection<T>* find(int layer) const {
    auto it = layers.find(layer);
    return it == layers.end() || it->second.kind == Directive::passthrough ? nullptr : &it->second;
  }
  static InjectionSpec scale(const std::vector<int>& layer_ids, double eps, bool logits = false);
  static InjectionSpec replace(const FeatureCache<T>& cache, const std::vector<int>& layer_ids);
};

/// Sinusoidal embedding of t (scaled by 1000) with `dim` features.
template <typename T>
BasicTensor<T> time_embedding(const std::vector<double>& t, int dim);

template <typename T>
class FlowDiT {
 public:
  using TensorT = BasicTensor<T>;
  using Var = ad::BasicVar<T>;
  using Tape = ad::BasicTape<T>;

  explicit FlowDiT(ModelConfig cfg, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  std::vector<ad::BasicParameter<T>>& params() { return params_; }
  const std::vector<ad::BasicParameter<T>>& params() const { return params_; }
  std::size_t parameter_count() const;
  ad::BasicParameter<T>& param(const std::string& name);

  /// Parameters as trainable tape leaves (gradients accumulate in params()).
  std::vector<Var> bind(Tape& tape);
  /// Parameters as constants, for inference.
  std::vector<Var> constants(Tape& tape) const;

  /// Velocity tokens [B*N, patch_dim] after running the first `layers` layers
  /// (all of them when layers < 0) and the shared output head.
  Var forward_tokens(Tape& tape, const std::vector<Var>& pv, const TensorT& x_tokens, const std::vector<double>& t,
                     const TensorT& cond_tokens, const InjectionSpec<T>* spec = nullptr,
                     FeatureCache<T>* record = nullptr, int layers = -1) const;

  TensorT forward(const TensorT& x_tokens, const std::vector<double>& t, const TensorT& cond_tokens,
                  const InjectionSpec<T>& spec = {}) const;
  std::pair<TensorT, FeatureCache<T>> record_features(const TensorT& x_tokens, const std::vector<double>& t,
                                                     const TensorT& cond_tokens) const;
  /// Runs up to the end of group k, applies the head and unpatchifies.
  TensorT forward_truncated(const TensorT& x_tokens, const std::vector<double>& t, const TensorT& cond_tokens,
                            int group_k, const InjectionSpec<T>& spec = {}) const;

  /// Image-space convenience: x and cond are [B, H, W, 3] in model space
  /// ([-1, 1]); returns the velocity image [B, H, W, 3].
  TensorT velocity(const TensorT& x, const std::vector<double>& t, const TensorT& cond, int group_k = 3,
                   const InjectionSpec<T>* spec = nullptr, FeatureCache<T>* record = nullptr) const;

 private:
  void add(const std::string& name, std::vector<int> shape, double std, Rng& rng);
  Var block_attention(Tape& tape, const std::vector<Var>& pv, int layer, Var x, Var c, int batch,
                      const InjectionSpec<T>* spec, FeatureCache<T>* record, Var* out_c) const;

  ModelConfig cfg_;
  std::vector<ad::BasicParameter<T>> params_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Flow-matching objective

/// Velocity field under test: maps (x_t image, t, cond image) in model space
/// to a Var whose layout matches the target passed to it.
template <typename T>
using VelocityFn = std::function<ad::BasicVar<T>(ad::BasicTape<T>&, const BasicTensor<T>& x_t,
                                                 const std::vector<double>& t, const BasicTensor<T>& cond)>;

template <typename T>
struct RfBatch {
  BasicTensor<T> x_t;     // model space
  std::vector<double> t;  // per sample
  BasicTensor<T> eps;
  BasicTensor<T> target;  // eps - x0, model space
};

/// Maps [0,1] images to the model's [-1,1] range and back.
template <typename T>
BasicTensor<T> to_model_space(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> from_model_space(const BasicTensor<T>& x);

/// Draws t ~ U(0,1) per sample and eps ~ N(0, I); x0 is in [0,1].
template <typename T>
RfBatch<T> make_rf_batch(const BasicTensor<T>& x0, Rng& rng);

/// Mean squared error between v(x_t, t, cond) and (eps - x0).
template <typename T>
ad::BasicVar<T> loss_rf(ad::BasicTape<T>& tape, const VelocityFn<T>& v, const BasicTensor<T>& x0,
                        const BasicTensor<T>& cond, Rng& rng, RfBatch<T>* batch_out = nullptr);

/// Velocity field of a model at group k, in image layout.
template <typename T>
VelocityFn<T> model_field(const FlowDiT<T>& model, std::vector<ad::BasicVar<T>>* bound, int group_k = 3);

// ---------------------------------------------------------------------------
// Training

struct TrainData {
  std::vector<Tensor> cond;  // portraits, [0,1]
  std::vector<Tensor> x0;    // full textures
  std::vector<Tensor> t_skin;
  std::vector<Tensor> t_skin_mouth;
};

struct TrainConfig {
  long steps = 2000;
  int batch = 32;
  double lr = 3e-4;
  double grad_clip = 1.0;  // global norm, <= 0 disables
  std::uint64_t seed = 0;
  bool disentangle = false;
  double p = 0.3;
  /// Called after every optimizer step with (step, loss, branch).
  std::function<void(long, double, int)> on_step;
};

struct TrainReport {
  std::vector<double> losses;
  std::vector<int> branches;  // 1, 2 or 3 per step
  std::string rng_state;
};

/// Branch taken for one batch: 1 with probability p, else 2 with
/// probability p, else 3 (full pass).
int truncation_branch(Rng& rng, double p);

template <typename T>
TrainReport train(FlowDiT<T>& model, const TrainData& data, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  long step = 0;
  std::string rng_state;
  bool disentangled = false;
  std::string extra = "{}";  // free-form JSON
};

template <typename T>
std::string serialize_model(const FlowDiT<T>& model, const CheckpointMeta& meta);
template <typename T>
void save_model(const std::filesystem::path& path, const FlowDiT<T>& model, const CheckpointMeta& meta);
/// Builds the model described by the checkpoint.
template <typename T>
FlowDiT<T> load_model(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
/// Loads weights into an existing model; any config or shape mismatch is a
/// FormatError naming the offending tensor.
template <typename T>
void load_weights(const std::filesystem::path& path, FlowDiT<T>& model, CheckpointMeta* meta = nullptr);

}  // namespace uvflow::dit
