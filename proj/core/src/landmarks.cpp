#include "uvflow/landmarks.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uvflow/checkpoint.hpp"
#include "uvflow/error.hpp"
#include "uvflow/io.hpp"
#include "uvflow/optim.hpp"
#include "uvflow/rng.hpp"

namespace uvflow::lmk {

namespace {

constexpr int kKernel = 3;

ad::ConvShape conv_shape(int in_hw, int in_c, const ConvSpec& s) {
  return ad::ConvShape{in_hw, in_hw, in_c, s.out_c, kKernel, s.stride, s.dilation};
}

void check_landmark_count(const Detector& det, const toy::LandmarkSet& l_star) {
  if (static_cast<int>(l_star.points.size()) != det.config().num_landmarks) {
    throw ValidationError("landmark count mismatch: detector has " + std::to_string(det.config().num_landmarks) +
                          ", target has " + std::to_string(l_star.points.size()));
  }
}

toy::LandmarkSet to_set(const Tensor& pts, int b, int k) {
  toy::LandmarkSet s;
  for (int j = 0; j < k; ++j) {
    std::size_t o = (static_cast<std::size_t>(b) * k + j) * 2;
    s.points.push_back({pts[o], pts[o + 1]});
  }
  return s;
}

}  // namespace

int DetectorConfig::heatmap_size() const {
  int hw = image_size;
  int c = 3;
  for (const auto& s : stack) {
    hw = conv_shape(hw, c, s).out_h();
    c = s.out_c;
  }
  return hw;
}

ad::HeatmapGrid DetectorConfig::grid() const {
  double cell = static_cast<double>(image_size) / heatmap_size();
  return ad::HeatmapGrid{cell, (cell - 1.0) / 2.0, tau};
}

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (!(cfg_.tau > 0.0)) throw ValidationError("detector tau must be positive");
  if (cfg_.num_landmarks < 1) throw ValidationError("detector needs at least one landmark");
  if (cfg_.image_size % cfg_.heatmap_size() != 0) throw ValidationError("heatmap grid must divide the image size");
  Rng rng(split_seed(seed, 0xDE7EC7));
  auto normal = [&](std::vector<int> shape, double std) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = std * gaussian(rng);
    return t;
  };
  int c = 3;
  for (std::size_t i = 0; i < cfg_.stack.size(); ++i) {
    int fan_in = kKernel * kKernel * c;
    params_.push_back({"conv" + std::to_string(i) + ".w", normal({fan_in, cfg_.stack[i].out_c}, std::sqrt(2.0 / fan_in)), {}});
    params_.push_back({"conv" + std::to_string(i) + ".b", Tensor({cfg_.stack[i].out_c}), {}});
    c = cfg_.stack[i].out_c;
  }
  params_.push_back({"head.w", normal({c, cfg_.num_landmarks}, 0.01), {}});
  params_.push_back({"head.b", Tensor({cfg_.num_landmarks}), {}});
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
ad::BasicVar<T> Detector::logits(const DetectorConfig& cfg, const std::vector<ad::BasicVar<T>>& pvars,
                                 ad::BasicVar<T> images) {
  const int batch = images.dim(0);
  // tanh keeps out-of-range denoised estimates bounded without hard clipping
  auto h = ad::tanh(ad::affine(images, 2.0, -1.0));
  int hw = cfg.image_size;
  int c = 3;
  for (std::size_t i = 0; i < cfg.stack.size(); ++i) {
    auto cs = conv_shape(hw, c, cfg.stack[i]);
    h = ad::silu(ad::conv2d(h, pvars[2 * i], pvars[2 * i + 1], cs));
    hw = cs.out_h();
    c = cs.out_c;
  }
  auto flat = ad::reshape(h, {batch * hw * hw, c});
  auto out = ad::linear(flat, pvars[2 * cfg.stack.size()], pvars[2 * cfg.stack.size() + 1]);
  return ad::reshape(out, {batch, hw, hw, cfg.num_landmarks});
}

template ad::Var Detector::logits<double>(const DetectorConfig&, const std::vector<ad::Var>&, ad::Var);
template ad::VarF Detector::logits<float>(const DetectorConfig&, const std::vector<ad::VarF>&, ad::VarF);

ad::Var Detector::points(ad::Tape& tape, ad::Var images) const {
  std::vector<ad::Var> pv;
  pv.reserve(params_.size());
  for (const auto& p : params_) pv.push_back(tape.constant(p.value));
  return ad::soft_argmax(logits(cfg_, pv, images), cfg_.grid());
}

Tensor as_batch(const Tensor& image, int image_size) {
  Tensor b = image;
  if (b.rank() == 3) b = b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)});
  if (b.rank() != 4 || b.dim(1) != image_size || b.dim(2) != image_size || b.dim(3) != 3) {
    throw ValidationError("detector expects " + std::to_string(image_size) + "x" + std::to_string(image_size) +
                          "x3 input, got " + image.shape_str());
  }
  if (!b.all_finite()) throw NumericError("detector input contains non-finite values");
  return b;
}

std::vector<toy::LandmarkSet> Detector::detect_batch(const Tensor& images) const {
  Tensor b = as_batch(images, cfg_.image_size);
  ad::Tape tape(false);
  auto pts = points(tape, tape.constant(b)).value();
  std::vector<toy::LandmarkSet> out;
  for (int i = 0; i < b.dim(0); ++i) out.push_back(to_set(pts, i, cfg_.num_landmarks));
  return out;
}

toy::LandmarkSet Detector::detect(const Tensor& image) const { return detect_batch(image).front(); }

Tensor Detector::heatmaps(const Tensor& image) const {
  Tensor b = as_batch(image, cfg_.image_size);
  ad::Tape tape(false);
  std::vector<ad::Var> pv;
  for (const auto& p : params_) pv.push_back(tape.constant(p.value));
  Tensor lg = logits(cfg_, pv, tape.constant(b.reshaped({1, b.dim(1), b.dim(2), 3}))).value();
  const int hw = cfg_.heatmap_size();
  const int k = cfg_.num_landmarks;
  Tensor out({hw, hw, k});
  for (int j = 0; j < k; ++j) {
    double mx = -1e300;
    for (int c = 0; c < hw * hw; ++c) mx = std::max(mx, lg[c * k + j] / cfg_.tau);
    double s = 0.0;
    for (int c = 0; c < hw * hw; ++c) s += (out[c * k + j] = std::exp(lg[c * k + j] / cfg_.tau - mx));
    for (int c = 0; c < hw * hw; ++c) out[c * k + j] /= s;
  }
  return out;
}

double energy(const Detector& det, const Tensor& image, const toy::LandmarkSet& l_star) {
  check_landmark_count(det, l_star);
  auto got = det.detect(image);
  double e = 0.0;
  for (std::size_t k = 0; k < got.points.size(); ++k) {
    double dx = got.points[k].x - l_star.points[k].x;
    double dy = got.points[k].y - l_star.points[k].y;
    e += dx * dx + dy * dy;
  }
  return e;
}

EnergyGrad energy_grad(const Detector& det, const Tensor& image, const toy::LandmarkSet& l_star) {
  check_landmark_count(det, l_star);
  const int k = det.config().num_landmarks;
  Tensor b = as_batch(image, det.config().image_size);
  ad::Tape tape;
  auto x = tape.input(b);
  auto pts = det.points(tape, x);
  Tensor target({1, k, 2});
  for (int j = 0; j < k; ++j) {
    target[j * 2] = l_star.points[j].x;
    target[j * 2 + 1] = l_star.points[j].y;
  }
  auto diff = ad::sub(pts, tape.constant(target));
  auto e = ad::sum(ad::mul(diff, diff));
  tape.backward(e);
  EnergyGrad out;
  out.energy = e.value()[0];
  out.grad = x.grad().reshaped(image.shape());
  out.detected = to_set(pts.value(), 0, k);
  if (!std::isfinite(out.energy) || !out.grad.all_finite()) throw NumericError("non-finite landmark energy or gradient");
  return out;
}

// ---------------------------------------------------------------------------

Tensor translate(const Tensor& image, int dx, int dy) {
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out(image.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sy = std::clamp(y - dy, 0, h - 1), sx = std::clamp(x - dx, 0, w - 1);
      for (int k = 0; k < c; ++k) out[(static_cast<std::size_t>(y) * w + x) * c + k] = image[(static_cast<std::size_t>(sy) * w + sx) * c + k];
    }
  return out;
}

void detector_training_set(int n, std::uint64_t seed, std::vector<Tensor>& textures,
                           std::vector<toy::LandmarkSet>& labels) {
  textures.clear();
  labels.clear();
  for (int i = 0; i < n; ++i) {
    std::uint64_t s = split_seed(seed, static_cast<std::uint64_t>(i));
    toy::FaceParams p = toy::sample_params(s, {}, toy::Style::flat);
    Rng rng(split_seed(s, 3));
    p.brow.y_offset = uniform(rng, -5.0, 3.0);
    p.brow.thickness = uniform(rng, 1.0, 4.0);
    p.mouth.width = uniform(rng, 10.0, 28.0);
    p.mouth.curvature = uniform(rng, -1.0, 1.0);
    p.eyes.spacing = uniform(rng, -4.0, 4.0);
    bool open = uniform(rng, 0.0, 1.0) < 0.2;
    textures.push_back(open ? toy::render_texture_open_eyes(p).pixels : toy::render_texture(p).pixels);
    labels.push_back(toy::feature_landmarks(p));
  }
}

namespace {

Tensor box_blur(const Tensor& img) {
  const int h = img.dim(0), w = img.dim(1);
  Tensor out(img.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += img[(static_cast<std::size_t>(std::clamp(y + dy, 0, h - 1)) * w + std::clamp(x + dx, 0, w - 1)) * 3 + k];
        out[(static_cast<std::size_t>(y) * w + x) * 3 + k] = s / 9.0;
      }
  return out;
}

}  // namespace

Detector train_detector(const std::vector<Tensor>& textures, const std::vector<toy::LandmarkSet>& labels,
                        const DetectorTrainConfig& cfg, const DetectorConfig& arch, DetectorTrainReport* report) {
  if (textures.size() != labels.size()) throw ValidationError("texture and label counts differ");
  if (textures.empty()) throw ValidationError("detector training set is empty");
  if (cfg.batch < 1 || cfg.epochs < 0) throw ValidationError("invalid detector training schedule");
  Detector det(arch, cfg.seed);
  const auto& dc = det.config();
  const int n = static_cast<int>(textures.size());
  const int S = dc.image_size, K = dc.num_landmarks, HW = dc.heatmap_size();
  const auto grid = dc.grid();
  for (const auto& l : labels) {
    if (static_cast<int>(l.points.size()) != K) throw ValidationError("label landmark count mismatch");
  }

  std::vector<ad::ParameterF> params;
  for (const auto& p : det.params()) params.push_back({p.name, p.value.cast<float>(), {}});
  Adam<float> opt;
  Rng rng(split_seed(cfg.seed, 0x7EA1));
  const int per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const long total = static_cast<long>(per_epoch) * cfg.epochs;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_int(rng, 0, i)]);
    for (int start = 0; start < n; start += cfg.batch) {
      const int B = std::min(cfg.batch, n - start);
      TensorF x({B, S, S, 3});
      TensorF pts({B, K, 2});
      TensorF heat({B, HW, HW, K});
      for (int b = 0; b < B; ++b) {
        int idx = order[start + b];
        int dx = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
        int dy = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
        Tensor img = translate(textures[idx], dx, dy);
        if (uniform(rng, 0.0, 1.0) < cfg.blur_prob) img = box_blur(img);
        double sigma = uniform(rng, 0.0, cfg.max_noise);
        for (double& v : img.storage()) v += sigma * gaussian(rng);
        std::copy(img.storage().begin(), img.storage().end(), x.data() + static_cast<std::size_t>(b) * S * S * 3);
        for (int k = 0; k < K; ++k) {
          double lx = labels[idx].points[k].x + dx, ly = labels[idx].points[k].y + dy;
          pts[(b * K + k) * 2] = static_cast<float>(lx);
          pts[(b * K + k) * 2 + 1] = static_cast<float>(ly);
          double total_w = 0.0;
          std::vector<double> w(HW * HW);
          for (int cy = 0; cy < HW; ++cy)
            for (int cx = 0; cx < HW; ++cx) {
              double px = grid.offset + grid.cell * cx - lx, py = grid.offset + grid.cell * cy - ly;
              total_w += w[cy * HW + cx] = std::exp(-(px * px + py * py) / (2 * cfg.heatmap_sigma * cfg.heatmap_sigma));
            }
          for (int c = 0; c < HW * HW; ++c)
            heat[(static_cast<std::size_t>(b) * HW * HW + c) * K + k] = static_cast<float>(w[c] / std::max(total_w, 1e-300));
        }
      }
      for (auto& p : params) p.zero_grad();
      ad::TapeF tape;
      std::vector<ad::VarF> pv;
      for (auto& p : params) pv.push_back(tape.param(p));
      auto lg = Detector::logits(dc, pv, tape.constant(x));
      auto pred = ad::soft_argmax(lg, grid);
      // coordinates in cell units so both terms are O(1)
      auto coord = ad::scale(ad::mse(pred, tape.constant(pts)), 1.0 / (grid.cell * grid.cell));
      auto loss = ad::add(coord, ad::heatmap_cross_entropy(lg, heat, dc.tau));
      double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("detector training diverged at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ", loss " + std::to_string(lv) + ")");
      }
      tape.backward(loss);
      opt.step(params, cosine_lr(cfg.lr, step, total));
      if (report) report->losses.push_back(lv);
      ++step;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) det.params()[i].value = params[i].value.cast<double>();
  if (report) report->steps = step;
  return det;
}

double mean_landmark_error(const Detector& det, const std::vector<Tensor>& textures,
                           const std::vector<toy::LandmarkSet>& labels) {
  if (textures.size() != labels.size() || textures.empty()) throw ValidationError("need matching, nonempty sets");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < textures.size(); ++i) {
    auto got = det.detect(textures[i]);
    for (std::size_t k = 0; k < got.points.size(); ++k) {
      total += std::hypot(got.points[k].x - labels[i].points[k].x, got.points[k].y - labels[i].points[k].y);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json config_json(const DetectorConfig& c) {
  nlohmann::json stack = nlohmann::json::array();
  for (const auto& s : c.stack) stack.push_back({s.out_c, s.stride, s.dilation});
  return {{"image_size", c.image_size}, {"num_landmarks", c.num_landmarks}, {"tau", c.tau}, {"stack", stack}};
}

}  // namespace

std::string serialize_detector(const Detector& det, const std::string& extra_meta) {
  nlohmann::json meta;
  meta["config"] = config_json(det.config());
  meta["extra"] = nlohmann::json::parse(extra_meta);
  ckpt::File f{kMagic, kVersion, meta.dump(), {}};
  for (const auto& p : det.params()) f.tensors.push_back(ckpt::NamedTensor::from(p.name, p.value));
  return ckpt::serialize(f);
}

void save_detector(const std::filesystem::path& path, const Detector& det, const std::string& extra_meta) {
  io::write_atomic(path, serialize_detector(det, extra_meta));
}

Detector load_detector(const std::filesystem::path& path) {
  auto f = ckpt::load(path, kMagic, kVersion);
  DetectorConfig cfg;
  try {
    auto m = nlohmann::json::parse(f.metadata).at("config");
    cfg.image_size = m.at("image_size");
    cfg.num_landmarks = m.at("num_landmarks");
    cfg.tau = m.at("tau");
    cfg.stack.clear();
    for (const auto& s : m.at("stack")) cfg.stack.push_back({s.at(0), s.at(1), s.at(2)});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("detector checkpoint metadata: ") + e.what());
  }
  Detector det(cfg);
  for (auto& p : det.params()) {
    const auto* t = f.find(p.name);
    if (!t) throw FormatError("detector checkpoint is missing tensor '" + p.name + "'");
    if (t->shape != p.value.shape()) {
      throw FormatError("detector tensor '" + p.name + "' has shape " + shape_to_string(t->shape) + ", expected " +
                        p.value.shape_str());
    }
    p.value = t->as_double();
  }
  return det;
}

}  // namespace uvflow::lmk
