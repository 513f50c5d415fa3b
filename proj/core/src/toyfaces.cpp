#include "uvflow/toyfaces.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "uvflow/error.hpp"
#include "uvflow/io.hpp"
#include "uvflow/rng.hpp"

namespace uvflow::toy {

namespace {

constexpr int N = kCanvas;
constexpr double kPi = std::numbers::pi;

// Layout v1 anchors, pixel centres at integer coordinates.
constexpr double kBrowY = 19.0;
constexpr double kBrowX[4] = {14.0, 27.0, 37.0, 50.0};
constexpr double kEyeY = 28.0;
constexpr double kEyeX[4] = {15.0, 27.0, 37.0, 49.0};
constexpr double kMouthY = 47.0;
constexpr double kMouthCx = 32.0;
constexpr double kNoseX = 32.0;
constexpr double kNoseY = 39.0;
constexpr double kChinX = 32.0;
constexpr double kChinY = 57.0;
constexpr double kArchHeight = 3.0;
constexpr double kMottle = 0.01;

std::size_t pix(int x, int y) { return (static_cast<std::size_t>(y) * N + x) * 3; }

void put(Tensor& img, int x, int y, const Rgb& c) {
  std::size_t o = pix(x, y);
  img[o] = c[0];
  img[o + 1] = c[1];
  img[o + 2] = c[2];
}

Rgb scaled(const Rgb& c, double s) { return {c[0] * s, c[1] * s, c[2] * s}; }

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void check_range(const char* name, double v, double lo, double hi) {
  if (!std::isfinite(v) || v < lo || v > hi) {
    throw ValidationError(std::string(name) + " = " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
  }
}

void check_color(const char* name, const Rgb& c) {
  for (double v : c) check_range(name, v, 0.0, 1.0);
}

Mask box_mask(int x0, int x1, int y0, int y1) {  // inclusive bounds
  Mask m(N * N, 0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m[y * N + x] = 1;
  return m;
}

// Brow stroke between x endpoints; endpoints sit exactly at base_y.
void draw_brow(Tensor& img, double xa, double xb, const BrowParams& b) {
  double base = kBrowY + b.y_offset;
  for (int x = static_cast<int>(std::ceil(xa - 0.5)); x <= static_cast<int>(std::floor(xb + 0.5)); ++x) {
    double u = std::clamp((x - xa) / (xb - xa), 0.0, 1.0);
    double yc = base - kArchHeight * b.arch * std::sin(kPi * u);
    for (int y = 0; y < N; ++y) {
      if (std::abs(y - yc) <= b.thickness / 2.0) put(img, x, y, b.color);
    }
  }
}

void draw_closed_eye(Tensor& img, double xa, double xb, const Rgb& lash) {
  for (int x = static_cast<int>(std::ceil(xa - 0.5)); x <= static_cast<int>(std::floor(xb + 0.5)); ++x) {
    double u = std::clamp((x - xa) / (xb - xa), 0.0, 1.0);
    double yc = kEyeY + 1.5 * std::sin(kPi * u);
    for (int y = 0; y < N; ++y) {
      if (std::abs(y - yc) <= 0.6) put(img, x, y, lash);
    }
  }
}

void draw_open_eye(Tensor& img, double xa, double xb, const Rgb& lash) {
  const Rgb sclera{0.95, 0.95, 0.93};
  const Rgb iris{0.18, 0.22, 0.30};
  double cx = 0.5 * (xa + xb);
  for (int x = static_cast<int>(std::ceil(xa - 0.5)); x <= static_cast<int>(std::floor(xb + 0.5)); ++x) {
    double u = std::clamp((x - xa) / (xb - xa), 0.0, 1.0);
    double up = kEyeY - 2.5 * std::sin(kPi * u);
    double lo = kEyeY + 1.5 * std::sin(kPi * u);
    for (int y = 0; y < N; ++y) {
      if (y >= up && y <= lo) {
        double dx = x - cx;
        double dy = y - (kEyeY - 0.3);
        put(img, x, y, dx * dx + dy * dy <= 1.8 * 1.8 ? iris : sclera);
      }
      if (std::abs(y - up) <= 0.6) put(img, x, y, lash);
    }
  }
}

void draw_mouth(Tensor& img, const MouthParams& m) {
  double xa = kMouthCx - m.width / 2.0;
  double xb = kMouthCx + m.width / 2.0;
  for (int x = static_cast<int>(std::ceil(xa - 0.5)); x <= static_cast<int>(std::floor(xb + 0.5)); ++x) {
    double u = std::clamp((x - xa) / (xb - xa), 0.0, 1.0);
    double s = std::sin(kPi * u);
    double yc = kMouthY + 2.0 * m.curvature * s;
    double half = 0.8 + 2.2 * s;
    for (int y = 0; y < N; ++y) {
      if (std::abs(y - yc) <= half) put(img, x, y, m.lip_color);
    }
  }
}

// Background skin with edge shading and per-seed mottling.
Tensor skin_layer(const FaceParams& p) {
  Tensor img({N, N, 3});
  Rng rng(split_seed(p.seed, 0x5151));
  const double c = (N - 1) / 2.0;
  for (int y = 0; y < N; ++y) {
    for (int x = 0; x < N; ++x) {
      double r2 = ((x - c) * (x - c) + (y - c) * (y - c)) / (2.0 * c * c);
      double shade = 1.0 - 0.12 * r2;
      double noise = uniform(rng, -kMottle, kMottle);
      Rgb px;
      for (int k = 0; k < 3; ++k) px[k] = std::clamp(p.skin_tone[k] * shade + noise, 0.0, 1.0);
      put(img, x, y, px);
    }
  }
  // nose bridge shading, then the tip mark
  for (int y = 31; y <= 37; ++y)
    for (int x = 29; x <= 35; ++x) {
      std::size_t o = pix(x, y);
      for (int k = 0; k < 3; ++k) img[o + k] *= 1.0 - 0.12 * p.nose.shading;
    }
  Rgb tip = scaled(p.skin_tone, 0.55 - 0.2 * p.nose.shading);
  for (int y = 37; y <= 41; ++y)
    for (int x = 30; x <= 34; ++x) {
      double dx = x - kNoseX, dy = y - kNoseY;
      if (dx * dx + dy * dy <= 1.5 * 1.5 + 1e-9) put(img, x, y, tip);
    }
  Rgb chin = scaled(p.skin_tone, 0.7);
  for (int x = 28; x <= 36; ++x) put(img, x, static_cast<int>(kChinY), chin);
  return img;
}

struct Layers {
  bool mouth = true;
  bool brows = true;
  bool open_eyes = false;
};

Tensor render_layers(const FaceParams& p, Layers layers) {
  validate(p);
  Tensor img = skin_layer(p);
  double half = p.eyes.spacing / 2.0;
  auto draw_eye = layers.open_eyes ? draw_open_eye : draw_closed_eye;
  draw_eye(img, kEyeX[0] - half, kEyeX[1] - half, p.eyes.lash_color);
  draw_eye(img, kEyeX[2] + half, kEyeX[3] + half, p.eyes.lash_color);
  if (layers.mouth) draw_mouth(img, p.mouth);
  if (layers.brows) {
    draw_brow(img, kBrowX[0], kBrowX[1], p.brow);
    draw_brow(img, kBrowX[2], kBrowX[3], p.brow);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Warp

struct Vec2 {
  double x, y;
};

constexpr double kGridU[3] = {0.0, 31.5, 63.0};
constexpr Vec2 kDest[3][3] = {
    {{10.0, 6.0}, {31.5, 4.0}, {53.0, 6.0}},
    {{6.0, 32.0}, {31.5, 33.0}, {57.0, 32.0}},
    {{14.0, 60.0}, {31.5, 62.0}, {49.0, 60.0}},
};

struct Triangle {
  Vec2 src[3];
  Vec2 dst[3];
};

std::vector<Triangle> triangles(PoseShift s) {
  std::vector<Triangle> tris;
  auto src = [](int r, int c) { return Vec2{kGridU[c], kGridU[r]}; };
  auto dst = [&](int r, int c) { return Vec2{kDest[r][c].x + s.dx, kDest[r][c].y + s.dy}; };
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      tris.push_back({{src(r, c), src(r, c + 1), src(r + 1, c + 1)}, {dst(r, c), dst(r, c + 1), dst(r + 1, c + 1)}});
      tris.push_back({{src(r, c), src(r + 1, c + 1), src(r + 1, c)}, {dst(r, c), dst(r + 1, c + 1), dst(r + 1, c)}});
    }
  }
  return tris;
}

// Barycentric coordinates of p in triangle t; true if inside (closed).
bool barycentric(const Vec2 t[3], Vec2 p, double w[3]) {
  double d = (t[1].y - t[2].y) * (t[0].x - t[2].x) + (t[2].x - t[1].x) * (t[0].y - t[2].y);
  w[0] = ((t[1].y - t[2].y) * (p.x - t[2].x) + (t[2].x - t[1].x) * (p.y - t[2].y)) / d;
  w[1] = ((t[2].y - t[0].y) * (p.x - t[2].x) + (t[0].x - t[2].x) * (p.y - t[2].y)) / d;
  w[2] = 1.0 - w[0] - w[1];
  constexpr double tol = -1e-9;
  return w[0] >= tol && w[1] >= tol && w[2] >= tol;
}

void check_shift(PoseShift s) {
  if (std::abs(s.dx) > 8 || std::abs(s.dy) > 8) {
    throw ValidationError("pose shift (" + std::to_string(s.dx) + ", " + std::to_string(s.dy) + ") exceeds 8 px");
  }
}

std::vector<std::uint8_t> occluder_cover(const std::vector<Occluder>& occ) {
  std::vector<std::uint8_t> m(N * N, 0);
  for (const auto& o : occ) {
    for (int y = std::max(0, o.y0); y < std::min(N, o.y1); ++y)
      for (int x = std::max(0, o.x0); x < std::min(N, o.x1); ++x) m[y * N + x] = 1;
  }
  return m;
}

Tensor box_blur3(const Tensor& img) {
  Tensor out(img.shape());
  for (int y = 0; y < N; ++y)
    for (int x = 0; x < N; ++x)
      for (int k = 0; k < 3; ++k) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = std::clamp(y + dy, 0, N - 1), xx = std::clamp(x + dx, 0, N - 1);
            s += img[pix(xx, yy) + k];
          }
        out[pix(x, y) + k] = s / 9.0;
      }
  return out;
}

std::string shape_name(OccluderShape s) { return s == OccluderShape::rect ? "rect" : "bar"; }

}  // namespace

// ---------------------------------------------------------------------------

std::string style_name(Style s) {
  switch (s) {
    case Style::flat: return "flat";
    case Style::painterly: return "painterly";
    case Style::pixel: return "pixel";
    case Style::sketch: return "sketch";
  }
  throw ValidationError("unknown style id");
}

Style parse_style(const std::string& name) {
  for (int i = 0; i < kNumStyles; ++i) {
    if (style_name(static_cast<Style>(i)) == name) return static_cast<Style>(i);
  }
  throw ValidationError("unknown style '" + name + "'");
}

void validate(const FaceParams& p) {
  check_color("skin_tone", p.skin_tone);
  check_range("brow.y_offset", p.brow.y_offset, -5.0, 3.0);
  check_range("brow.thickness", p.brow.thickness, 1.0, 4.0);
  check_range("brow.arch", p.brow.arch, 0.0, 1.0);
  check_color("brow.color", p.brow.color);
  check_range("mouth.width", p.mouth.width, 10.0, 28.0);
  check_range("mouth.curvature", p.mouth.curvature, -1.0, 1.0);
  check_color("mouth.lip_color", p.mouth.lip_color);
  check_range("eyes.spacing", p.eyes.spacing, -4.0, 4.0);
  check_color("eyes.lash_color", p.eyes.lash_color);
  check_range("nose.shading", p.nose.shading, 0.0, 1.0);
  if (static_cast<int>(p.style) >= kNumStyles) {
    throw ValidationError("style id out of range");
  }
}

UvTexture render_texture(const FaceParams& params) { return {render_layers(params, {}), kLayoutVersion}; }

UvTexture render_texture_open_eyes(const FaceParams& params) {
  return {render_layers(params, {.open_eyes = true}), kLayoutVersion};
}

LayeredTargets layered_targets(const FaceParams& params) {
  LayeredTargets t;
  t.t_skin = {render_layers(params, {.mouth = false, .brows = false}), kLayoutVersion};
  t.t_skin_mouth = {render_layers(params, {.mouth = true, .brows = false}), kLayoutVersion};
  t.t_full = render_texture(params);
  return t;
}

LandmarkSet feature_landmarks(const FaceParams& p) {
  validate(p);
  LandmarkSet s;
  s.points.resize(kNumLandmarks);
  double by = kBrowY + p.brow.y_offset;
  for (int i = 0; i < 4; ++i) s.points[kBrowLeftOuter + i] = {kBrowX[i], by};
  double half = p.eyes.spacing / 2.0;
  s.points[kEyeLeftOuter] = {kEyeX[0] - half, kEyeY};
  s.points[kEyeLeftInner] = {kEyeX[1] - half, kEyeY};
  s.points[kEyeRightInner] = {kEyeX[2] + half, kEyeY};
  s.points[kEyeRightOuter] = {kEyeX[3] + half, kEyeY};
  s.points[kMouthLeft] = {kMouthCx - p.mouth.width / 2.0, kMouthY};
  s.points[kMouthRight] = {kMouthCx + p.mouth.width / 2.0, kMouthY};
  s.points[kNoseTip] = {kNoseX, kNoseY};
  s.points[kChin] = {kChinX, kChinY};
  return s;
}

LandmarkSet canonical_landmarks() { return feature_landmarks(FaceParams{}); }

const RegionMasks& region_masks() {
  static const RegionMasks masks = [] {
    RegionMasks m;
    m.mouth_mask = box_mask(16, 48, 42, 53);
    m.brow_mask = box_mask(10, 54, 9, 24);
    m.skin_mask.assign(N * N, 0);
    for (int i = 0; i < N * N; ++i) m.skin_mask[i] = !(m.mouth_mask[i] || m.brow_mask[i]);
    return m;
  }();
  return masks;
}

const Mask& eye_interior_mask() {
  static const Mask m = [] {
    Mask a = box_mask(16, 26, 25, 29);
    Mask b = box_mask(38, 48, 25, 29);
    for (int i = 0; i < N * N; ++i) a[i] |= b[i];
    return a;
  }();
  return m;
}

const Mask& nose_region_mask() {
  static const Mask m = box_mask(26, 38, 30, 41);
  return m;
}

const Mask& eye_region_mask() {
  static const Mask m = box_mask(11, 53, 24, 32);
  return m;
}

int mask_count(const Mask& m) { return static_cast<int>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; })); }

// ---------------------------------------------------------------------------

WarpTable warp_table(PoseShift shift) {
  check_shift(shift);
  auto tris = triangles(shift);
  WarpTable t;
  t.source.assign(N * N, -1);
  for (int y = 0; y < N; ++y) {
    for (int x = 0; x < N; ++x) {
      for (const auto& tri : tris) {
        double w[3];
        if (!barycentric(tri.dst, {double(x), double(y)}, w)) continue;
        double sx = w[0] * tri.src[0].x + w[1] * tri.src[1].x + w[2] * tri.src[2].x;
        double sy = w[0] * tri.src[0].y + w[1] * tri.src[1].y + w[2] * tri.src[2].y;
        int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, N - 1);
        int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, N - 1);
        t.source[y * N + x] = iy * N + ix;
        ++t.face_pixels;
        break;
      }
    }
  }
  return t;
}

Mask face_region(PoseShift shift) {
  auto t = warp_table(shift);
  Mask m(N * N, 0);
  for (int i = 0; i < N * N; ++i) m[i] = t.source[i] >= 0;
  return m;
}

Tensor warp_texture(const Tensor& texture, PoseShift shift) {
  if (texture.shape() != std::vector<int>{N, N, 3}) {
    throw ValidationError("warp_texture expects 64x64x3, got " + texture.shape_str());
  }
  auto t = warp_table(shift);
  Tensor out({N, N, 3});
  for (int i = 0; i < N * N; ++i) {
    for (int k = 0; k < 3; ++k) {
      out[i * 3 + k] = t.source[i] >= 0 ? texture[static_cast<std::size_t>(t.source[i]) * 3 + k] : kBackground[k];
    }
  }
  return out;
}

Tensor unwarp_portrait(const Tensor& portrait, Mask* covered) {
  if (portrait.shape() != std::vector<int>{N, N, 3}) {
    throw ValidationError("unwarp_portrait expects 64x64x3, got " + portrait.shape_str());
  }
  auto t = warp_table({});
  Tensor out({N, N, 3});
  Mask cov(N * N, 0);
  for (int i = 0; i < N * N; ++i) {
    int s = t.source[i];
    if (s < 0) continue;
    for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>(s) * 3 + k] = portrait[i * 3 + k];
    cov[s] = 1;
  }
  if (covered) *covered = std::move(cov);
  return out;
}

Tensor apply_style(const Tensor& image, Style style) {
  switch (style) {
    case Style::flat: return image;
    case Style::painterly: {
      Tensor out = box_blur3(image);
      for (int i = 0; i < N * N; ++i) {
        double* c = out.data() + i * 3;
        double l = luminance(c[0], c[1], c[2]);
        for (int k = 0; k < 3; ++k) c[k] = std::clamp(l + 1.35 * (c[k] - l), 0.0, 1.0);
      }
      return out;
    }
    case Style::pixel: {
      constexpr int B = 4;
      Tensor out(image.shape());
      for (int by = 0; by < N; by += B)
        for (int bx = 0; bx < N; bx += B)
          for (int k = 0; k < 3; ++k) {
            double s = 0.0;
            for (int y = by; y < by + B; ++y)
              for (int x = bx; x < bx + B; ++x) s += image[pix(x, y) + k];
            s /= B * B;
            for (int y = by; y < by + B; ++y)
              for (int x = bx; x < bx + B; ++x) out[pix(x, y) + k] = s;
          }
      return out;
    }
    case Style::sketch: {
      std::vector<double> lum(N * N);
      for (int i = 0; i < N * N; ++i) lum[i] = luminance(image[i * 3], image[i * 3 + 1], image[i * 3 + 2]);
      auto L = [&](int x, int y) { return lum[std::clamp(y, 0, N - 1) * N + std::clamp(x, 0, N - 1)]; };
      Tensor out(image.shape());
      for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
          double gx = (L(x + 1, y - 1) + 2 * L(x + 1, y) + L(x + 1, y + 1)) - (L(x - 1, y - 1) + 2 * L(x - 1, y) + L(x - 1, y + 1));
          double gy = (L(x - 1, y + 1) + 2 * L(x, y + 1) + L(x + 1, y + 1)) - (L(x - 1, y - 1) + 2 * L(x, y - 1) + L(x + 1, y - 1));
          double ink = std::clamp(1.0 - 2.0 * std::hypot(gx, gy), 0.0, 1.0);
          for (int k = 0; k < 3; ++k) out[pix(x, y) + k] = 0.5 * image[pix(x, y) + k] + 0.5 * ink;
        }
      return out;
    }
  }
  throw ValidationError("unknown style id");
}

double occluder_coverage(const std::vector<Occluder>& occluders, PoseShift shift) {
  Mask face = face_region(shift);
  auto cover = occluder_cover(occluders);
  int hit = 0, total = 0;
  for (int i = 0; i < N * N; ++i) {
    total += face[i];
    hit += face[i] && cover[i];
  }
  return total ? static_cast<double>(hit) / total : 0.0;
}

Portrait render_portrait(const FaceParams& params, PoseShift pose_shift, const std::vector<Occluder>& occluders) {
  validate(params);
  check_shift(pose_shift);
  for (const auto& o : occluders) {
    check_color("occluder.color", o.color);
    if (o.x1 <= o.x0 || o.y1 <= o.y0) throw ValidationError("occluder box is empty");
  }
  double cov = occluder_coverage(occluders, pose_shift);
  if (cov > 0.4) throw ValidationError("occluders cover " + std::to_string(cov * 100.0) + "% of the face (max 40%)");

  Tensor img = warp_texture(render_texture_open_eyes(params).pixels, pose_shift);
  img = apply_style(img, params.style);
  for (const auto& o : occluders) {
    for (int y = std::max(0, o.y0); y < std::min(N, o.y1); ++y)
      for (int x = std::max(0, o.x0); x < std::min(N, o.x1); ++x) put(img, x, y, o.color);
  }
  return {std::move(img), pose_shift, occluders};
}

// ---------------------------------------------------------------------------
// Sampling

std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index) { return split_seed(master, index); }

std::array<int, kNumStyles> style_counts(int n, const std::array<double, kNumStyles>& weights) {
  if (n < 0) throw ValidationError("negative sample count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("style weights must be finite and nonnegative");
    total += w;
  }
  if (total <= 0.0) throw ValidationError("style weights sum to zero");
  std::array<int, kNumStyles> counts{};
  std::array<double, kNumStyles> frac{};
  int assigned = 0;
  for (int i = 0; i < kNumStyles; ++i) {
    double exact = n * weights[i] / total;
    counts[i] = static_cast<int>(std::floor(exact));
    frac[i] = exact - counts[i];
    assigned += counts[i];
  }
  std::array<int, kNumStyles> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (int i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % kNumStyles]];
  return counts;
}

std::vector<Style> style_assignment(int n, std::uint64_t seed, const std::array<double, kNumStyles>& weights) {
  auto counts = style_counts(n, weights);
  std::vector<Style> out;
  out.reserve(n);
  for (int s = 0; s < kNumStyles; ++s) out.insert(out.end(), counts[s], static_cast<Style>(s));
  Rng rng(split_seed(seed, 0x57A1E));
  for (int i = n - 1; i > 0; --i) {
    int j = uniform_int(rng, 0, i);
    std::swap(out[i], out[j]);
  }
  return out;
}

FaceParams sample_params(std::uint64_t stream_seed, const DatasetConfig& cfg, Style style) {
  Rng rng(stream_seed);
  FaceParams p;
  double r = uniform(rng, 0.55, 0.85);
  p.skin_tone = {r, r * uniform(rng, 0.70, 0.82), r * uniform(rng, 0.52, 0.66)};
  double b = uniform(rng, 0.08, 0.35);
  p.brow.color = {b, b * 0.75, b * 0.55};
  p.brow.y_offset = uniform(rng, -cfg.brow_offset_range, cfg.brow_offset_range);
  p.brow.thickness = uniform(rng, 1.5, 3.5);
  p.brow.arch = uniform(rng, 0.0, 1.0);
  p.mouth.width = uniform(rng, cfg.width_min, cfg.width_max);
  p.mouth.lip_color = {uniform(rng, 0.60, 0.85), uniform(rng, 0.20, 0.38), uniform(rng, 0.25, 0.40)};
  p.mouth.curvature = uniform(rng, -0.6, 0.6);
  p.eyes.spacing = uniform(rng, -cfg.spacing_range, cfg.spacing_range);
  double l = uniform(rng, 0.05, 0.15);
  p.eyes.lash_color = {l, l * 0.9, l * 0.8};
  p.nose.shading = uniform(rng, 0.0, 1.0);
  p.style = style;
  p.seed = stream_seed;
  validate(p);
  return p;
}

std::vector<Occluder> sample_occluders(std::uint64_t stream_seed, PoseShift shift, double prob) {
  Rng rng(stream_seed);
  std::vector<Occluder> out;
  if (uniform(rng, 0.0, 1.0) >= prob) return out;
  for (int attempt = 0; attempt < 32; ++attempt) {
    Occluder o;
    o.shape = uniform(rng, 0.0, 1.0) < 0.5 ? OccluderShape::rect : OccluderShape::bar;
    int w = o.shape == OccluderShape::rect ? uniform_int(rng, 10, 22) : uniform_int(rng, 30, 46);
    int h = o.shape == OccluderShape::rect ? uniform_int(rng, 8, 18) : uniform_int(rng, 4, 7);
    o.x0 = uniform_int(rng, 6, 58 - w) + shift.dx;
    o.y0 = uniform_int(rng, 6, 60 - h) + shift.dy;
    o.x1 = o.x0 + w;
    o.y1 = o.y0 + h;
    double g = uniform(rng, 0.1, 0.6);
    o.color = {g, std::clamp(g + uniform(rng, -0.1, 0.1), 0.0, 1.0), std::clamp(g + uniform(rng, -0.1, 0.1), 0.0, 1.0)};
    if (occluder_coverage({o}, shift) <= 0.4) {
      out.push_back(o);
      return out;
    }
  }
  return out;
}

Sample make_sample(std::uint64_t master_seed, std::uint64_t index, Style style, const DatasetConfig& cfg) {
  std::uint64_t stream = sample_seed(master_seed, index);
  Sample s;
  s.index = index;
  s.params = sample_params(stream, cfg, style);
  Rng rng(split_seed(stream, 1));
  s.pose_shift = {uniform_int(rng, -cfg.max_pose_shift, cfg.max_pose_shift),
                  uniform_int(rng, -cfg.max_pose_shift, cfg.max_pose_shift)};
  s.occluders = sample_occluders(split_seed(stream, 2), s.pose_shift, cfg.occlusion_prob);
  s.portrait = render_portrait(s.params, s.pose_shift, s.occluders);
  s.layers = layered_targets(s.params);
  s.texture = s.layers.t_full;
  s.landmarks = feature_landmarks(s.params);
  return s;
}

std::vector<Sample> generate_samples(int n, std::uint64_t seed, const DatasetConfig& cfg, int threads) {
  if (n < 1) throw ValidationError("sample count must be at least 1");
  auto styles = style_assignment(n, seed, cfg.style_weights);
  std::vector<Sample> out(n);
  threads = std::clamp(threads, 1, n);
  auto work = [&](int t) {
    for (int i = t; i < n; i += threads) out[i] = make_sample(seed, i, styles[i], cfg);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records

namespace {

using nlohmann::json;

json rgb_json(const Rgb& c) { return json::array({c[0], c[1], c[2]}); }
Rgb rgb_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

std::string params_to_json(const Sample& s) {
  const auto& p = s.params;
  json j;
  j["layout_version"] = kLayoutVersion;
  j["index"] = s.index;
  j["params"] = {
      {"skin_tone", rgb_json(p.skin_tone)},
      {"brow", {{"y_offset", p.brow.y_offset}, {"thickness", p.brow.thickness}, {"arch", p.brow.arch}, {"color", rgb_json(p.brow.color)}}},
      {"mouth", {{"width", p.mouth.width}, {"lip_color", rgb_json(p.mouth.lip_color)}, {"curvature", p.mouth.curvature}}},
      {"eyes", {{"spacing", p.eyes.spacing}, {"lash_color", rgb_json(p.eyes.lash_color)}}},
      {"nose", {{"shading", p.nose.shading}}},
      {"style", style_name(p.style)},
      {"seed", p.seed},
  };
  j["pose_shift"] = {s.pose_shift.dx, s.pose_shift.dy};
  j["occluders"] = json::array();
  for (const auto& o : s.occluders) {
    j["occluders"].push_back(
        {{"shape", shape_name(o.shape)}, {"bbox", {o.x0, o.y0, o.x1, o.y1}}, {"color", rgb_json(o.color)}});
  }
  j["occluder_coverage"] = occluder_coverage(s.occluders, s.pose_shift);
  j["landmarks"] = json::array();
  for (const auto& pt : s.landmarks.points) j["landmarks"].push_back({pt.x, pt.y});
  const auto& m = region_masks();
  j["masks"] = {{"skin", mask_count(m.skin_mask)}, {"mouth", mask_count(m.mouth_mask)}, {"brow", mask_count(m.brow_mask)}};
  return j.dump(2) + "\n";
}

Sample sample_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("sample record is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("layout_version").get<int>() != kLayoutVersion) {
      throw FormatError("sample record has layout version " + j.at("layout_version").dump());
    }
    Sample s;
    s.index = j.at("index").get<std::uint64_t>();
    const auto& jp = j.at("params");
    auto& p = s.params;
    p.skin_tone = rgb_from(jp.at("skin_tone"));
    p.brow.y_offset = jp.at("brow").at("y_offset");
    p.brow.thickness = jp.at("brow").at("thickness");
    p.brow.arch = jp.at("brow").at("arch");
    p.brow.color = rgb_from(jp.at("brow").at("color"));
    p.mouth.width = jp.at("mouth").at("width");
    p.mouth.lip_color = rgb_from(jp.at("mouth").at("lip_color"));
    p.mouth.curvature = jp.at("mouth").at("curvature");
    p.eyes.spacing = jp.at("eyes").at("spacing");
    p.eyes.lash_color = rgb_from(jp.at("eyes").at("lash_color"));
    p.nose.shading = jp.at("nose").at("shading");
    p.style = parse_style(jp.at("style").get<std::string>());
    p.seed = jp.at("seed").get<std::uint64_t>();
    validate(p);
    s.pose_shift = {j.at("pose_shift").at(0).get<int>(), j.at("pose_shift").at(1).get<int>()};
    for (const auto& jo : j.at("occluders")) {
      Occluder o;
      o.shape = jo.at("shape").get<std::string>() == "bar" ? OccluderShape::bar : OccluderShape::rect;
      const auto& b = jo.at("bbox");
      o.x0 = b.at(0);
      o.y0 = b.at(1);
      o.x1 = b.at(2);
      o.y1 = b.at(3);
      o.color = rgb_from(jo.at("color"));
      s.occluders.push_back(o);
    }
    for (const auto& pt : j.at("landmarks")) s.landmarks.points.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed sample record: ") + e.what());
  }
}

namespace {

std::string sample_dir_name(std::uint64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05llu", static_cast<unsigned long long>(i));
  return buf;
}

const char* kImageFiles[] = {"portrait.png", "texture.png", "t_skin.png", "t_skin_mouth.png"};

}  // namespace

std::vector<ManifestEntry> dataset_gen(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                       const DatasetConfig& cfg, int threads) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

  auto samples = generate_samples(n, seed, cfg, threads);
  std::vector<ManifestEntry> manifest;
  for (const auto& s : samples) {
    std::string name = sample_dir_name(s.index);
    fs::path dir = out_dir / name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const Tensor* images[] = {&s.portrait.pixels, &s.texture.pixels, &s.layers.t_skin.pixels, &s.layers.t_skin_mouth.pixels};
    for (int k = 0; k < 4; ++k) {
      io::write_png(dir / kImageFiles[k], *images[k]);
      manifest.push_back({name + "/" + kImageFiles[k], io::sha256_file(dir / kImageFiles[k])});
    }
    io::write_atomic(dir / "record.json", params_to_json(s));
    manifest.push_back({name + "/record.json", io::sha256_file(dir / "record.json")});
  }
  std::string text;
  for (const auto& e : manifest) text += e.path + "\t" + e.sha256 + "\n";
  io::write_atomic(out_dir / "manifest.tsv", text);
  return manifest;
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::string text = io::read_text(dir / "manifest.tsv");
  std::vector<std::string> sample_dirs;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("manifest line without tab: " + line);
    std::string path = line.substr(0, tab);
    auto slash = path.find('/');
    if (slash == std::string::npos) continue;
    std::string d = path.substr(0, slash);
    if (sample_dirs.empty() || sample_dirs.back() != d) sample_dirs.push_back(d);
  }
  if (sample_dirs.empty()) throw FormatError("manifest in " + dir.string() + " lists no samples");
  std::vector<Sample> out;
  out.reserve(sample_dirs.size());
  for (const auto& d : sample_dirs) {
    auto base = dir / d;
    Sample s = sample_from_json(io::read_text(base / "record.json"));
    s.portrait.pixels = io::read_png(base / "portrait.png");
    s.portrait.pose_shift = s.pose_shift;
    s.portrait.occluders = s.occluders;
    s.texture.pixels = io::read_png(base / "texture.png");
    s.layers.t_full = s.texture;
    s.layers.t_skin.pixels = io::read_png(base / "t_skin.png");
    s.layers.t_skin_mouth.pixels = io::read_png(base / "t_skin_mouth.png");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace uvflow::toy
