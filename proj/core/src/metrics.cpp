#include "uvflow/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "uvflow/error.hpp"
#include "uvflow/spectra.hpp"

namespace uvflow::metrics {

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw ValidationError(std::string(what) + ": shapes " + a.shape_str() + " and " + b.shape_str() + " differ");
  if (a.empty()) throw ValidationError(std::string(what) + ": empty images");
}

constexpr int kWin = 11;
constexpr int kBins = 16;  // per channel, palette histogram

std::array<double, kWin> gauss_window() {
  std::array<double, kWin> w{};
  double s = 0.0;
  for (int i = 0; i < kWin; ++i) s += w[i] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (double& v : w) v /= s;
  return w;
}

// Valid-mode separable filtering of a [h, w] image.
Tensor filter(const Tensor& g, const std::array<double, kWin>& k) {
  const int h = g.dim(0), w = g.dim(1), oh = h - kWin + 1, ow = w - kWin + 1;
  Tensor tmp({h, ow}), out({oh, ow});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWin; ++i) s += k[i] * g.at(y, x + i);
      tmp.at(y, x) = s;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWin; ++i) s += k[i] * tmp.at(y + i, x);
      out.at(y, x) = s;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.size())));
}

double ssim(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "ssim");
  Tensor ga = spec::luminance(a), gb = spec::luminance(b);
  if (ga.dim(0) < kWin || ga.dim(1) < kWin) throw ValidationError("ssim: image smaller than the 11x11 window");
  const auto k = gauss_window();
  Tensor aa(ga.shape()), bb(ga.shape()), ab(ga.shape());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  Tensor ma = filter(ga, k), mb = filter(gb, k), saa = filter(aa, k), sbb = filter(bb, k), sab = filter(ab, k);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
    total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(ma.size());
}

double landmark_l2(const toy::LandmarkSet& a, const toy::LandmarkSet& b) {
  if (a.points.empty()) throw ValidationError("landmark_l2 needs at least one landmark");
  if (a.points.size() != b.points.size()) throw ValidationError("landmark counts differ");
  double s = 0.0;
  for (std::size_t k = 0; k < a.points.size(); ++k)
    s += std::hypot(a.points[k].x - b.points[k].x, a.points[k].y - b.points[k].y);
  return s / static_cast<double>(a.points.size());
}

double landmark_l2(const Tensor& texture, const lmk::Detector& detector, const toy::LandmarkSet& l_star) {
  if (l_star.points.empty()) throw ValidationError("landmark_l2 needs at least one landmark");
  if (static_cast<int>(l_star.points.size()) != detector.config().num_landmarks)
    throw ValidationError("landmark count does not match the detector");
  return landmark_l2(detector.detect(texture), l_star);
}

double landmark_y_error(const toy::LandmarkSet& a, const toy::LandmarkSet& b) {
  if (a.points.empty() || a.points.size() != b.points.size()) throw ValidationError("landmark counts differ or are zero");
  double s = 0.0;
  for (std::size_t k = 0; k < a.points.size(); ++k) s += std::abs(a.points[k].y - b.points[k].y);
  return s / static_cast<double>(a.points.size());
}

double masked_l2(const Tensor& a, const Tensor& b, const toy::Mask& mask) {
  same_shape(a, b, "masked_l2");
  if (a.rank() != 3) throw ValidationError("masked_l2 expects [H, W, C] images");
  const std::size_t px = static_cast<std::size_t>(a.dim(0)) * a.dim(1);
  const int c = a.dim(2);
  if (mask.size() != px) throw ValidationError("mask size does not match the image");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < px; ++p) {
    if (!mask[p]) continue;
    for (int k = 0; k < c; ++k) {
      double d = a[p * c + k] - b[p * c + k];
      s += d * d;
    }
    n += static_cast<std::size_t>(c);
  }
  if (n == 0) throw ValidationError("masked_l2: mask is empty");
  return s / static_cast<double>(n);
}

double palette_hist_distance(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "palette_hist_distance");
  if (a.rank() != 3 || a.dim(2) != 3) throw ValidationError("palette histogram needs RGB images");
  auto hist = [&](const Tensor& img) {
    std::vector<double> h(kBins * kBins * kBins, 0.0);
    const std::size_t px = img.size() / 3;
    auto bin = [](double v) { return std::clamp(static_cast<int>(std::floor(v * kBins)), 0, kBins - 1); };
    for (std::size_t p = 0; p < px; ++p)
      h[(bin(img[3 * p]) * kBins + bin(img[3 * p + 1])) * kBins + bin(img[3 * p + 2])] += 1.0 / static_cast<double>(px);
    return h;
  };
  auto ha = hist(a), hb = hist(b);
  double d = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i) d += std::abs(ha[i] - hb[i]);
  return d;
}

toy::Mask mask_or(const toy::Mask& a, const toy::Mask& b) {
  if (a.size() != b.size()) throw ValidationError("mask sizes differ");
  toy::Mask m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = a[i] || b[i];
  return m;
}

toy::Mask mask_not(const toy::Mask& a) {
  toy::Mask m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = !a[i];
  return m;
}

void MetricReport::add(const std::string& id, const std::map<std::string, double>& values) {
  if (columns.empty())
    for (const auto& kv : values) columns.push_back(kv.first);
  std::vector<double> row;
  for (const auto& c : columns) {
    auto it = values.find(c);
    if (it == values.end()) throw ValidationError("metric '" + c + "' missing for sample " + id);
    row.push_back(it->second);
  }
  if (values.size() != columns.size()) throw ValidationError("sample " + id + " has extra metrics");
  sample_ids.push_back(id);
  rows.push_back(std::move(row));
}

std::map<std::string, double> MetricReport::aggregate() const {
  std::map<std::string, double> m;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    double s = 0.0;
    for (const auto& r : rows) s += r[c];
    m[columns[c]] = rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }
  return m;
}

std::string MetricReport::csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "sample_id";
  for (const auto& c : columns) os << ',' << c;
  os << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << sample_ids[i];
    for (double v : rows[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace uvflow::metrics
