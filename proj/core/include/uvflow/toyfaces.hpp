#pragma once

// Procedural paired (portrait, UV texture) faces with exact ground truth.
//
// Everything here is a pure function of its arguments. The texture layout is
// versioned: landmark tables, region masks and the portrait warp all belong
// to kLayoutVersion and change together.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uvflow/tensor.hpp"

namespace uvflow::toy {

inline constexpr int kLayoutVersion = 1;
inline constexpr int kCanvas = 64;
inline constexpr int kChannels = 3;
inline constexpr int kNumLandmarks = 12;

using Rgb = std::array<double, 3>;

enum class Style : std::uint8_t { flat = 0, painterly = 1, pixel = 2, sketch = 3 };
inline constexpr int kNumStyles = 4;

std::string style_name(Style s);
Style parse_style(const std::string& name);

struct BrowParams {
  double y_offset = 0.0;   // px, positive moves down
  double thickness = 2.0;  // px
  double arch = 0.4;       // 0 = straight, 1 = fully arched
  Rgb color{0.25, 0.17, 0.10};
  bool operator==(const BrowParams&) const = default;
};

struct MouthParams {
  double width = 18.0;      // px between corners
  Rgb lip_color{0.72, 0.30, 0.32};
  double curvature = 0.0;   // >0 smiles (centre lower than corners)
  bool operator==(const MouthParams&) const = default;
};

struct EyeParams {
  double spacing = 0.0;     // px added to the inter-eye distance
  Rgb lash_color{0.12, 0.08, 0.06};
  bool operator==(const EyeParams&) const = default;
};

struct NoseParams {
  double shading = 0.5;     // [0,1]
  bool operator==(const NoseParams&) const = default;
};

struct FaceParams {
  Rgb skin_tone{0.78, 0.60, 0.48};
  BrowParams brow;
  MouthParams mouth;
  EyeParams eyes;
  NoseParams nose;
  Style style = Style::flat;
  std::uint64_t seed = 0;

  bool operator==(const FaceParams&) const = default;
};

/// Throws ValidationError naming the first violated range.
void validate(const FaceParams& p);

/// H x W x C image, values in [0,1].
struct UvTexture {
  Tensor pixels;
  int layout_version = kLayoutVersion;
};

struct PoseShift {
  int dx = 0;
  int dy = 0;
};

enum class OccluderShape : std::uint8_t { rect = 0, bar = 1 };

struct Occluder {
  OccluderShape shape = OccluderShape::rect;
  int x0 = 0;  // inclusive pixel box
  int y0 = 0;
  int x1 = 0;  // exclusive
  int y1 = 0;
  Rgb color{0.2, 0.2, 0.2};
};

struct Portrait {
  Tensor pixels;
  PoseShift pose_shift;
  std::vector<Occluder> occluders;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct LandmarkSet {
  std::vector<Point> points;
};

/// Index semantics of the landmark table.
enum LandmarkIndex : int {
  kBrowLeftOuter = 0,
  kBrowLeftInner,
  kBrowRightInner,
  kBrowRightOuter,
  kEyeLeftOuter,
  kEyeLeftInner,
  kEyeRightInner,
  kEyeRightOuter,
  kMouthLeft,
  kMouthRight,
  kNoseTip,
  kChin,
};

using Mask = std::vector<std::uint8_t>;  // kCanvas * kCanvas, row-major

struct RegionMasks {
  Mask skin_mask;
  Mask mouth_mask;
  Mask brow_mask;
};

struct LayeredTargets {
  UvTexture t_skin;
  UvTexture t_skin_mouth;
  UvTexture t_full;
};

// ---------------------------------------------------------------------------
// Rendering

UvTexture render_texture(const FaceParams& params);
/// Same layout with the eyes drawn open; the appearance a photo would show.
UvTexture render_texture_open_eyes(const FaceParams& params);
LayeredTargets layered_targets(const FaceParams& params);

Portrait render_portrait(const FaceParams& params, PoseShift pose_shift, const std::vector<Occluder>& occluders);

/// Landmark positions for the given params (canonical + declared offsets).
LandmarkSet feature_landmarks(const FaceParams& params);
/// Landmarks of the default FaceParams; constant per layout version.
LandmarkSet canonical_landmarks();

const RegionMasks& region_masks();
/// Inside of both eyes (where an open eye would show sclera).
const Mask& eye_interior_mask();
/// Coarse feature regions used for degradation reports.
const Mask& nose_region_mask();
const Mask& eye_region_mask();
int mask_count(const Mask& m);

// ---------------------------------------------------------------------------
// Portrait warp

/// Fixed nearest-neighbour correspondence between portrait and texture
/// pixels, compiled from an 8-triangle piecewise-affine map.
struct WarpTable {
  /// Per portrait pixel: flat texture pixel index, or -1 for background.
  std::vector<int> source;
  int face_pixels = 0;
};

WarpTable warp_table(PoseShift shift);
/// Apply the warp with the given shift; background pixels get kBackground.
Tensor warp_texture(const Tensor& texture, PoseShift shift);
/// Inverse of the zero-shift warp: every texture pixel that some portrait
/// pixel samples gets that pixel's value. The rest stay 0 and are flagged 0
/// in `covered`.
Tensor unwarp_portrait(const Tensor& portrait, Mask* covered = nullptr);
/// Portrait pixels belonging to the face for this shift.
Mask face_region(PoseShift shift);

inline constexpr Rgb kBackground{0.36, 0.40, 0.46};

Tensor apply_style(const Tensor& image, Style style);
/// Fraction of face-region pixels covered by the occluders.
double occluder_coverage(const std::vector<Occluder>& occluders, PoseShift shift);

// ---------------------------------------------------------------------------
// Sampling and datasets

/// Style proportions (flat, painterly, pixel, sketch).
struct DatasetConfig {
  std::array<double, kNumStyles> style_weights{0.4, 0.2, 0.2, 0.2};
  double occlusion_prob = 0.3;
  int max_pose_shift = 4;
  double brow_offset_range = 1.5;
  double spacing_range = 1.5;
  double width_min = 16.0;
  double width_max = 20.0;
};

struct Sample {
  std::uint64_t index = 0;
  FaceParams params;
  PoseShift pose_shift;
  std::vector<Occluder> occluders;
  Portrait portrait;
  UvTexture texture;
  LayeredTargets layers;
  LandmarkSet landmarks;
};

/// Per-sample stream seed derived by counter-based splitting of the master seed.
std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index);

/// Exact per-style counts for n samples (largest-remainder rounding).
std::array<int, kNumStyles> style_counts(int n, const std::array<double, kNumStyles>& weights);

/// Style assignment for sample i of n, a seeded permutation of style_counts.
std::vector<Style> style_assignment(int n, std::uint64_t seed, const std::array<double, kNumStyles>& weights);

FaceParams sample_params(std::uint64_t stream_seed, const DatasetConfig& cfg, Style style);
std::vector<Occluder> sample_occluders(std::uint64_t stream_seed, PoseShift shift, double prob);

Sample make_sample(std::uint64_t master_seed, std::uint64_t index, Style style, const DatasetConfig& cfg);
/// n samples generated in memory, identical to what dataset_gen writes.
std::vector<Sample> generate_samples(int n, std::uint64_t seed, const DatasetConfig& cfg = {}, int threads = 1);

struct ManifestEntry {
  std::string path;
  std::string sha256;
};

/// Writes n sample directories plus manifest.tsv and returns the manifest.
std::vector<ManifestEntry> dataset_gen(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                       const DatasetConfig& cfg = {}, int threads = 1);

/// Loads every sample directory listed in out_dir/manifest.tsv.
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

std::string params_to_json(const Sample& s);
Sample sample_from_json(const std::string& text);

}  // namespace uvflow::toy
