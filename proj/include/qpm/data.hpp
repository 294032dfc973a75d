#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "qpm/tensor.hpp"

namespace qpm {

enum class OccluderKind { none, object, pedestrian };

std::string to_string(OccluderKind k);
OccluderKind occluder_kind_from_string(const std::string& s);

/// One labelled image. `image` is 8-bit BGR; when it is empty the pixels are
/// read from `path` on demand. `mask` (8-bit, nonzero = occluded) is optional.
struct ReidSample {
  std::string path;
  int id = 0;
  int cam = 0;
  cv::Mat image;
  cv::Mat mask;
  OccluderKind occluder = OccluderKind::none;
};

struct ReidDataset {
  std::vector<ReidSample> train;
  std::vector<ReidSample> query;
  std::vector<ReidSample> gallery;
};

/// Network input geometry and per-channel normalisation (RGB order).
struct ImageSpec {
  int height = 384;
  int width = 128;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};
};

/// Pixels of a sample, loading from disk if needed. Throws DataError.
cv::Mat sample_pixels(const ReidSample& s);

/// Resize (bilinear) and normalise an 8-bit BGR image to [3,H,W] RGB.
Tensor to_tensor(const cv::Mat& bgr, const ImageSpec& spec);

/// Inverse of to_tensor up to resizing; used for visualisations.
cv::Mat to_image(const Tensor& chw, const ImageSpec& spec);

struct ParsedName {
  int id = 0;
  int cam = 0;
};

/// Reads "<id>_c<cam>..." (Market/Duke style, e.g. 0042_c3_000001.jpg or
/// 0002_c1s1_000451_03.jpg). Returns nullopt for anything else.
std::optional<ParsedName> parse_reid_filename(std::string_view filename);

struct LoadOptions {
  /// Drop identity 0 (Market distractors). Identity -1 (junk) is always dropped.
  bool drop_distractors = false;
  bool require_train = true;
  bool require_query = true;
  bool require_gallery = true;
};

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped_unparseable = 0;
  std::size_t skipped_junk = 0;
  std::size_t skipped_distractors = 0;
  std::vector<std::string> warnings;
};

/// Standard layout: <root>/bounding_box_train, query, bounding_box_test.
/// Masks, if any, live in "<split>_masks/<same file name>". Files are listed in
/// name order. A required split that is missing or empty throws DataError.
ReidDataset load_reid_dir(const std::filesystem::path& root, const LoadOptions& opts = {},
                          LoadReport* report = nullptr);

/// Writes PNGs (and masks when present) in the layout load_reid_dir reads.
void write_reid_dir(const ReidDataset& data, const std::filesystem::path& root);

enum class OcclusionSide { top, bottom, left, right };

std::string to_string(OcclusionSide s);
OcclusionSide occlusion_side_from_string(const std::string& s);

struct SynthConfig {
  int num_identities = 50;      ///< training identities
  int test_identities = 25;     ///< held-out identities for query/gallery
  int images_per_identity = 20;
  int queries_per_identity = 2;
  int height = 64;
  int width = 32;
  int cameras = 4;
  double occlusion_probability = 0.5;          ///< train and query images
  double gallery_occlusion_probability = 0.2;
  std::vector<OccluderKind> occluder_kinds{OccluderKind::object};
  std::vector<OcclusionSide> sides{OcclusionSide::bottom, OcclusionSide::top};
  /// Covered fraction of the image height (top/bottom) or width (left/right).
  double cover_min = 0.3;
  double cover_max = 0.55;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Procedural pedestrians: each identity is a stack of coloured, textured
/// bands; cameras apply a colour cast; occluders are solid shapes or another
/// identity's figure. Deterministic under `seed`.
ReidDataset synth_generate(const SynthConfig& cfg);

/// Fraction of occluded pixels in each of K equal horizontal bands of the mask.
std::vector<double> part_occlusion_fractions(const cv::Mat& mask, int parts);

}  // namespace qpm
