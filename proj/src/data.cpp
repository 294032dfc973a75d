#include "qpm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <regex>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "qpm/error.hpp"

namespace qpm {

namespace fs = std::filesystem;

std::string to_string(OccluderKind k) {
  switch (k) {
    case OccluderKind::none: return "none";
    case OccluderKind::object: return "object";
    case OccluderKind::pedestrian: return "pedestrian";
  }
  return "none";
}

OccluderKind occluder_kind_from_string(const std::string& s) {
  if (s == "none") return OccluderKind::none;
  if (s == "object") return OccluderKind::object;
  if (s == "pedestrian") return OccluderKind::pedestrian;
  throw ConfigError("unknown occluder kind '" + s + "' (expected object|pedestrian)");
}

std::string to_string(OcclusionSide s) {
  switch (s) {
    case OcclusionSide::top: return "top";
    case OcclusionSide::bottom: return "bottom";
    case OcclusionSide::left: return "left";
    case OcclusionSide::right: return "right";
  }
  return "bottom";
}

OcclusionSide occlusion_side_from_string(const std::string& s) {
  if (s == "top") return OcclusionSide::top;
  if (s == "bottom") return OcclusionSide::bottom;
  if (s == "left") return OcclusionSide::left;
  if (s == "right") return OcclusionSide::right;
  throw ConfigError("unknown occlusion side '" + s + "' (expected top|bottom|left|right)");
}

cv::Mat sample_pixels(const ReidSample& s) {
  if (!s.image.empty()) return s.image;
  cv::Mat img = cv::imread(s.path, cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot read image " + s.path);
  return img;
}

Tensor to_tensor(const cv::Mat& bgr, const ImageSpec& spec) {
  if (bgr.empty() || bgr.type() != CV_8UC3) throw DataError("to_tensor expects an 8-bit BGR image");
  cv::Mat img = bgr;
  if (img.rows != spec.height || img.cols != spec.width) {
    cv::resize(bgr, img, cv::Size(spec.width, spec.height), 0, 0, cv::INTER_LINEAR);
  }
  const std::size_t plane = static_cast<std::size_t>(spec.height) * spec.width;
  Tensor t({3, spec.height, spec.width});
  for (int y = 0; y < spec.height; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < spec.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * spec.width + x;
      for (int c = 0; c < 3; ++c) {
        const double v = row[x][2 - c] / 255.0;  // BGR -> RGB
        t[c * plane + p] = (v - spec.mean[c]) / spec.stddev[c];
      }
    }
  }
  return t;
}

cv::Mat to_image(const Tensor& chw, const ImageSpec& spec) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw DataError("to_image expects a [3,H,W] tensor");
  const int h = chw.dim(1), w = chw.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  cv::Mat img(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        const double v = (chw[c * plane + p] * spec.stddev[c] + spec.mean[c]) * 255.0;
        row[x][2 - c] = cv::saturate_cast<uchar>(v);
      }
    }
  }
  return img;
}

std::optional<ParsedName> parse_reid_filename(std::string_view filename) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(filename.begin(), filename.end(), m, pattern)) return std::nullopt;
  try {
    return ParsedName{std::stoi(m[1].str()), std::stoi(m[2].str())};
  } catch (const std::out_of_range&) {
    return std::nullopt;
  }
}

namespace {

const char* const kSplitDirs[3] = {"bounding_box_train", "query", "bounding_box_test"};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp";
}

std::vector<ReidSample> load_split(const fs::path& root, const std::string& split,
                                   const LoadOptions& opts, LoadReport& report) {
  std::vector<ReidSample> out;
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  const fs::path mask_dir = root / (split + "_masks");
  for (const auto& file : files) {
    const std::string name = file.filename().string();
    const auto parsed = parse_reid_filename(name);
    if (!parsed) {
      ++report.skipped_unparseable;
      report.warnings.push_back("skipping " + (dir / name).string() + ": no <id>_c<cam> prefix");
      continue;
    }
    if (parsed->id < 0) {
      ++report.skipped_junk;
      continue;
    }
    if (parsed->id == 0 && opts.drop_distractors) {
      ++report.skipped_distractors;
      continue;
    }
    ReidSample s;
    s.path = file.string();
    s.id = parsed->id;
    s.cam = parsed->cam;
    const fs::path mask_path = mask_dir / name;
    if (fs::is_regular_file(mask_path)) {
      s.mask = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
      if (s.mask.empty()) report.warnings.push_back("unreadable mask " + mask_path.string());
    }
    out.push_back(std::move(s));
    ++report.loaded;
  }
  return out;
}

}  // namespace

ReidDataset load_reid_dir(const fs::path& root, const LoadOptions& opts, LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  ReidDataset data;
  std::vector<ReidSample>* targets[3] = {&data.train, &data.query, &data.gallery};
  const bool required[3] = {opts.require_train, opts.require_query, opts.require_gallery};
  for (int i = 0; i < 3; ++i) {
    *targets[i] = load_split(root, kSplitDirs[i], opts, rep);
    if (required[i] && targets[i]->empty()) {
      throw DataError("required split " + (root / kSplitDirs[i]).string() +
                      " is missing or has no usable images");
    }
  }
  return data;
}

void write_reid_dir(const ReidDataset& data, const fs::path& root) {
  const std::vector<ReidSample>* sources[3] = {&data.train, &data.query, &data.gallery};
  for (int i = 0; i < 3; ++i) {
    const fs::path dir = root / kSplitDirs[i];
    const fs::path mask_dir = root / (std::string(kSplitDirs[i]) + "_masks");
    fs::create_directories(dir);
    std::size_t counter = 0;
    for (const auto& s : *sources[i]) {
      char name[64];
      std::snprintf(name, sizeof name, "%04d_c%d_%06zu.png", s.id, s.cam, counter++);
      if (!cv::imwrite((dir / name).string(), sample_pixels(s))) {
        throw DataError("cannot write " + (dir / name).string());
      }
      if (!s.mask.empty()) {
        fs::create_directories(mask_dir);
        cv::Mat m;
        cv::threshold(s.mask, m, 0, 255, cv::THRESH_BINARY);
        if (!cv::imwrite((mask_dir / name).string(), m)) {
          throw DataError("cannot write " + (mask_dir / name).string());
        }
      }
    }
  }
}

std::vector<double> part_occlusion_fractions(const cv::Mat& mask, int parts) {
  if (parts < 1) throw ConfigError("part count must be positive");
  if (mask.empty() || mask.type() != CV_8UC1) throw DataError("mask must be 8-bit single channel");
  if (mask.rows < parts) throw ConfigError("mask has fewer rows than parts");
  std::vector<double> out(parts);
  for (int k = 0; k < parts; ++k) {
    const int r0 = k * mask.rows / parts, r1 = (k + 1) * mask.rows / parts;
    const cv::Mat band = mask.rowRange(r0, r1);
    out[k] = static_cast<double>(cv::countNonZero(band)) / static_cast<double>(band.total());
  }
  return out;
}

void SynthConfig::validate() const {
  if (num_identities < 2) throw ConfigError("synthetic data needs at least 2 training identities");
  if (test_identities < 0) throw ConfigError("test_identities must be >= 0");
  if (images_per_identity < 2) throw ConfigError("images_per_identity must be >= 2");
  if (test_identities > 0 &&
      (queries_per_identity < 1 || queries_per_identity >= images_per_identity)) {
    throw ConfigError("queries_per_identity must be in [1, images_per_identity)");
  }
  if (height < 8 || width < 8) throw ConfigError("synthetic images must be at least 8x8");
  if (cameras < 2) throw ConfigError("at least 2 cameras are needed for cross-camera matches");
  for (double p : {occlusion_probability, gallery_occlusion_probability}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("occlusion probabilities must be in [0,1]");
  }
  if (!(cover_min > 0.0 && cover_min <= cover_max && cover_max <= 1.0)) {
    throw ConfigError("cover fractions must satisfy 0 < cover_min <= cover_max <= 1");
  }
  const bool occludes = occlusion_probability > 0.0 || gallery_occlusion_probability > 0.0;
  if (occludes && (occluder_kinds.empty() || sides.empty())) {
    throw ConfigError("occlusion needs at least one occluder kind and one side");
  }
  for (OccluderKind k : occluder_kinds) {
    if (k == OccluderKind::none) throw ConfigError("'none' is not an occluder kind");
  }
}

namespace {

enum class Pattern { solid, vertical_stripes, horizontal_stripes, checker };

struct Band {
  double top, bottom;      // fraction of the figure height
  double half_width;       // fraction of the image width
  cv::Vec3d primary, secondary;
  Pattern pattern;
  int period;
  bool split_legs;
};

struct Appearance {
  std::vector<Band> bands;
};

cv::Vec3d random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> hue(0.0, 180.0), sat(90.0, 255.0), val(70.0, 255.0);
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue(rng), sat(rng), val(rng))), bgr;
  cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
  const cv::Vec3b c = bgr.at<cv::Vec3b>(0, 0);
  return {double(c[0]), double(c[1]), double(c[2])};
}

Appearance random_appearance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pattern(0, 3), period(2, 4);
  std::uniform_real_distribution<double> skin(0.0, 1.0);
  // Head, upper torso, lower torso, thighs, shins.
  const double edges[6] = {0.0, 0.14, 0.36, 0.54, 0.77, 1.0};
  const double widths[5] = {0.16, 0.30, 0.28, 0.24, 0.22};
  Appearance a;
  for (int b = 0; b < 5; ++b) {
    Band band;
    band.top = edges[b];
    band.bottom = edges[b + 1];
    band.half_width = widths[b];
    band.primary = random_color(rng);
    band.secondary = random_color(rng);
    band.pattern = static_cast<Pattern>(pattern(rng));
    band.period = period(rng);
    band.split_legs = b >= 3;
    if (b == 0) {
      // Hair over a skin-toned face.
      const double t = skin(rng);
      band.secondary = cv::Vec3d(90 + 60 * t, 130 + 70 * t, 170 + 70 * t);
      band.pattern = Pattern::horizontal_stripes;
      band.period = 5;
    }
    a.bands.push_back(band);
  }
  return a;
}

cv::Vec3d band_color(const Band& b, int x, int y) {
  switch (b.pattern) {
    case Pattern::solid: return b.primary;
    case Pattern::vertical_stripes: return (x / b.period) % 2 ? b.secondary : b.primary;
    case Pattern::horizontal_stripes: return (y / b.period) % 2 ? b.secondary : b.primary;
    case Pattern::checker: return ((x / b.period) + (y / b.period)) % 2 ? b.secondary : b.primary;
  }
  return b.primary;
}

/// Figure on a plain muted background, as floating point BGR.
cv::Mat3d render_figure(const Appearance& a, int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> bg(60.0, 190.0), jitter(-0.06, 0.06), scale(0.9, 1.1);
  cv::Mat3d img(h, w, cv::Vec3d(bg(rng), bg(rng), bg(rng)));
  const double cx = w * (0.5 + jitter(rng));
  const double dy = h * jitter(rng) * 0.5;
  const double sx = scale(rng);
  for (const Band& b : a.bands) {
    const int y0 = std::max(0, static_cast<int>(std::lround(b.top * h + dy)));
    const int y1 = std::min(h, static_cast<int>(std::lround(b.bottom * h + dy)));
    const double half = b.half_width * w * sx;
    const double gap = b.split_legs ? 0.04 * w : 0.0;
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < w; ++x) {
        const double off = std::abs(x + 0.5 - cx);
        if (off > half || off < gap) continue;
        img(y, x) = band_color(b, x, y);
      }
    }
  }
  return img;
}

cv::Rect occluder_rect(OcclusionSide side, double cover, int h, int w) {
  const int rows = std::clamp(static_cast<int>(std::lround(cover * h)), 1, h);
  const int cols = std::clamp(static_cast<int>(std::lround(cover * w)), 1, w);
  switch (side) {
    case OcclusionSide::top: return {0, 0, w, rows};
    case OcclusionSide::bottom: return {0, h - rows, w, rows};
    case OcclusionSide::left: return {0, 0, cols, h};
    case OcclusionSide::right: return {w - cols, 0, cols, h};
  }
  return {0, h - rows, w, rows};
}

struct Renderer {
  const SynthConfig& cfg;
  std::mt19937_64& rng;
  const std::vector<Appearance>& looks;
  std::vector<cv::Vec3d> camera_gain;

  ReidSample render(int look, int id, int cam, bool occlude) {
    const int h = cfg.height, w = cfg.width;
    cv::Mat3d img = render_figure(looks[look], h, w, rng);
    ReidSample s;
    s.id = id;
    s.cam = cam;
    s.mask = cv::Mat::zeros(h, w, CV_8UC1);
    if (occlude) {
      std::uniform_int_distribution<std::size_t> kind(0, cfg.occluder_kinds.size() - 1),
          side(0, cfg.sides.size() - 1);
      std::uniform_real_distribution<double> cover(cfg.cover_min, cfg.cover_max);
      s.occluder = cfg.occluder_kinds[kind(rng)];
      if (looks.size() < 2) s.occluder = OccluderKind::object;
      const cv::Rect r = occluder_rect(cfg.sides[side(rng)], cover(rng), h, w);
      if (s.occluder == OccluderKind::object) {
        img(r).setTo(cv::Scalar(random_color(rng)));
      } else {
        std::uniform_int_distribution<int> other(0, static_cast<int>(looks.size()) - 2);
        int o = other(rng);
        if (o >= look) ++o;
        render_figure(looks[o], h, w, rng)(r).copyTo(img(r));
      }
      s.mask(r).setTo(255);
    }
    std::normal_distribution<double> noise(0.0, 5.0);
    const cv::Vec3d gain = camera_gain[cam - 1];
    cv::Mat out(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          out.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<uchar>(img(y, x)[c] * gain[c] + noise(rng));
        }
      }
    }
    s.image = out;
    return s;
  }
};

}  // namespace

ReidDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> gain(0.75, 1.25);
  std::vector<cv::Vec3d> cams;
  for (int c = 0; c < cfg.cameras; ++c) cams.emplace_back(gain(rng), gain(rng), gain(rng));

  const int total = cfg.num_identities + cfg.test_identities;
  std::vector<Appearance> looks;
  for (int i = 0; i < total; ++i) looks.push_back(random_appearance(rng));
  // Pedestrian occluders come from the same split so held-out identities
  // never leak into training images.
  const std::vector<Appearance> train_looks(looks.begin(), looks.begin() + cfg.num_identities);
  const std::vector<Appearance> test_looks(looks.begin() + cfg.num_identities, looks.end());

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> any_cam(1, cfg.cameras);
  ReidDataset data;
  Renderer train{cfg, rng, train_looks, cams};
  for (int i = 0; i < cfg.num_identities; ++i) {
    for (int j = 0; j < cfg.images_per_identity; ++j) {
      const bool occ = u(rng) < cfg.occlusion_probability;
      data.train.push_back(train.render(i, i + 1, any_cam(rng), occ));
    }
  }
  if (cfg.test_identities > 0) {
    Renderer test{cfg, rng, test_looks, cams};
    for (int i = 0; i < cfg.test_identities; ++i) {
      const int id = cfg.num_identities + i + 1;
      for (int j = 0; j < cfg.images_per_identity; ++j) {
        const int cam = j % cfg.cameras + 1;
        if (j < cfg.queries_per_identity) {
          data.query.push_back(test.render(i, id, cam, u(rng) < cfg.occlusion_probability));
        } else {
          data.gallery.push_back(
              test.render(i, id, cam, u(rng) < cfg.gallery_occlusion_probability));
        }
      }
    }
  }
  return data;
}

}  // namespace qpm
