#include "qpm/backbone.hpp"

#include <algorithm>
#include <cstring>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

std::string to_string(BackboneVariant v) { return v == BackboneVariant::paper ? "paper" : "toy"; }

BackboneVariant backbone_variant_from_string(const std::string& s) {
  if (s == "paper") return BackboneVariant::paper;
  if (s == "toy") return BackboneVariant::toy;
  throw ConfigError("unknown backbone variant '" + s + "' (expected paper|toy)");
}

void BackboneConfig::validate() const {
  if (input_height <= 0 || input_width <= 0) throw ConfigError("input size must be positive");
  if (parts < 1) throw ConfigError("number of parts K must be >= 1");
  if (output_channels < 1) throw ConfigError("output_channels must be >= 1");
  if (variant == BackboneVariant::paper) {
    if (spatial_stride != 16) {
      throw ConfigError("paper backbone has a fixed stride of 16 (last down-sampling removed)");
    }
    if (stage_blocks.size() != 4 ||
        std::any_of(stage_blocks.begin(), stage_blocks.end(), [](int b) { return b < 1; })) {
      throw ConfigError("paper backbone needs four stages of >= 1 block");
    }
    if (base_width < 1 || output_channels != 32 * base_width) {
      throw ConfigError("paper backbone outputs 32*base_width channels; got output_channels=" +
                        std::to_string(output_channels) + ", base_width=" +
                        std::to_string(base_width));
    }
  } else if (spatial_stride != 1 && spatial_stride != 2 && spatial_stride != 4 &&
             spatial_stride != 8 && spatial_stride != 16) {
    throw ConfigError("toy backbone stride must be one of 1,2,4,8,16");
  }
  if (input_height % spatial_stride != 0 || input_width % spatial_stride != 0) {
    throw ConfigError("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                      " is not a multiple of stride " + std::to_string(spatial_stride));
  }
  if (feature_height() % parts != 0) {
    throw ConfigError("feature height " + std::to_string(feature_height()) +
                      " is not divisible by K=" + std::to_string(parts));
  }
}

Backbone::Backbone(ParameterStore& store, const BackboneConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  auto make = [&](const std::string& name, int in, int out, int kernel, int stride) {
    return ConvBn{Conv2d(store, name + ".conv", in, out, kernel, stride, kernel / 2, false, rng),
                  BatchNorm(store, name + ".bn", out)};
  };
  if (cfg_.variant == BackboneVariant::toy) {
    const int c = cfg_.output_channels;
    const int widths[4] = {std::max(4, c / 4), std::max(4, c / 2), c, c};
    int downsamples = 0;
    for (int s = cfg_.spatial_stride; s > 1; s /= 2) ++downsamples;
    int in = 3;
    for (int i = 0; i < 4; ++i) {
      toy_blocks_.push_back(make("backbone.block" + std::to_string(i), in, widths[i], 3,
                                 i < downsamples ? 2 : 1));
      in = widths[i];
    }
    return;
  }

  const int w = cfg_.base_width;
  stem_ = make("backbone.stem", 3, w, 7, 2);
  const int strides[4] = {1, 2, 2, 1};
  int in = w;
  for (int s = 0; s < 4; ++s) {
    const int planes = w << s;
    for (int b = 0; b < cfg_.stage_blocks[s]; ++b) {
      const std::string name =
          "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = b == 0 ? strides[s] : 1;
      Bottleneck blk;
      blk.reduce = make(name + ".reduce", in, planes, 1, 1);
      blk.spatial = make(name + ".spatial", planes, planes, 3, stride);
      blk.expand = make(name + ".expand", planes, planes * 4, 1, 1);
      if (stride != 1 || in != planes * 4) {
        blk.has_downsample = true;
        blk.downsample = make(name + ".downsample", in, planes * 4, 1, stride);
      }
      bottlenecks_.push_back(std::move(blk));
      in = planes * 4;
    }
  }
}

Var Backbone::conv_bn(const ConvBn& layer, const Var& x, Mode mode, bool relu) const {
  Var y = layer.bn(layer.conv(x), mode);
  return relu ? ops::relu(y) : y;
}

Var Backbone::forward(const Var& images, Mode mode) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_height || s[3] != cfg_.input_width) {
    throw ConfigError("backbone expects images [N,3," + std::to_string(cfg_.input_height) + "," +
                      std::to_string(cfg_.input_width) + "], got " + shape_str(s));
  }
  Var x = images;
  if (cfg_.variant == BackboneVariant::toy) {
    for (const ConvBn& blk : toy_blocks_) x = conv_bn(blk, x, mode, true);
    return x;
  }
  x = conv_bn(stem_, x, mode, true);
  x = ops::max_pool2d(x, 3, 2, 1);
  for (const Bottleneck& blk : bottlenecks_) {
    Var y = conv_bn(blk.reduce, x, mode, true);
    y = conv_bn(blk.spatial, y, mode, true);
    y = conv_bn(blk.expand, y, mode, false);
    Var shortcut = blk.has_downsample ? conv_bn(blk.downsample, x, mode, false) : x;
    x = ops::relu(ops::add(y, shortcut));
  }
  return x;
}

Tensor extract_feature_map(const Backbone& backbone, const Tensor& image) {
  const auto& cfg = backbone.config();
  if (image.shape() != Shape{3, cfg.input_height, cfg.input_width}) {
    throw ConfigError("image shape " + shape_str(image.shape()) + " does not match config [3," +
                      std::to_string(cfg.input_height) + "," + std::to_string(cfg.input_width) +
                      "]");
  }
  NoGradGuard guard;
  Var out = backbone.forward(Var(image.reshaped({1, 3, cfg.input_height, cfg.input_width})),
                             Mode::eval);
  Tensor fm = out.value();
  fm.reshape({fm.dim(1), fm.dim(2), fm.dim(3)});
  return fm;
}

std::vector<Tensor> partition_parts(const Tensor& feature_map, int parts) {
  if (feature_map.rank() != 3) throw ConfigError("partition_parts expects a [C,H,W] map");
  const int c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  if (parts < 1 || h % parts != 0) {
    throw ConfigError("feature height " + std::to_string(h) + " is not divisible by K=" +
                      std::to_string(parts));
  }
  const int rows = h / parts;
  std::vector<Tensor> stripes;
  stripes.reserve(parts);
  for (int k = 0; k < parts; ++k) {
    Tensor stripe({c, rows, w});
    for (int ch = 0; ch < c; ++ch) {
      const double* src = feature_map.data() + (static_cast<std::size_t>(ch) * h + k * rows) * w;
      std::memcpy(stripe.data() + static_cast<std::size_t>(ch) * rows * w, src,
                  sizeof(double) * rows * w);
    }
    stripes.push_back(std::move(stripe));
  }
  return stripes;
}

}  // namespace qpm
