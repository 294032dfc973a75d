#pragma once

#include <random>
#include <string>
#include <vector>

#include "qpm/nn.hpp"

namespace qpm {

enum class BackboneVariant { toy, paper };

std::string to_string(BackboneVariant v);
BackboneVariant backbone_variant_from_string(const std::string& s);

struct BackboneConfig {
  /// `paper` is a bottleneck residual network whose last stage keeps stride 1
  /// (overall stride 16, 32*base_width output channels). `toy` is four
  /// conv-BN-ReLU blocks for CPU-sized runs.
  BackboneVariant variant = BackboneVariant::toy;
  int output_channels = 256;
  int spatial_stride = 8;
  int input_height = 384;
  int input_width = 128;
  /// Number of horizontal stripes K.
  int parts = 6;
  /// Paper variant only.
  int base_width = 64;
  std::vector<int> stage_blocks = {3, 4, 6, 3};

  /// Throws ConfigError unless the feature height splits into `parts` stripes.
  void validate() const;
  int feature_height() const { return input_height / spatial_stride; }
  int feature_width() const { return input_width / spatial_stride; }
};

/// Shared feature extractor producing F [N,C,H/stride,W/stride].
class Backbone {
 public:
  Backbone(ParameterStore& store, const BackboneConfig& cfg, std::mt19937_64& rng);

  /// images [N,3,H_img,W_img]; dimensions must match the config.
  Var forward(const Var& images, Mode mode) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  struct ConvBn {
    Conv2d conv;
    BatchNorm bn;
  };
  struct Bottleneck {
    ConvBn reduce, spatial, expand;
    bool has_downsample = false;
    ConvBn downsample;
  };

  Var conv_bn(const ConvBn& layer, const Var& x, Mode mode, bool relu) const;

  BackboneConfig cfg_;
  std::vector<ConvBn> toy_blocks_;
  ConvBn stem_;
  std::vector<Bottleneck> bottlenecks_;
};

/// Eval-mode feature map of one normalised image [3,H_img,W_img] -> [C,H,W].
Tensor extract_feature_map(const Backbone& backbone, const Tensor& image);

/// K contiguous horizontal stripes [C,H/K,W] of a [C,H,W] map, top to bottom.
std::vector<Tensor> partition_parts(const Tensor& feature_map, int parts);

}  // namespace qpm
