#pragma once

#include <cstdint>
#include <string>

#include "qpm/backbone.hpp"
#include "qpm/isa.hpp"
#include "qpm/nn.hpp"
#include "qpm/part_branch.hpp"

namespace qpm {

/// How the global branch turns G~ into per-comparison features.
enum class GlobalMode {
  none,  ///< part branch only
  gap,   ///< global average pooling of G~ per image
  si,    ///< quality-weighted pooling of G~ per image (single image)
  agfe,  ///< pair-adaptive aggregation with product quality weights
};

std::string to_string(GlobalMode m);
GlobalMode global_mode_from_string(const std::string& s);

struct ModelConfig {
  BackboneConfig backbone;
  int embed_dim = 1024;        ///< d
  int global_channels = 1024;  ///< C'
  int reduction = 4;
  int num_classes = 1;
  bool use_quality = true;     ///< false forces every q_k to 1
  bool use_isa = true;
  GlobalMode global_mode = GlobalMode::agfe;
  bool excite_bias = true;
  /// Global-branch losses see q as a constant, so only the part triplet
  /// shapes the quality predictor.
  bool detach_global_quality = false;
  std::uint64_t init_seed = 0;

  int parts() const { return backbone.parts; }
  void validate() const;
};

struct ModelOutputs {
  Var feature_map;   ///< F [N,C,H,W]
  PartOutputs part;  ///< z, f, q
  IsaOutputs isa;    ///< G, h, h_hat, h_tilde, M, G~
  Var global_parts;  ///< g~ [N,K,C'] (RAP of G~); undefined for GlobalMode::none
  Var global_q;      ///< q as seen by the global branch
};

/// Backbone, part branch, attention and the shared global classifier.
class QpmModel {
 public:
  explicit QpmModel(const ModelConfig& cfg);
  QpmModel(const QpmModel&) = delete;
  QpmModel& operator=(const QpmModel&) = delete;

  /// images [N,3,H_img,W_img] (normalised).
  ModelOutputs forward(const Var& images, Mode mode) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const Backbone& backbone() const { return backbone_; }
  const PartBranch& part_branch() const { return part_; }
  const IdentityAwareAttention& attention() const { return isa_; }
  /// W^s, applied to pairwise (or per-image) global features.
  const Linear& global_classifier() const { return global_classifier_; }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  std::mt19937_64 init_rng_;
  Backbone backbone_;
  PartBranch part_;
  IdentityAwareAttention isa_;
  Linear global_classifier_;
};

}  // namespace qpm
