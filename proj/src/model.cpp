#include "qpm/model.hpp"

#include <cmath>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

std::string to_string(GlobalMode m) {
  switch (m) {
    case GlobalMode::none: return "none";
    case GlobalMode::gap: return "gap";
    case GlobalMode::si: return "si";
    case GlobalMode::agfe: return "agfe";
  }
  return "agfe";
}

GlobalMode global_mode_from_string(const std::string& s) {
  if (s == "none") return GlobalMode::none;
  if (s == "gap") return GlobalMode::gap;
  if (s == "si") return GlobalMode::si;
  if (s == "agfe") return GlobalMode::agfe;
  throw ConfigError("unknown global mode '" + s + "' (expected none|gap|si|agfe)");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (embed_dim < 1) throw ConfigError("embedding dimension d must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  IsaConfig{backbone.parts, backbone.output_channels, global_channels, reduction, num_classes,
            excite_bias}
      .validate();
}

namespace {
const ModelConfig& checked(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

QpmModel::QpmModel(const ModelConfig& cfg)
    : cfg_(checked(cfg)),
      init_rng_(cfg.init_seed),
      backbone_(store_, cfg.backbone, init_rng_),
      part_(store_,
            PartBranchConfig{cfg.parts(), cfg.backbone.output_channels, cfg.embed_dim,
                             cfg.num_classes},
            init_rng_),
      isa_(store_,
           IsaConfig{cfg.parts(), cfg.backbone.output_channels, cfg.global_channels, cfg.reduction,
                     cfg.num_classes, cfg.excite_bias},
           init_rng_),
      global_classifier_(store_, "global.classifier", cfg.global_channels, cfg.num_classes, 1e-3,
                         true, init_rng_) {}

ModelOutputs QpmModel::forward(const Var& images, Mode mode) const {
  ModelOutputs out;
  out.feature_map = backbone_.forward(images, mode);
  out.part = part_.forward(out.feature_map, mode, cfg_.use_quality);
  if (cfg_.global_mode == GlobalMode::none) return out;
  out.global_q = cfg_.detach_global_quality ? Var(out.part.q.value()) : out.part.q;
  out.isa = isa_.forward(out.feature_map, out.global_q, cfg_.use_isa);
  out.global_parts = ops::stripe_pool(out.isa.attended, cfg_.parts());
  return out;
}

}  // namespace qpm
