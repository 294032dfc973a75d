#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "qpm/data.hpp"
#include "qpm/model.hpp"
#include "qpm/retrieval.hpp"
#include "qpm/training.hpp"

namespace qpm {

/// Either a directory in the standard ReID layout or a synthetic dataset.
struct DataConfig {
  std::string root;  ///< empty selects the synthetic generator
  SynthConfig synth;
  LoadOptions load;

  bool synthetic() const { return root.empty(); }
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  RetrievalConfig retrieval;
  DataConfig data;

  /// Input geometry implied by the backbone config.
  ImageSpec image_spec() const;
  void validate() const;
};

/// CPU-sized preset: 64x32 synthetic pedestrians, toy backbone (C=64,
/// stride 8, so K=4), d = C' = 64, P=8 x A=4, 30 epochs, SGD lr 0.05 with
/// momentum 0.9, quality detached from the global losses.
ExperimentConfig desk_scale_config();

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RetrievalConfig& c);
nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const ExperimentConfig& c);

/// Keys present in `j` override `base`; unknown keys and wrongly typed values
/// throw ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
RetrievalConfig retrieval_config_from_json(const nlohmann::json& j, RetrievalConfig base = {});
ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig base = {});

/// Parses a JSON file; syntax errors become ConfigError.
nlohmann::json read_json_file(const std::filesystem::path& path);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ExperimentConfig& base = {});

/// "NAME=on|off" for a loss term (part_id, part_tp, global_id, sg_id,
/// global_tp) or a model switch (quality, isa).
void apply_toggle(ExperimentConfig& cfg, const std::string& spec);

}  // namespace qpm
