#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qpm/model.hpp"

namespace qpm {

/// Container layout: "QPMCKPT\0", u32 version, u64 JSON length, JSON text
/// {"model": ModelConfig, "meta": ...}, u64 tensor count, then per tensor
/// u32 name length, name, u32 rank, i32 dims[rank], f64 values.
struct Checkpoint {
  ModelConfig model;
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

/// Writes every parameter and buffer of `model`. `meta` is stored verbatim
/// (typically the resolved experiment config).
void save_checkpoint(const std::filesystem::path& path, const QpmModel& model,
                     const nlohmann::json& meta = nlohmann::json::object());

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model described by the checkpoint and loads all weights.
std::unique_ptr<QpmModel> load_model(const Checkpoint& ckpt);
std::unique_ptr<QpmModel> load_model(const std::filesystem::path& path);

/// Copies the "backbone.*" tensors of a checkpoint into `model`, e.g. to start
/// from externally pretrained weights. Shapes must match. Returns the count.
std::size_t load_pretrained_backbone(QpmModel& model, const std::filesystem::path& path);

}  // namespace qpm
