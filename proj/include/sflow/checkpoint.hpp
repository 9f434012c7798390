#pragma once

#include <json.hpp>

#include <string>

#include "sflow/model.hpp"

namespace sflow {

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

struct CheckpointMeta {
    int stage = 0;
    int64_t step = 0;
    uint64_t seed = 0;
};

/// File layout: u64 little-endian header length, JSON header (config, stage,
/// step, seed, LoRA policy, parameter manifest), raw float32 blob in manifest
/// order.
void save_checkpoint(const std::string& path, const Model& model,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

/// FNV-1a over the frozen base parameter bytes in manifest order.
uint64_t base_parameter_hash(const Model& model);

}  // namespace sflow
