#pragma once

#include <string>

#include "dtn/model.hpp"

// Self-describing JSON checkpoints: parameter path -> shape -> flat data,
// plus the producing ModelConfig. Round-trips bit-exactly.
namespace dtn::ckpt {

struct Checkpoint {
    model::ModelConfig config;
    model::ModelParams params;
};

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const model::ModelParams& params);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a of the file bytes, as fixed-width hex
std::string checkpoint_hash(const std::string& path);

}  // namespace dtn::ckpt
