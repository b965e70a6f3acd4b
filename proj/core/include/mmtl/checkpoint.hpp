#pragma once

#include <stdexcept>
#include <string>

#include "mmtl/model.hpp"

namespace mmtl {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Single-file model snapshot: "MMTL" magic, format version, length-prefixed
/// config JSON, then every named parameter in canonical order as 32-bit
/// little-endian floats, closed by a CRC32 of everything before it.
/// Weights are stored narrowed, so a round trip agrees to ~1e-6, not bitwise.
std::string serialize_checkpoint(const MultiModalLM& model);
MultiModalLM deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const MultiModalLM& model, const std::string& path);
MultiModalLM load_checkpoint(const std::string& path);

/// Config <-> JSON used inside checkpoints and run configs.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace mmtl
