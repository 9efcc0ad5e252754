#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "xflow/classifier.hpp"

namespace xflow {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const ClassifierConfig& config);
/// Overlays the keys present in `j` onto `base`; unknown keys and bad
/// values throw ValidationError.
ClassifierConfig config_from_json(const nlohmann::json& j, ClassifierConfig base = {});

struct Checkpoint {
  ModelParams params;
  ClassifierConfig config;
};

/// Writes `dir/manifest.json` and `dir/params.bin` (little-endian F32),
/// creating the directory if needed.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params, const ClassifierConfig& config);

/// Validates the manifest (version, config, tensor layout) before reading
/// the blob; throws ValidationError on any mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace xflow
