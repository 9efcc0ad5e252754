#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "xflow/baselines.hpp"
#include "xflow/classifier.hpp"
#include "xflow/data_model.hpp"
#include "xflow/explainer.hpp"

namespace xflow::cli {

struct DataSection {
  UnitKind kind = UnitKind::Bytes;
  std::size_t num_classes = 6;
  std::size_t seq_len = 64;
  std::size_t signature_len = 3;
  /// Explicit plantings; derived from the seed when absent.
  std::optional<std::vector<std::vector<BytePlant>>> signatures;
  std::optional<std::vector<RttSpike>> spikes;
  double spike_magnitude_ms = 120.0;
  /// Defaults to 0.05 (bytes) or 2.0 ms (rtt).
  std::optional<double> noise;
  std::size_t instances_per_class = 200;
  std::size_t max_hops = 30;
  SplitRatios split;
};

struct ModelSection {
  /// Keys present in the config; kind and num_classes come from the data.
  nlohmann::json classifier = nlohmann::json::object();
  TrainHyper train;
};

struct ExplainerSection {
  ExplainerConfig config;
  MaskLevel level = MaskLevel::Unit;
  /// Defaults to positional (local) or value (global).
  std::optional<IndexMode> index_mode;
};

struct EvalSection {
  std::vector<double> budgets{0.01, 0.05, 0.10};
  double swap_fraction = 0.10;
  std::size_t lime_samples = 1000;
  std::size_t shap_permutations = 200;
  std::vector<std::size_t> length_bins;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  DataSection data;
  ModelSection model;
  ExplainerSection explainer;
  EvalSection eval;
};

/// Parses and validates a run config; unknown keys throw ValidationError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

SyntheticSpec synthetic_spec(const RunConfig& cfg);

}  // namespace xflow::cli
