#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xflow/classifier.hpp"
#include "xflow/evaluation.hpp"
#include "xflow/explainer.hpp"

namespace xflow {

struct ReportJsonOptions {
  /// Interaction reports list only their top entries unless dense is set.
  bool dense = false;
  /// Share of candidate pairs kept in sparse interaction payloads.
  double sparse_fraction = 0.10;
  /// Wall-clock seconds are written as null unless requested, so that
  /// reruns produce identical bytes.
  bool include_seconds = false;
};

nlohmann::json mask_spec_to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const nlohmann::json& j);

nlohmann::json report_to_json(const ExplanationReport& report, const ReportJsonOptions& opts = {});
/// Throws ValidationError on missing or malformed fields.
ExplanationReport report_from_json(const nlohmann::json& j);

std::string reports_to_jsonl(std::span<const ExplanationReport> reports, const ReportJsonOptions& opts = {});
/// Errors carry the offending line number.
std::vector<ExplanationReport> load_reports(const std::filesystem::path& path);

nlohmann::json metric_to_json(const MetricResult& m);
nlohmann::json metrics_to_json(std::span<const MetricResult> rows);
/// Aligned columns: method, budget, n, Fid, Acc, C-Fid, C-Acc.
std::string metrics_table(std::span<const MetricResult> rows);

nlohmann::json swap_to_json(const SwapResult& result, double fraction);
nlohmann::json train_log_to_json(const TrainResult& result);
nlohmann::json recovery_to_json(const Recovery& r);

nlohmann::json splits_to_json(const Splits& splits);
Splits splits_from_json(const nlohmann::json& j);

}  // namespace xflow
