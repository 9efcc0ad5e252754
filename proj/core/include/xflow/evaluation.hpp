#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xflow/classifier.hpp"
#include "xflow/explainer.hpp"

namespace xflow {

/// Four perturbation metrics; higher is better for all of them.
struct MetricResult {
  double fid = 0;
  double acc = 0;
  double c_fid = 0;
  double c_acc = 0;
  std::size_t n = 0;
  double budget_fraction = 0;
  Method method = Method::MaskOptim;
  MaskLevel level = MaskLevel::Unit;
  IndexMode index_mode = IndexMode::Positional;
  /// Raw counts behind the fractions.
  std::size_t fid_hits = 0, acc_hits = 0, c_fid_hits = 0, c_acc_hits = 0;
  /// Agreement-counting variants (removal keeps the prediction), kept for auditing.
  double c_fid_agree = 0;
  double c_acc_agree = 0;
};

/// Unit-level substitution: units outside `topk` (positions, or token values
/// in Value mode) are removed via drop_units.
UnitSequence perturb_keep_topk(const UnitSequence& seq, std::span<const std::size_t> topk, const MaskSpec& spec);
/// Units inside `topk` are removed.
UnitSequence perturb_remove_topk(const UnitSequence& seq, std::span<const std::size_t> topk, const MaskSpec& spec);

inline constexpr float kKeptPairTheta = 30.0f;
inline constexpr float kDroppedPairTheta = -20.0f;

/// Interaction masks selecting (keep) or excluding (remove) the topk pairs.
MaskParams interaction_keep_mask(std::span<const std::size_t> topk, const MaskSpec& spec,
                                 const ClassifierConfig& config);
MaskParams interaction_remove_mask(std::span<const std::size_t> topk, const MaskSpec& spec,
                                   const ClassifierConfig& config);

struct PerturbedPredictions {
  PredictionDistribution original;
  PredictionDistribution kept;
  PredictionDistribution removed;
};

/// Predictions on the original, keep-only and removal variants of `seq`.
PerturbedPredictions perturbed_predictions(const UnitSequence& seq, std::span<const std::size_t> topk,
                                           const MaskSpec& spec, const ModelParams& params,
                                           const ClassifierConfig& config);

/// Top-K of a report re-selected at `fraction`.
std::vector<std::size_t> report_topk(const ExplanationReport& report, double fraction);

/// Reports align with instances by index (ids must match when set).
MetricResult compute_metrics(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                             const ModelParams& params, const ClassifierConfig& config, double fraction);

/// Metrics over the instances predicted as the report's class, all using the
/// shared Top-K set. Throws ValidationError when no instance qualifies.
MetricResult evaluate_global(std::span<const UnitSequence> instances, const ExplanationReport& shared,
                             const ModelParams& params, const ClassifierConfig& config, double fraction);

struct SwapModel {
  std::string name;
  const ModelParams* params = nullptr;
  ClassifierConfig config;
};

struct SwapPair {
  std::size_t recipient = 0;
  std::size_t donor = 0;
  int donor_class = 0;
};

struct ModelSwapRate {
  std::string name;
  std::size_t transformed = 0;
  std::size_t n = 0;
  double rate = 0;
};

struct SwapResult {
  std::vector<SwapPair> pairs;
  std::vector<ModelSwapRate> per_model;
};

/// One donor per instance, drawn uniformly from instances of another class.
std::vector<SwapPair> sample_swap_pairs(std::span<const UnitSequence> instances, std::uint64_t seed);

/// Copies donor units (and presence) at `positions` into the recipient.
UnitSequence swap_units(const UnitSequence& recipient, const UnitSequence& donor,
                        std::span<const std::size_t> positions);

/// Donor positions are the donor report's Top-`fraction` units; a swap counts
/// when a model predicts the modified recipient as the donor's label.
SwapResult byte_swap_experiment(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                                std::span<const SwapModel> models, double fraction, std::uint64_t seed);
SwapResult byte_swap_experiment(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                                std::span<const SwapModel> models, double fraction,
                                const std::vector<SwapPair>& pairs);

struct LengthBin {
  std::size_t lo = 0;
  std::size_t hi = 0;
  /// Empty when no instance falls in the bin.
  std::optional<MetricResult> metrics;
};

/// Bins are [edge_i, edge_{i+1}), the last one closed.
std::vector<LengthBin> length_sensitivity(std::span<const UnitSequence> instances,
                                          std::span<const ExplanationReport> reports, const ModelParams& params,
                                          const ClassifierConfig& config, double fraction,
                                          const std::vector<std::size_t>& bin_edges);

struct Recovery {
  double precision = 0;
  double recall = 0;
  std::size_t n = 0;
};

/// Macro-averaged precision/recall of report Top-K sets against planted
/// positions (Positional) or planted values (Value).
Recovery signature_recovery(std::span<const ExplanationReport> reports,
                            const std::map<std::string, GroundTruth>& truth);

}  // namespace xflow
