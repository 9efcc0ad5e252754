#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xflow/classifier.hpp"
#include "xflow/grad.hpp"

namespace xflow {

enum class MaskLevel { Unit, Interaction };
enum class IndexMode { Positional, Value };
enum class Objective { Confidence, Label, Global };
enum class Method { Random, Saliency, SelfAttention, LimeLite, ShapLite, MaskOptim };

const char* to_string(MaskLevel v);
const char* to_string(IndexMode v);
const char* to_string(Objective v);
const char* to_string(Method v);
MaskLevel mask_level_from_string(const std::string& s);
IndexMode index_mode_from_string(const std::string& s);
Objective objective_from_string(const std::string& s);
Method method_from_string(const std::string& s);

struct MaskSpec {
  MaskLevel level = MaskLevel::Unit;
  IndexMode index_mode = IndexMode::Positional;
  /// Set for global-class explanations.
  std::optional<std::size_t> global_class;

  bool is_global() const { return global_class.has_value(); }
  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

/// Side length of the mask index space: max_len (Positional) or 257 (Value).
std::size_t mask_side(const MaskSpec& spec, const ClassifierConfig& config);
/// [side] for Unit, [side, side] for Interaction.
grad::Shape mask_shape(const MaskSpec& spec, const ClassifierConfig& config);
/// Throws ValidationError when the spec cannot be applied to the model.
void validate_spec(const MaskSpec& spec, const ClassifierConfig& config);

/// Unconstrained mask scores; importance is sigmoid(theta).
struct MaskParams {
  grad::NumArray<float> theta;
};

/// Records the masked classifier on `tape`. theta must have mask_shape(spec).
template <typename T>
grad::Var masked_logits(grad::Tape<T>& tape, Network<T>& net, const ModelInput& input, grad::Var theta,
                        const MaskSpec& spec);

PredictionDistribution masked_predict(const UnitSequence& seq, const ModelParams& params,
                                      const ClassifierConfig& config, const MaskParams& mask,
                                      const MaskSpec& spec);

// -------------------------------------------------------------- objectives

inline constexpr double kLogClamp = 1e-12;

/// Cross-entropy of the masked prediction against the original distribution.
double objective_confidence(const PredictionDistribution& orig, const PredictionDistribution& masked);
/// -log masked.probs[c].
double objective_label(const PredictionDistribution& masked, std::size_t c);
/// Mean of objective_label over the set; throws ValidationError when empty.
double objective_global(std::span<const PredictionDistribution> masked, std::size_t c);
/// alpha1 * relu(sum sigmoid(theta) - budget) + alpha2 * explain_loss.
double total_loss(double explain_loss, std::span<const float> theta, double alpha1, double alpha2,
                  double budget);

/// Per-instance explanation term on the tape. For Confidence, `target`
/// is the original distribution; otherwise the one-hot class.
template <typename T>
grad::Var explain_loss_graph(grad::Tape<T>& tape, grad::Var logits, std::span<const double> target);

/// Budget term plus weighted explanation term. `weights` (optional, same
/// size as theta) restricts the L1 mass to candidate entries.
template <typename T>
grad::Var total_loss_graph(grad::Tape<T>& tape, grad::Var theta, grad::Var explain, double alpha1,
                           double alpha2, double budget, const grad::NumArray<T>* weights = nullptr);

// -------------------------------------------------------------- optimizer

struct ExplainerConfig {
  Objective objective = Objective::Confidence;
  double alpha1 = 0.1;
  double alpha2 = 1.0;
  /// Defaults to topk_fraction * (number of candidate mask entries).
  std::optional<double> budget;
  std::size_t steps = 300;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  double topk_fraction = 0.05;
  /// Standard deviation of a seeded Gaussian theta init; 0 keeps theta = 0.
  double init_std = 0.0;
  /// Class for the Label objective; defaults to the original prediction.
  std::optional<std::size_t> label_class;

  void validate() const;
};

struct ExplanationReport {
  std::string id;
  MaskSpec spec;
  Method method = Method::MaskOptim;
  grad::Shape shape;
  /// Importance scores, row-major in `shape`.
  std::vector<double> scores;
  /// Flat indices (pairs as j * side + k), descending score.
  std::vector<std::size_t> topk;
  std::vector<double> trace;
  std::optional<double> seconds;
  std::size_t effective_len = 0;
  std::size_t predicted_class = 0;
  std::vector<std::string> warnings;
};

/// Local-instance explanation.
ExplanationReport optimize_mask(const UnitSequence& seq, const ModelParams& params,
                                const ClassifierConfig& config, const MaskSpec& spec,
                                const ExplainerConfig& xcfg);

/// Global-class explanation: one shared mask for every instance in `set`
/// (expected to be those predicted as spec.global_class).
ExplanationReport optimize_mask(std::span<const UnitSequence> set, const ModelParams& params,
                                const ClassifierConfig& config, const MaskSpec& spec,
                                const ExplainerConfig& xcfg);

/// Number of entries select_topk returns.
std::size_t topk_count(const MaskSpec& spec, double fraction, std::size_t effective_len);

/// Top-K flat indices, descending score, ties to the lower index. Positional
/// candidates are restricted to positions below `effective_len` (pairs: both
/// ends). `side` is the mask side length.
std::vector<std::size_t> select_topk(std::span<const double> scores, const MaskSpec& spec,
                                     double fraction, std::size_t effective_len, std::size_t side);

/// Seed for one job, independent of scheduling order.
std::uint64_t job_seed(std::uint64_t global_seed, const std::string& id);

}  // namespace xflow
