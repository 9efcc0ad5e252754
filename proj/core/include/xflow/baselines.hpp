#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "xflow/classifier.hpp"
#include "xflow/explainer.hpp"

namespace xflow {

/// Value of a coalition: keep[i] = 1 keeps feature i.
using ValueFunction = std::function<double(const std::vector<std::uint8_t>& keep)>;

struct LimeOptions {
  std::size_t n_samples = 1000;
  /// Defaults to 0.75 * sqrt(dim).
  std::optional<double> kernel_width;
  double ridge = 1.0;
  std::uint64_t seed = 0;
};

struct LimeFit {
  std::vector<double> coef;
  double intercept = 0.0;
  /// n_samples < dim.
  bool underdetermined = false;
};

/// Weighted ridge surrogate (unpenalized intercept) over Bernoulli(0.5)
/// keep-vectors, weights exp(-hamming^2 / width^2) to the all-kept vector.
LimeFit lime_fit(std::size_t dim, const ValueFunction& f, const LimeOptions& opts);

/// Permutation-sampling Shapley estimate starting from the all-dropped
/// coalition.
std::vector<double> shap_permutation(std::size_t dim, const ValueFunction& f, std::size_t n_permutations,
                                     std::uint64_t seed);

/// Predicted-class probability of `seq` after dropping features. Positional
/// features are positions below effective_len; Value features are the 257
/// token values (dropping v removes every position holding v).
ValueFunction sequence_value_function(const UnitSequence& seq, const ModelParams& params,
                                      const ClassifierConfig& config, const MaskSpec& spec,
                                      std::size_t target_class);

ExplanationReport random_attrib(const UnitSequence& seq, const ClassifierConfig& config, const MaskSpec& spec,
                                std::uint64_t seed);

/// Gradient magnitudes of the predicted-class log-probability.
ExplanationReport saliency_attrib(const UnitSequence& seq, const ModelParams& params,
                                  const ClassifierConfig& config, const MaskSpec& spec);

/// Head-averaged attention summed over layers. Unit level reports the
/// attention each position receives (column sums).
ExplanationReport attention_attrib(const UnitSequence& seq, const ModelParams& params,
                                   const ClassifierConfig& config, const MaskSpec& spec);

ExplanationReport lime_attrib(const UnitSequence& seq, const ModelParams& params,
                              const ClassifierConfig& config, const MaskSpec& spec, const LimeOptions& opts);

ExplanationReport shap_attrib(const UnitSequence& seq, const ModelParams& params,
                              const ClassifierConfig& config, const MaskSpec& spec,
                              std::size_t n_permutations, std::uint64_t seed);

struct BaselineOptions {
  std::uint64_t seed = 0;
  double topk_fraction = 0.05;
  std::size_t lime_samples = 1000;
  std::size_t shap_permutations = 200;
};

/// Dispatches to one baseline (not MaskOptim); topk uses select_topk.
ExplanationReport attribute(Method method, const UnitSequence& seq, const ModelParams& params,
                            const ClassifierConfig& config, const MaskSpec& spec, const BaselineOptions& opts);

}  // namespace xflow
