#include "xflow/explainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "xflow/errors.hpp"
#include "xflow/log.hpp"
#include "xflow/optim.hpp"

namespace xflow {

using grad::NumArray;
using grad::Shape;
using grad::Tape;
using grad::Var;

const char* to_string(MaskLevel v) { return v == MaskLevel::Unit ? "unit" : "interaction"; }
const char* to_string(IndexMode v) { return v == IndexMode::Positional ? "positional" : "value"; }

const char* to_string(Objective v) {
  switch (v) {
    case Objective::Confidence: return "confidence";
    case Objective::Label: return "label";
    case Objective::Global: return "global";
  }
  return "?";
}

const char* to_string(Method v) {
  switch (v) {
    case Method::Random: return "random";
    case Method::Saliency: return "saliency";
    case Method::SelfAttention: return "attention";
    case Method::LimeLite: return "lime";
    case Method::ShapLite: return "shap";
    case Method::MaskOptim: return "mask";
  }
  return "?";
}

MaskLevel mask_level_from_string(const std::string& s) {
  if (s == "unit") return MaskLevel::Unit;
  if (s == "interaction") return MaskLevel::Interaction;
  throw ValidationError("unknown level '" + s + "' (expected unit|interaction)");
}

IndexMode index_mode_from_string(const std::string& s) {
  if (s == "positional") return IndexMode::Positional;
  if (s == "value") return IndexMode::Value;
  throw ValidationError("unknown index mode '" + s + "' (expected positional|value)");
}

Objective objective_from_string(const std::string& s) {
  if (s == "confidence") return Objective::Confidence;
  if (s == "label") return Objective::Label;
  if (s == "global") return Objective::Global;
  throw ValidationError("unknown objective '" + s + "' (expected confidence|label|global)");
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::Random, Method::Saliency, Method::SelfAttention, Method::LimeLite,
                   Method::ShapLite, Method::MaskOptim}) {
    if (s == to_string(m)) return m;
  }
  throw ValidationError("unknown method '" + s + "' (expected random|saliency|attention|lime|shap|mask)");
}

std::size_t mask_side(const MaskSpec& spec, const ClassifierConfig& config) {
  return spec.index_mode == IndexMode::Positional ? config.max_len : kByteVocabSize;
}

Shape mask_shape(const MaskSpec& spec, const ClassifierConfig& config) {
  const std::size_t side = mask_side(spec, config);
  return spec.level == MaskLevel::Unit ? Shape{side} : Shape{side, side};
}

void validate_spec(const MaskSpec& spec, const ClassifierConfig& config) {
  if (spec.index_mode == IndexMode::Value && config.kind != UnitKind::Bytes) {
    throw ValidationError("value index mode requires a bytes model");
  }
  if (spec.level == MaskLevel::Interaction && config.arch != Arch::Transformer) {
    throw ValidationError("interaction masks require a transformer model");
  }
  if (spec.global_class && *spec.global_class >= config.num_classes) {
    throw ValidationError("global class " + std::to_string(*spec.global_class) + " outside " +
                          std::to_string(config.num_classes) + " classes");
  }
}

template <typename T>
Var masked_logits(Tape<T>& tape, Network<T>& net, const ModelInput& input, Var theta, const MaskSpec& spec) {
  const auto& th = tape.value(theta);
  const std::size_t side = spec.index_mode == IndexMode::Positional ? input.size() : kByteVocabSize;
  const Shape want = spec.level == MaskLevel::Unit ? Shape{side} : Shape{side, side};
  if (th.shape() != want) {
    throw ValidationError("mask shape " + grad::shape_str(th.shape()) + " does not match " +
                          grad::shape_str(want));
  }
  if (spec.index_mode == IndexMode::Value && input.kind != UnitKind::Bytes) {
    throw ValidationError("value index mode requires byte input");
  }
  MaskHooks hooks;
  if (spec.level == MaskLevel::Unit) {
    const Var raw = spec.index_mode == IndexMode::Positional
                        ? theta
                        : tape.gather(tape.reshape(theta, {kByteVocabSize, 1}), input.tokens);
    hooks.unit_scale = tape.sigmoid(raw);
  } else {
    const Var raw =
        spec.index_mode == IndexMode::Positional ? theta : tape.pair_gather(theta, input.tokens);
    hooks.attn_bias = tape.log_sigmoid(raw);
  }
  const Var e = net.embed(input);
  const Var x = net.layer_input(e, input, hooks);
  const Var h = net.encode(x, input, hooks);
  return net.classify(h, input);
}

template Var masked_logits(Tape<float>&, Network<float>&, const ModelInput&, Var, const MaskSpec&);
template Var masked_logits(Tape<double>&, Network<double>&, const ModelInput&, Var, const MaskSpec&);

namespace {

PredictionDistribution to_distribution(const NumArray<float>& logits) {
  std::vector<double> l(logits.values().begin(), logits.values().end());
  return PredictionDistribution::from_logits(l);
}

PredictionDistribution original_prediction(const ModelInput& in, const ModelParams& params,
                                           const ClassifierConfig& config) {
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  return to_distribution(tape.value(net.forward(in)));
}

std::size_t clamp_len(std::size_t effective_len, std::size_t side) {
  return std::max<std::size_t>(1, std::min(effective_len, side));
}

// Candidate entries for the budget norm: positions inside the sequence for
// positional masks, everything for value masks.
NumArray<float> budget_weights(const MaskSpec& spec, const Shape& shape, std::size_t effective_len) {
  NumArray<float> w = NumArray<float>::filled(shape, 1.0f);
  if (spec.index_mode == IndexMode::Value) return w;
  const std::size_t side = shape[0];
  const std::size_t eff = clamp_len(effective_len, side);
  if (spec.level == MaskLevel::Unit) {
    for (std::size_t j = eff; j < side; ++j) w[j] = 0.0f;
  } else {
    for (std::size_t j = 0; j < side; ++j) {
      for (std::size_t k = 0; k < side; ++k) {
        if (j >= eff || k >= eff) w.at(j, k) = 0.0f;
      }
    }
  }
  return w;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

PredictionDistribution masked_predict(const UnitSequence& seq, const ModelParams& params,
                                      const ClassifierConfig& config, const MaskParams& mask,
                                      const MaskSpec& spec) {
  validate_spec(spec, config);
  check_params(params, config);
  const ModelInput in = make_input(seq, config);
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  const Var theta = tape.leaf_ref(mask.theta);
  return to_distribution(tape.value(masked_logits(tape, net, in, theta, spec)));
}

// ---------------------------------------------------------------- objectives

double objective_confidence(const PredictionDistribution& orig, const PredictionDistribution& masked) {
  if (orig.probs.size() != masked.probs.size()) {
    throw ValidationError("objective_confidence: distributions have different class counts");
  }
  double loss = 0.0;
  for (std::size_t c = 0; c < orig.probs.size(); ++c) {
    loss -= orig.probs[c] * std::log(std::max(masked.probs[c], kLogClamp));
  }
  return loss;
}

double objective_label(const PredictionDistribution& masked, std::size_t c) {
  if (c >= masked.probs.size()) throw ValidationError("objective_label: class index out of range");
  return -std::log(std::max(masked.probs[c], kLogClamp));
}

double objective_global(std::span<const PredictionDistribution> masked, std::size_t c) {
  if (masked.empty()) throw ValidationError("objective_global: empty instance set");
  double total = 0.0;
  for (const auto& m : masked) total += objective_label(m, c);
  return total / static_cast<double>(masked.size());
}

double total_loss(double explain_loss, std::span<const float> theta, double alpha1, double alpha2,
                  double budget) {
  double mass = 0.0;
  for (float t : theta) mass += 1.0 / (1.0 + std::exp(-static_cast<double>(t)));
  return alpha1 * std::max(0.0, mass - budget) + alpha2 * explain_loss;
}

template <typename T>
Var explain_loss_graph(Tape<T>& tape, Var logits, std::span<const double> target) {
  const auto& lv = tape.value(logits);
  if (lv.size() != target.size()) {
    throw ValidationError("explain loss: target has " + std::to_string(target.size()) + " classes, logits " +
                          grad::shape_str(lv.shape()));
  }
  NumArray<T> w(lv.shape());
  for (std::size_t c = 0; c < target.size(); ++c) w[c] = static_cast<T>(target[c]);
  const Var lsm = tape.log_softmax(logits, static_cast<T>(std::log(kLogClamp)));
  return tape.nll(lsm, w);
}

template Var explain_loss_graph(Tape<float>&, Var, std::span<const double>);
template Var explain_loss_graph(Tape<double>&, Var, std::span<const double>);

template <typename T>
Var total_loss_graph(Tape<T>& tape, Var theta, Var explain, double alpha1, double alpha2, double budget,
                     const NumArray<T>* weights) {
  Var s = tape.sigmoid(theta);
  if (weights) s = tape.mul(s, tape.leaf_ref(*weights));
  const Var over = tape.relu(tape.add_scalar(tape.sum(s), static_cast<T>(-budget)));
  return tape.add(tape.scale(over, static_cast<T>(alpha1)), tape.scale(explain, static_cast<T>(alpha2)));
}

template Var total_loss_graph(Tape<float>&, Var, Var, double, double, double, const NumArray<float>*);
template Var total_loss_graph(Tape<double>&, Var, Var, double, double, double, const NumArray<double>*);

// ---------------------------------------------------------------- optimizer

void ExplainerConfig::validate() const {
  if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0) || alpha1 + alpha2 <= 0.0) {
    throw ValidationError("explainer: alpha1, alpha2 must be non-negative with a positive sum");
  }
  if (steps == 0) throw ValidationError("explainer: steps must be >= 1");
  if (!(learning_rate >= 0.0)) throw ValidationError("explainer: learning_rate must be >= 0");
  if (!(topk_fraction > 0.0 && topk_fraction <= 1.0)) {
    throw ValidationError("explainer: topk_fraction must be in (0, 1]");
  }
  if (budget && !(*budget > 0.0)) throw ValidationError("explainer: budget must be positive");
  if (!(init_std >= 0.0)) throw ValidationError("explainer: init_std must be >= 0");
}

namespace {

struct Job {
  ModelInput input;
  std::vector<double> target;
};

ExplanationReport run_optimization(const std::vector<Job>& jobs, const ModelParams& params,
                                   const ClassifierConfig& config, const MaskSpec& spec,
                                   const ExplainerConfig& xcfg, std::size_t effective_len) {
  const auto t0 = std::chrono::steady_clock::now();
  const Shape shape = mask_shape(spec, config);
  NumArray<float> theta(shape);
  if (xcfg.init_std > 0.0) {
    std::mt19937_64 rng(xcfg.seed);
    std::normal_distribution<double> normal(0.0, xcfg.init_std);
    for (auto& v : theta.values()) v = static_cast<float>(normal(rng));
  }
  const NumArray<float> weights = budget_weights(spec, shape, effective_len);
  double candidates = 0.0;
  for (float w : weights.values()) candidates += w;
  const double budget = xcfg.budget.value_or(xcfg.topk_fraction * candidates);

  const std::uint64_t before = params.checksum();
  Adam<float> opt(xcfg.learning_rate);
  ExplanationReport report;
  report.trace.reserve(xcfg.steps);
  const float inv_n = 1.0f / static_cast<float>(jobs.size());
  for (std::size_t step = 0; step < xcfg.steps; ++step) {
    Tape<float> tape(false);
    Network<float> net(tape, params, config);
    const Var th = tape.leaf_ref(theta, true);
    std::optional<Var> explain;
    for (const auto& job : jobs) {
      const Var logits = masked_logits(tape, net, job.input, th, spec);
      const Var l = explain_loss_graph(tape, logits, job.target);
      explain = explain ? tape.add(*explain, l) : l;
    }
    if (jobs.size() > 1) explain = tape.scale(*explain, inv_n);
    const Var total = total_loss_graph(tape, th, *explain, xcfg.alpha1, xcfg.alpha2, budget, &weights);
    const double value = tape.value(total)[0];
    if (!std::isfinite(value)) {
      throw NumericError("explainer loss is not finite at step " + std::to_string(step));
    }
    report.trace.push_back(value);
    const auto g = tape.backward(total, std::span<const Var>(&th, 1));
    opt.step(std::span<NumArray<float>>(&theta, 1), std::span<const NumArray<float>>(g));
  }
  if (params.checksum() != before) throw Error("explainer modified the model parameters");

  report.spec = spec;
  report.method = Method::MaskOptim;
  report.shape = shape;
  report.scores.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    report.scores[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(theta[i])));
  }
  report.effective_len = effective_len;
  report.topk = select_topk(report.scores, spec, xcfg.topk_fraction, effective_len, shape[0]);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<double> one_hot(std::size_t c, std::size_t n) {
  std::vector<double> v(n, 0.0);
  v.at(c) = 1.0;
  return v;
}

}  // namespace

ExplanationReport optimize_mask(const UnitSequence& seq, const ModelParams& params,
                                const ClassifierConfig& config, const MaskSpec& spec,
                                const ExplainerConfig& xcfg) {
  if (spec.is_global()) return optimize_mask(std::span<const UnitSequence>(&seq, 1), params, config, spec, xcfg);
  validate_spec(spec, config);
  xcfg.validate();
  check_params(params, config);
  if (xcfg.objective == Objective::Global) {
    throw ValidationError("global objective requires a global-class mask spec");
  }
  Job job{make_input(seq, config), {}};
  const PredictionDistribution orig = original_prediction(job.input, params, config);
  if (xcfg.objective == Objective::Confidence) {
    job.target = orig.probs;
  } else {
    job.target = one_hot(xcfg.label_class.value_or(orig.predicted_class), config.num_classes);
  }
  const std::size_t eff = std::min(seq.effective_len, config.max_len);
  auto report = run_optimization({job}, params, config, spec, xcfg, eff);
  report.id = seq.id;
  report.predicted_class = orig.predicted_class;
  log::debug("explained ", seq.id, " final loss ", report.trace.back());
  return report;
}

ExplanationReport optimize_mask(std::span<const UnitSequence> set, const ModelParams& params,
                                const ClassifierConfig& config, const MaskSpec& spec,
                                const ExplainerConfig& xcfg) {
  if (!spec.is_global()) throw ValidationError("instance-set explanation requires a global-class spec");
  validate_spec(spec, config);
  xcfg.validate();
  check_params(params, config);
  if (set.empty()) throw ValidationError("global explanation: empty instance set");
  const std::size_t c = *spec.global_class;
  std::vector<Job> jobs;
  jobs.reserve(set.size());
  for (const auto& seq : set) {
    Job job{make_input(seq, config), {}};
    if (xcfg.objective == Objective::Confidence) {
      job.target = original_prediction(job.input, params, config).probs;
    } else {
      job.target = one_hot(c, config.num_classes);
    }
    jobs.push_back(std::move(job));
  }
  auto report = run_optimization(jobs, params, config, spec, xcfg, config.max_len);
  report.id = "global-" + std::to_string(c);
  report.predicted_class = c;
  return report;
}

std::size_t topk_count(const MaskSpec& spec, double fraction, std::size_t effective_len) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("top-k fraction must be in (0, 1]");
  const double base = spec.index_mode == IndexMode::Value ? static_cast<double>(kByteVocabSize)
                                                          : static_cast<double>(std::max<std::size_t>(1, effective_len));
  const double n = spec.level == MaskLevel::Unit ? base : base * base;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * n)));
}

std::vector<std::size_t> select_topk(std::span<const double> scores, const MaskSpec& spec, double fraction,
                                     std::size_t effective_len, std::size_t side) {
  const bool pairs = spec.level == MaskLevel::Interaction;
  const std::size_t expected = pairs ? side * side : side;
  if (scores.size() != expected) {
    throw ValidationError("select_topk: " + std::to_string(scores.size()) + " scores for side " +
                          std::to_string(side));
  }
  std::vector<std::size_t> cand;
  if (spec.index_mode == IndexMode::Value) {
    cand.resize(expected);
    std::iota(cand.begin(), cand.end(), std::size_t{0});
  } else {
    const std::size_t eff = clamp_len(effective_len, side);
    if (pairs) {
      for (std::size_t j = 0; j < eff; ++j) {
        for (std::size_t k = 0; k < eff; ++k) cand.push_back(j * side + k);
      }
    } else {
      cand.resize(eff);
      std::iota(cand.begin(), cand.end(), std::size_t{0});
    }
  }
  const std::size_t eff_for_k = spec.index_mode == IndexMode::Value ? side : clamp_len(effective_len, side);
  const std::size_t k = std::min(cand.size(), topk_count(spec, fraction, eff_for_k));
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  cand.resize(k);
  return cand;
}

std::uint64_t job_seed(std::uint64_t global_seed, const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return splitmix64(splitmix64(global_seed) ^ h);
}

}  // namespace xflow
