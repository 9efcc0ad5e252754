#include "xflow/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "xflow/errors.hpp"
#include "xflow/log.hpp"

namespace xflow {

using grad::NumArray;
using grad::Tape;
using grad::Var;

LimeFit lime_fit(std::size_t dim, const ValueFunction& f, const LimeOptions& opts) {
  if (dim == 0) throw ValidationError("lime: no features");
  if (opts.n_samples == 0) throw ValidationError("lime: n_samples must be >= 1");
  const double width = opts.kernel_width.value_or(0.75 * std::sqrt(static_cast<double>(dim)));
  if (!(width > 0.0)) throw ValidationError("lime: kernel width must be positive");

  std::mt19937_64 rng(opts.seed);
  std::bernoulli_distribution coin(0.5);
  const auto n = static_cast<Eigen::Index>(opts.n_samples);
  const auto p = static_cast<Eigen::Index>(dim) + 1;
  Eigen::MatrixXd z(n, p);
  Eigen::VectorXd y(n), w(n);
  std::vector<std::uint8_t> keep(dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t dropped = 0;
    z(i, 0) = 1.0;
    for (std::size_t j = 0; j < dim; ++j) {
      keep[j] = coin(rng) ? 1 : 0;
      dropped += keep[j] == 0;
      z(i, static_cast<Eigen::Index>(j) + 1) = keep[j];
    }
    y(i) = f(keep);
    const double d = static_cast<double>(dropped);
    w(i) = std::exp(-(d * d) / (width * width));
  }
  Eigen::MatrixXd a = z.transpose() * w.asDiagonal() * z;
  a.diagonal().tail(p - 1).array() += opts.ridge;
  const Eigen::VectorXd rhs = z.transpose() * (w.array() * y.array()).matrix();
  const Eigen::VectorXd beta = a.ldlt().solve(rhs);

  LimeFit fit;
  fit.intercept = beta(0);
  fit.coef.assign(beta.data() + 1, beta.data() + p);
  fit.underdetermined = opts.n_samples < dim;
  return fit;
}

std::vector<double> shap_permutation(std::size_t dim, const ValueFunction& f, std::size_t n_permutations,
                                     std::uint64_t seed) {
  if (n_permutations == 0) throw ValidationError("shap: n_permutations must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<double> phi(dim, 0.0);
  std::vector<std::size_t> order(dim);
  std::vector<std::uint8_t> keep(dim);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::fill(keep.begin(), keep.end(), 0);
    double prev = f(keep);
    for (auto u : order) {
      keep[u] = 1;
      const double cur = f(keep);
      phi[u] += cur - prev;
      prev = cur;
    }
  }
  for (auto& v : phi) v /= static_cast<double>(n_permutations);
  return phi;
}

namespace {

std::size_t feature_count(const UnitSequence& seq, const ClassifierConfig& config, const MaskSpec& spec) {
  if (spec.index_mode == IndexMode::Value) return kByteVocabSize;
  return std::max<std::size_t>(1, std::min(seq.effective_len, config.max_len));
}

std::vector<std::uint8_t> position_keep(const UnitSequence& seq, const MaskSpec& spec,
                                        const std::vector<std::uint8_t>& keep) {
  if (spec.index_mode == IndexMode::Positional) return keep;
  std::vector<std::uint8_t> out(seq.size(), 1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.present[i]) out[i] = keep[static_cast<std::size_t>(seq.token(i))];
  }
  return out;
}

ExplanationReport finish(ExplanationReport r, const UnitSequence& seq, const ClassifierConfig& config,
                         const MaskSpec& spec, Method method, double fraction) {
  r.id = seq.id;
  r.spec = spec;
  r.method = method;
  r.shape = mask_shape(spec, config);
  r.effective_len = std::min(seq.effective_len, config.max_len);
  for (double v : r.scores) {
    if (!std::isfinite(v)) throw NumericError(std::string(to_string(method)) + " produced a non-finite score");
  }
  r.topk = select_topk(r.scores, spec, fraction, r.effective_len, r.shape[0]);
  return r;
}

void require_unit(const MaskSpec& spec, const char* what) {
  if (spec.level != MaskLevel::Unit) {
    throw ValidationError(std::string(what) + " supports unit-level masks only");
  }
}

}  // namespace

ValueFunction sequence_value_function(const UnitSequence& seq, const ModelParams& params,
                                      const ClassifierConfig& config, const MaskSpec& spec,
                                      std::size_t target_class) {
  if (target_class >= config.num_classes) throw ValidationError("target class out of range");
  const UnitSequence base = pad_truncate(seq, config.max_len);
  return [base, &params, &config, spec, target_class](const std::vector<std::uint8_t>& keep) {
    return predict(drop_units(base, position_keep(base, spec, keep)), params, config).probs[target_class];
  };
}

ExplanationReport random_attrib(const UnitSequence& /*seq*/, const ClassifierConfig& config, const MaskSpec& spec,
                                std::uint64_t seed) {
  validate_spec(spec, config);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  ExplanationReport r;
  r.scores.resize(grad::shape_numel(mask_shape(spec, config)));
  for (auto& v : r.scores) v = uni(rng);
  return r;
}

ExplanationReport saliency_attrib(const UnitSequence& seq, const ModelParams& params,
                                  const ClassifierConfig& config, const MaskSpec& spec) {
  validate_spec(spec, config);
  check_params(params, config);
  const ModelInput in = make_input(seq, config);
  const std::size_t len = in.size();
  const std::size_t side = mask_side(spec, config);
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  ExplanationReport r;
  r.scores.assign(grad::shape_numel(mask_shape(spec, config)), 0.0);

  if (spec.level == MaskLevel::Unit) {
    const Var e = tape.leaf(tape.value(net.embed(in)), true);
    const Var h = net.encode(net.layer_input(e, in, {}), in, {});
    const Var logits = net.classify(h, in);
    const auto pred = PredictionDistribution::from_logits(
        std::vector<double>(tape.value(logits).values().begin(), tape.value(logits).values().end()));
    NumArray<float> onehot({1, config.num_classes});
    onehot[pred.predicted_class] = 1.0f;
    const Var target = tape.nll(tape.log_softmax(logits), onehot);
    const auto g = tape.backward(target, std::span<const Var>(&e, 1))[0];
    for (std::size_t j = 0; j < len; ++j) {
      if (!in.present[j]) continue;
      double sq = 0.0;
      for (std::size_t c = 0; c < config.d_model; ++c) sq += static_cast<double>(g.at(j, c)) * g.at(j, c);
      const std::size_t idx = spec.index_mode == IndexMode::Positional ? j : static_cast<std::size_t>(in.tokens[j]);
      r.scores[idx] += std::sqrt(sq);
    }
    r.predicted_class = pred.predicted_class;
  } else {
    std::vector<Var> scales;
    const NumArray<float> ones = NumArray<float>::filled({len, len}, 1.0f);
    for (std::size_t l = 0; l < config.n_layers; ++l) scales.push_back(tape.leaf_ref(ones, true));
    MaskHooks hooks;
    hooks.logit_scales = scales;
    const Var logits = net.forward(in, hooks);
    const auto pred = PredictionDistribution::from_logits(
        std::vector<double>(tape.value(logits).values().begin(), tape.value(logits).values().end()));
    NumArray<float> onehot({1, config.num_classes});
    onehot[pred.predicted_class] = 1.0f;
    const Var target = tape.nll(tape.log_softmax(logits), onehot);
    const auto grads = tape.backward(target, scales);
    for (const auto& g : grads) {
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t k = 0; k < len; ++k) {
          if (!in.present[j] || !in.present[k]) continue;
          const std::size_t a = spec.index_mode == IndexMode::Positional ? j : static_cast<std::size_t>(in.tokens[j]);
          const std::size_t b = spec.index_mode == IndexMode::Positional ? k : static_cast<std::size_t>(in.tokens[k]);
          r.scores[a * side + b] += std::abs(static_cast<double>(g.at(j, k)));
        }
      }
    }
    r.predicted_class = pred.predicted_class;
  }
  return r;
}

ExplanationReport attention_attrib(const UnitSequence& seq, const ModelParams& params,
                                   const ClassifierConfig& config, const MaskSpec& spec) {
  if (config.arch != Arch::Transformer) {
    throw ValidationError("attention baseline requires a transformer model");
  }
  validate_spec(spec, config);
  check_params(params, config);
  const ModelInput in = make_input(seq, config);
  const std::size_t len = in.size();
  const std::size_t side = mask_side(spec, config);
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  const Var logits = net.forward(in);
  ExplanationReport r;
  r.predicted_class = PredictionDistribution::from_logits(std::vector<double>(
                          tape.value(logits).values().begin(), tape.value(logits).values().end()))
                          .predicted_class;
  r.scores.assign(grad::shape_numel(mask_shape(spec, config)), 0.0);
  const double inv_heads = 1.0 / static_cast<double>(config.n_heads);
  for (const Var node : net.attention_nodes()) {
    const auto& probs = tape.attention_probs(node);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      for (std::size_t j = 0; j < len; ++j) {
        if (!in.present[j]) continue;
        for (std::size_t k = 0; k < len; ++k) {
          if (!in.present[k]) continue;
          const double p = static_cast<double>(probs.at(h * len + j, k)) * inv_heads;
          const std::size_t a = spec.index_mode == IndexMode::Positional ? j : static_cast<std::size_t>(in.tokens[j]);
          const std::size_t b = spec.index_mode == IndexMode::Positional ? k : static_cast<std::size_t>(in.tokens[k]);
          if (spec.level == MaskLevel::Interaction) {
            r.scores[a * side + b] += p;
          } else {
            r.scores[b] += p;
          }
        }
      }
    }
  }
  return r;
}

ExplanationReport lime_attrib(const UnitSequence& seq, const ModelParams& params,
                              const ClassifierConfig& config, const MaskSpec& spec, const LimeOptions& opts) {
  require_unit(spec, "lime");
  validate_spec(spec, config);
  check_params(params, config);
  const auto pred = predict(seq, params, config);
  const std::size_t dim = feature_count(seq, config, spec);
  const LimeFit fit = lime_fit(dim, sequence_value_function(seq, params, config, spec, pred.predicted_class), opts);
  ExplanationReport r;
  r.predicted_class = pred.predicted_class;
  r.scores.assign(grad::shape_numel(mask_shape(spec, config)), 0.0);
  std::copy(fit.coef.begin(), fit.coef.end(), r.scores.begin());
  if (fit.underdetermined) {
    r.warnings.push_back("lime: " + std::to_string(opts.n_samples) + " samples for " + std::to_string(dim) +
                         " features (underdetermined fit)");
    log::info(r.warnings.back());
  }
  return r;
}

ExplanationReport shap_attrib(const UnitSequence& seq, const ModelParams& params,
                              const ClassifierConfig& config, const MaskSpec& spec,
                              std::size_t n_permutations, std::uint64_t seed) {
  require_unit(spec, "shap");
  validate_spec(spec, config);
  check_params(params, config);
  const auto pred = predict(seq, params, config);
  const std::size_t dim = feature_count(seq, config, spec);
  const auto phi = shap_permutation(dim, sequence_value_function(seq, params, config, spec, pred.predicted_class),
                                    n_permutations, seed);
  ExplanationReport r;
  r.predicted_class = pred.predicted_class;
  r.scores.assign(grad::shape_numel(mask_shape(spec, config)), 0.0);
  std::copy(phi.begin(), phi.end(), r.scores.begin());
  return r;
}

ExplanationReport attribute(Method method, const UnitSequence& seq, const ModelParams& params,
                            const ClassifierConfig& config, const MaskSpec& spec, const BaselineOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  ExplanationReport r;
  switch (method) {
    case Method::Random: r = random_attrib(seq, config, spec, opts.seed); break;
    case Method::Saliency: r = saliency_attrib(seq, params, config, spec); break;
    case Method::SelfAttention: r = attention_attrib(seq, params, config, spec); break;
    case Method::LimeLite: {
      LimeOptions lo;
      lo.n_samples = opts.lime_samples;
      lo.seed = opts.seed;
      r = lime_attrib(seq, params, config, spec, lo);
      break;
    }
    case Method::ShapLite: r = shap_attrib(seq, params, config, spec, opts.shap_permutations, opts.seed); break;
    case Method::MaskOptim: throw ValidationError("attribute: use optimize_mask for the mask explainer");
  }
  r = finish(std::move(r), seq, config, spec, method, opts.topk_fraction);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace xflow
