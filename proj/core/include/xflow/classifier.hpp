#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xflow/data_model.hpp"
#include "xflow/grad.hpp"

namespace xflow {

enum class Arch { Transformer, Mlp };

const char* to_string(Arch arch);
Arch arch_from_string(const std::string& s);

struct ClassifierConfig {
  Arch arch = Arch::Transformer;
  UnitKind kind = UnitKind::Bytes;
  std::size_t max_len = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_hidden = 128;
  double dropout_rate = 0.2;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
  /// RTT inputs are multiplied by this before the input projection.
  double rtt_scale = 0.01;

  /// Throws ValidationError on inconsistent settings.
  void validate() const;

  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// Named tensors in a fixed, config-determined order.
template <typename T>
class BasicModelParams {
 public:
  void add(std::string name, grad::NumArray<T> tensor);

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const grad::NumArray<T>& tensor(std::size_t i) const { return tensors_[i]; }
  grad::NumArray<T>& tensor(std::size_t i) { return tensors_[i]; }
  std::span<const grad::NumArray<T>> tensors() const { return tensors_; }
  std::span<grad::NumArray<T>> tensors() { return tensors_; }

  /// Throws ValidationError when absent.
  const grad::NumArray<T>& at(const std::string& name) const;
  grad::NumArray<T>& at(const std::string& name);
  std::optional<std::size_t> index_of(const std::string& name) const;

  std::size_t parameter_count() const;
  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

  template <typename U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  friend bool operator==(const BasicModelParams&, const BasicModelParams&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<grad::NumArray<T>> tensors_;
};

using ModelParams = BasicModelParams<float>;

/// Expected (name, shape) layout for a config, in checkpoint order.
std::vector<std::pair<std::string, grad::Shape>> param_layout(const ClassifierConfig& config);

/// Seeded initialization (Xavier-uniform weights, N(0,1) embeddings, unit
/// layer-norm gains, zero biases).
ModelParams init_params(const ClassifierConfig& config);

/// Throws ValidationError if names/shapes differ from param_layout(config).
template <typename T>
void check_params(const BasicModelParams<T>& params, const ClassifierConfig& config);

struct PredictionDistribution {
  std::vector<double> probs;
  std::size_t predicted_class = 0;

  /// Softmax in double precision; argmax ties resolve to the lowest index.
  static PredictionDistribution from_logits(std::span<const double> logits);
  static PredictionDistribution from_probs(std::vector<double> probs);
};

/// A sequence prepared for the network: padded to max_len, with presence
/// flags. If no position is present, position 0 is marked present so that
/// pooling stays defined.
struct ModelInput {
  UnitKind kind = UnitKind::Bytes;
  std::vector<int> tokens;
  std::vector<double> values;
  std::vector<std::uint8_t> present;

  std::size_t size() const { return present.size(); }
};

/// Throws ValidationError on kind mismatch or out-of-vocabulary tokens.
ModelInput make_input(const UnitSequence& seq, const ClassifierConfig& config);

/// Fixed sinusoidal position table [len, d]; cached per shape.
template <typename T>
const grad::NumArray<T>& positional_encoding(std::size_t len, std::size_t d);

/// Optional perturbation points inside the network graph.
struct MaskHooks {
  /// [L]: embedding row j is multiplied by this value before positions are added.
  std::optional<grad::Var> unit_scale;
  /// [L, L]: added to the pre-softmax logits of every attention layer and head.
  std::optional<grad::Var> attn_bias;
  /// One [L, L] multiplicative logit factor per layer (empty = none).
  std::vector<grad::Var> logit_scales;
};

/// Dropout state; nullptr means inference mode.
struct DropoutContext {
  std::mt19937_64* rng = nullptr;
  double rate = 0.0;
};

/// Binds model parameters onto a tape and records the classifier graph.
template <typename T>
class Network {
 public:
  Network(grad::Tape<T>& tape, const BasicModelParams<T>& params, const ClassifierConfig& config,
          bool trainable = false);

  /// Raw unit embeddings e_j, [L, d] (no positional term).
  grad::Var embed(const ModelInput& input);
  /// Input to the first layer: e_j * scale_j + phi_j.
  grad::Var layer_input(grad::Var embeddings, const ModelInput& input, const MaskHooks& hooks,
                        const DropoutContext* dropout = nullptr);
  /// Attention stack for transformers; for the MLP, zeroes padded rows.
  grad::Var encode(grad::Var x, const ModelInput& input, const MaskHooks& hooks,
                   const DropoutContext* dropout = nullptr);
  /// Pool (or flatten, MLP) and project to logits [1, C].
  grad::Var classify(grad::Var h, const ModelInput& input, const DropoutContext* dropout = nullptr);
  /// Full pass; returns logits [1, C].
  grad::Var forward(const ModelInput& input, const MaskHooks& hooks = {},
                    const DropoutContext* dropout = nullptr);

  const std::vector<grad::Var>& param_vars() const { return param_vars_; }
  /// Attention nodes recorded by the most recent encode(), one per layer.
  const std::vector<grad::Var>& attention_nodes() const { return attention_nodes_; }

 private:
  grad::Var p(const std::string& name) const;
  grad::Var dropout(grad::Var x, const DropoutContext* ctx);

  grad::Tape<T>& tape_;
  const BasicModelParams<T>& params_;
  const ClassifierConfig& config_;
  std::vector<grad::Var> param_vars_;
  std::vector<grad::Var> attention_nodes_;
};

extern template class Network<float>;
extern template class Network<double>;

// -------------------------------------------------------------- operations

/// e_j + phi_j for every position, [max_len, d].
grad::NumArray<float> embed_units(const UnitSequence& seq, const ModelParams& params,
                                  const ClassifierConfig& config);

/// Raw mask scores for encode(); sigmoid/log-sigmoid are applied inside.
struct EncodeHooks {
  /// [L]: embeddings scaled by sigmoid(theta) before the first layer.
  std::optional<grad::NumArray<float>> unit_theta;
  /// [L, L]: log sigmoid(theta) added to attention logits of every layer.
  std::optional<grad::NumArray<float>> pair_theta;
};

/// Runs the attention stack over precomputed layer inputs (embeddings
/// already including positions). With a unit hook, the positional part is
/// kept unscaled.
grad::NumArray<float> encode(const grad::NumArray<float>& embeddings,
                             std::span<const std::uint8_t> present, const ModelParams& params,
                             const ClassifierConfig& config, const EncodeHooks* hooks = nullptr);

PredictionDistribution pool_and_classify(const grad::NumArray<float>& contextual,
                                         std::span<const std::uint8_t> present,
                                         const ModelParams& params, const ClassifierConfig& config);

struct TrainHyper {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t patience = 10;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
  /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
  std::size_t best_epoch = 0;
  double best_val_acc = 0;
};

/// Adam on mean cross-entropy with early stopping on validation accuracy
/// (ties broken by lower validation loss). Uses ds.splits.
TrainResult train(const LabeledDataset& ds, const ClassifierConfig& config, const TrainHyper& hyper);

/// Inference with dropout disabled; output order matches input order.
std::vector<PredictionDistribution> predict_batch(std::span<const UnitSequence> sequences,
                                                  const ModelParams& params,
                                                  const ClassifierConfig& config);

PredictionDistribution predict(const UnitSequence& seq, const ModelParams& params,
                               const ClassifierConfig& config);

/// Fraction of sequences whose predicted class equals label_id.
double accuracy(std::span<const UnitSequence> sequences, const ModelParams& params,
                const ClassifierConfig& config);

}  // namespace xflow
