#include "xflow/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <numeric>

#include "xflow/errors.hpp"
#include "xflow/log.hpp"
#include "xflow/optim.hpp"

namespace xflow {

using grad::NumArray;
using grad::Shape;
using grad::Tape;
using grad::Var;

const char* to_string(Arch arch) { return arch == Arch::Transformer ? "transformer" : "mlp"; }

Arch arch_from_string(const std::string& s) {
  if (s == "transformer") return Arch::Transformer;
  if (s == "mlp") return Arch::Mlp;
  throw ValidationError("unknown architecture '" + s + "' (expected transformer|mlp)");
}

void ClassifierConfig::validate() const {
  if (num_classes < 2) throw ValidationError("classifier: num_classes must be >= 2");
  if (max_len == 0) throw ValidationError("classifier: max_len must be >= 1");
  if (d_model == 0) throw ValidationError("classifier: d_model must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ValidationError("classifier: dropout_rate must be in [0, 1)");
  }
  if (!(rtt_scale > 0.0)) throw ValidationError("classifier: rtt_scale must be positive");
  if (arch == Arch::Transformer) {
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ValidationError("classifier: d_model must be divisible by n_heads");
    }
    if (ff_hidden == 0) throw ValidationError("classifier: ff_hidden must be >= 1");
  } else if (n_layers > 0 && ff_hidden == 0) {
    throw ValidationError("classifier: ff_hidden must be >= 1");
  }
}

// ------------------------------------------------------------ parameters

template <typename T>
void BasicModelParams<T>::add(std::string name, NumArray<T> tensor) {
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

template <typename T>
std::optional<std::size_t> BasicModelParams<T>::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(std::distance(names_.begin(), it));
}

template <typename T>
const NumArray<T>& BasicModelParams<T>::at(const std::string& name) const {
  const auto i = index_of(name);
  if (!i) throw ValidationError("model parameter '" + name + "' not found");
  return tensors_[*i];
}

template <typename T>
NumArray<T>& BasicModelParams<T>::at(const std::string& name) {
  const auto i = index_of(name);
  if (!i) throw ValidationError("model parameter '" + name + "' not found");
  return tensors_[*i];
}

template <typename T>
std::size_t BasicModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <typename T>
std::uint64_t BasicModelParams<T>::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    for (auto e : tensors_[i].shape()) mix(&e, sizeof e);
    mix(tensors_[i].data(), tensors_[i].size() * sizeof(T));
  }
  return h;
}

template class BasicModelParams<float>;
template class BasicModelParams<double>;

std::vector<std::pair<std::string, Shape>> param_layout(const ClassifierConfig& config) {
  const std::size_t d = config.d_model;
  std::vector<std::pair<std::string, Shape>> out;
  if (config.kind == UnitKind::Bytes) {
    out.push_back({"embed.table", {kByteVocabSize, d}});
  } else {
    out.push_back({"embed.proj", {1, d}});
    out.push_back({"embed.bias", {d}});
  }
  std::size_t head_in = d;
  if (config.arch == Arch::Transformer) {
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      out.push_back({pre + "ln1.gamma", {d}});
      out.push_back({pre + "ln1.beta", {d}});
      for (const char* m : {"q", "k", "v", "o"}) {
        out.push_back({pre + "attn.w" + m, {d, d}});
        out.push_back({pre + "attn.b" + m, {d}});
      }
      out.push_back({pre + "ln2.gamma", {d}});
      out.push_back({pre + "ln2.beta", {d}});
      out.push_back({pre + "ff.w1", {d, config.ff_hidden}});
      out.push_back({pre + "ff.b1", {config.ff_hidden}});
      out.push_back({pre + "ff.w2", {config.ff_hidden, d}});
      out.push_back({pre + "ff.b2", {d}});
    }
  } else {
    head_in = config.max_len * d;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const std::string pre = "mlp." + std::to_string(l) + ".";
      out.push_back({pre + "w", {head_in, config.ff_hidden}});
      out.push_back({pre + "b", {config.ff_hidden}});
      head_in = config.ff_hidden;
    }
  }
  out.push_back({"head.w", {head_in, config.num_classes}});
  out.push_back({"head.b", {config.num_classes}});
  return out;
}

ModelParams init_params(const ClassifierConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelParams params;
  for (auto& [name, shape] : param_layout(config)) {
    NumArray<float> t(shape);
    const bool is_gain = name.ends_with("gamma");
    const bool is_bias = shape.size() == 1 && !is_gain;
    if (is_gain) {
      std::fill(t.values().begin(), t.values().end(), 1.0f);
    } else if (is_bias) {
      // zeros
    } else if (name.starts_with("embed.")) {
      for (auto& v : t.values()) v = static_cast<float>(normal(rng));
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      std::uniform_real_distribution<double> uni(-limit, limit);
      for (auto& v : t.values()) v = static_cast<float>(uni(rng));
    }
    params.add(name, std::move(t));
  }
  return params;
}

template <typename T>
void check_params(const BasicModelParams<T>& params, const ClassifierConfig& config) {
  const auto layout = param_layout(config);
  if (layout.size() != params.size()) {
    throw ValidationError("model has " + std::to_string(params.size()) + " tensors, config expects " +
                          std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != params.names()[i] || layout[i].second != params.tensor(i).shape()) {
      throw ValidationError("parameter " + std::to_string(i) + " is " + params.names()[i] +
                            grad::shape_str(params.tensor(i).shape()) + ", config expects " +
                            layout[i].first + grad::shape_str(layout[i].second));
    }
  }
}

template void check_params(const BasicModelParams<float>&, const ClassifierConfig&);
template void check_params(const BasicModelParams<double>&, const ClassifierConfig&);

// ------------------------------------------------------------ predictions

PredictionDistribution PredictionDistribution::from_logits(std::span<const double> logits) {
  PredictionDistribution out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  out.probs.resize(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.probs[i] = std::exp(logits[i] - mx);
    total += out.probs[i];
  }
  for (auto& p : out.probs) p /= total;
  out.predicted_class = static_cast<std::size_t>(
      std::distance(out.probs.begin(), std::max_element(out.probs.begin(), out.probs.end())));
  return out;
}

PredictionDistribution PredictionDistribution::from_probs(std::vector<double> probs) {
  PredictionDistribution out;
  out.probs = std::move(probs);
  out.predicted_class = static_cast<std::size_t>(
      std::distance(out.probs.begin(), std::max_element(out.probs.begin(), out.probs.end())));
  return out;
}

ModelInput make_input(const UnitSequence& seq, const ClassifierConfig& config) {
  if (seq.kind != config.kind) {
    throw ValidationError(std::string("sequence '") + seq.id + "' is " + to_string(seq.kind) +
                          " but the model expects " + to_string(config.kind));
  }
  const UnitSequence padded = seq.size() == config.max_len ? seq : pad_truncate(seq, config.max_len);
  ModelInput in;
  in.kind = seq.kind;
  in.present = padded.present;
  if (seq.kind == UnitKind::Bytes) {
    in.tokens.resize(config.max_len);
    for (std::size_t i = 0; i < config.max_len; ++i) {
      const double u = padded.units[i];
      if (u < 0 || u >= static_cast<double>(kByteVocabSize) || u != std::floor(u)) {
        throw ValidationError("sequence '" + seq.id + "': token outside vocabulary at " + std::to_string(i));
      }
      in.tokens[i] = static_cast<int>(u);
      if (in.tokens[i] == kPadToken) in.present[i] = 0;
    }
  } else {
    in.values = padded.units;
  }
  if (std::none_of(in.present.begin(), in.present.end(), [](std::uint8_t f) { return f != 0; })) {
    in.present[0] = 1;
  }
  return in;
}

template <typename T>
const NumArray<T>& positional_encoding(std::size_t len, std::size_t d) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, NumArray<T>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({len, d});
  if (it != cache.end()) return it->second;
  NumArray<T> table({len, d});
  for (std::size_t j = 0; j < len; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(j) * rate;
      table.at(j, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return cache.emplace(std::make_pair(len, d), std::move(table)).first->second;
}

template const NumArray<float>& positional_encoding<float>(std::size_t, std::size_t);
template const NumArray<double>& positional_encoding<double>(std::size_t, std::size_t);

// ------------------------------------------------------------ network

template <typename T>
Network<T>::Network(Tape<T>& tape, const BasicModelParams<T>& params, const ClassifierConfig& config,
                    bool trainable)
    : tape_(tape), params_(params), config_(config) {
  param_vars_.reserve(params.size());
  for (const auto& t : params.tensors()) param_vars_.push_back(tape_.leaf_ref(t, trainable));
}

template <typename T>
Var Network<T>::p(const std::string& name) const {
  const auto i = params_.index_of(name);
  if (!i) throw ValidationError("model parameter '" + name + "' not found");
  return param_vars_[*i];
}

template <typename T>
Var Network<T>::dropout(Var x, const DropoutContext* ctx) {
  if (ctx == nullptr || ctx->rng == nullptr || ctx->rate <= 0.0) return x;
  const auto& shape = tape_.value(x).shape();
  NumArray<T> keep(shape);
  std::bernoulli_distribution draw(1.0 - ctx->rate);
  const T inv = static_cast<T>(1.0 / (1.0 - ctx->rate));
  for (auto& v : keep.values()) v = draw(*ctx->rng) ? inv : T(0);
  return tape_.mul(x, tape_.leaf(std::move(keep)));
}

template <typename T>
Var Network<T>::embed(const ModelInput& input) {
  if (input.size() != config_.max_len) {
    throw ValidationError("input length " + std::to_string(input.size()) + " != max_len " +
                          std::to_string(config_.max_len));
  }
  if (config_.kind == UnitKind::Bytes) {
    return tape_.gather(p("embed.table"), input.tokens);
  }
  NumArray<T> vals({input.size(), 1});
  for (std::size_t i = 0; i < input.size(); ++i) {
    vals[i] = static_cast<T>(input.values[i] * config_.rtt_scale);
  }
  return tape_.linear(tape_.leaf(std::move(vals)), p("embed.proj"), p("embed.bias"));
}

template <typename T>
Var Network<T>::layer_input(Var embeddings, const ModelInput& input, const MaskHooks& hooks,
                            const DropoutContext* drop) {
  Var e = embeddings;
  if (hooks.unit_scale) e = tape_.row_scale(e, *hooks.unit_scale);
  const auto& phi = positional_encoding<T>(input.size(), config_.d_model);
  return dropout(tape_.add(e, tape_.leaf_ref(phi)), drop);
}

template <typename T>
Var Network<T>::encode(Var x, const ModelInput& input, const MaskHooks& hooks,
                       const DropoutContext* drop) {
  attention_nodes_.clear();
  if (config_.arch == Arch::Mlp) {
    if (hooks.attn_bias || !hooks.logit_scales.empty()) {
      throw ValidationError("interaction hooks require a transformer model");
    }
    NumArray<T> mask({input.size()});
    for (std::size_t i = 0; i < input.size(); ++i) mask[i] = input.present[i] ? T(1) : T(0);
    return tape_.row_scale(x, tape_.leaf(std::move(mask)));
  }
  if (!hooks.logit_scales.empty() && hooks.logit_scales.size() != config_.n_layers) {
    throw ValidationError("expected one logit-scale hook per layer");
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const Var y = tape_.layer_norm(x, p(pre + "ln1.gamma"), p(pre + "ln1.beta"));
    const Var q = tape_.linear(y, p(pre + "attn.wq"), p(pre + "attn.bq"));
    const Var k = tape_.linear(y, p(pre + "attn.wk"), p(pre + "attn.bk"));
    const Var v = tape_.linear(y, p(pre + "attn.wv"), p(pre + "attn.bv"));
    grad::AttentionOptions opts;
    opts.heads = config_.n_heads;
    opts.key_present = input.present;
    opts.logit_bias = hooks.attn_bias;
    if (!hooks.logit_scales.empty()) opts.logit_scale = hooks.logit_scales[l];
    const Var a = tape_.attention(q, k, v, opts);
    attention_nodes_.push_back(a);
    const Var o = tape_.linear(a, p(pre + "attn.wo"), p(pre + "attn.bo"));
    x = tape_.add(x, dropout(o, drop));
    const Var y2 = tape_.layer_norm(x, p(pre + "ln2.gamma"), p(pre + "ln2.beta"));
    const Var f1 = tape_.relu(tape_.linear(y2, p(pre + "ff.w1"), p(pre + "ff.b1")));
    const Var f2 = tape_.linear(f1, p(pre + "ff.w2"), p(pre + "ff.b2"));
    x = tape_.add(x, dropout(f2, drop));
  }
  return x;
}

template <typename T>
Var Network<T>::classify(Var h, const ModelInput& input, const DropoutContext* drop) {
  if (config_.arch == Arch::Transformer) {
    const Var pooled = tape_.mean_pool(h, input.present);
    return tape_.linear(pooled, p("head.w"), p("head.b"));
  }
  Var z = tape_.reshape(h, {1, input.size() * config_.d_model});
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "mlp." + std::to_string(l) + ".";
    z = dropout(tape_.relu(tape_.linear(z, p(pre + "w"), p(pre + "b"))), drop);
  }
  return tape_.linear(z, p("head.w"), p("head.b"));
}

template <typename T>
Var Network<T>::forward(const ModelInput& input, const MaskHooks& hooks, const DropoutContext* drop) {
  const Var e = embed(input);
  const Var x = layer_input(e, input, hooks, drop);
  const Var h = encode(x, input, hooks, drop);
  return classify(h, input, drop);
}

template class Network<float>;
template class Network<double>;

// ------------------------------------------------------------ operations

namespace {

PredictionDistribution distribution_of(const NumArray<float>& logits) {
  std::vector<double> l(logits.values().begin(), logits.values().end());
  return PredictionDistribution::from_logits(l);
}

ModelInput presence_only(std::span<const std::uint8_t> present) {
  ModelInput in;
  in.present.assign(present.begin(), present.end());
  return in;
}

}  // namespace

NumArray<float> embed_units(const UnitSequence& seq, const ModelParams& params,
                            const ClassifierConfig& config) {
  check_params(params, config);
  const ModelInput in = make_input(seq, config);
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  const Var x = net.layer_input(net.embed(in), in, {});
  return tape.value(x);
}

NumArray<float> encode(const NumArray<float>& embeddings, std::span<const std::uint8_t> present,
                       const ModelParams& params, const ClassifierConfig& config,
                       const EncodeHooks* hooks) {
  check_params(params, config);
  const Shape expected{config.max_len, config.d_model};
  if (embeddings.shape() != expected || present.size() != config.max_len) {
    throw ValidationError("encode: embeddings " + grad::shape_str(embeddings.shape()) + " expected " +
                          grad::shape_str(expected));
  }
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  const ModelInput in = presence_only(present);
  MaskHooks mh;
  Var x = tape.leaf(embeddings);
  if (hooks && hooks->unit_theta) {
    if (hooks->unit_theta->size() != config.max_len) {
      throw ValidationError("encode: unit hook has " + std::to_string(hooks->unit_theta->size()) +
                            " scores for length " + std::to_string(config.max_len));
    }
    const auto& phi = positional_encoding<float>(config.max_len, config.d_model);
    NumArray<float> raw = embeddings;
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] -= phi[i];
    const Var s = tape.sigmoid(tape.leaf(*hooks->unit_theta));
    x = tape.add(tape.row_scale(tape.leaf(std::move(raw)), s), tape.leaf_ref(phi));
  }
  if (hooks && hooks->pair_theta) {
    const Shape square{config.max_len, config.max_len};
    if (hooks->pair_theta->shape() != square) {
      throw ValidationError("encode: interaction hook shape " + grad::shape_str(hooks->pair_theta->shape()) +
                            " expected " + grad::shape_str(square));
    }
    mh.attn_bias = tape.log_sigmoid(tape.leaf(*hooks->pair_theta));
  }
  return tape.value(net.encode(x, in, mh));
}

PredictionDistribution pool_and_classify(const NumArray<float>& contextual,
                                         std::span<const std::uint8_t> present,
                                         const ModelParams& params, const ClassifierConfig& config) {
  check_params(params, config);
  if (std::none_of(present.begin(), present.end(), [](std::uint8_t f) { return f != 0; })) {
    throw ValidationError("pool_and_classify: no present positions");
  }
  if (contextual.rows() != present.size() || contextual.cols() != config.d_model) {
    throw ValidationError("pool_and_classify: contextual vectors " + grad::shape_str(contextual.shape()) +
                          " do not match " + std::to_string(present.size()) + " positions");
  }
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  const ModelInput in = presence_only(present);
  return distribution_of(tape.value(net.classify(tape.leaf(contextual), in)));
}

PredictionDistribution predict(const UnitSequence& seq, const ModelParams& params,
                               const ClassifierConfig& config) {
  const ModelInput in = make_input(seq, config);
  Tape<float> tape(false);
  Network<float> net(tape, params, config);
  return distribution_of(tape.value(net.forward(in)));
}

std::vector<PredictionDistribution> predict_batch(std::span<const UnitSequence> sequences,
                                                  const ModelParams& params,
                                                  const ClassifierConfig& config) {
  config.validate();
  check_params(params, config);
  std::vector<PredictionDistribution> out;
  out.reserve(sequences.size());
  for (const auto& seq : sequences) out.push_back(predict(seq, params, config));
  return out;
}

double accuracy(std::span<const UnitSequence> sequences, const ModelParams& params,
                const ClassifierConfig& config) {
  if (sequences.empty()) return 0.0;
  const auto preds = predict_batch(sequences, params, config);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    hits += preds[i].predicted_class == static_cast<std::size_t>(sequences[i].label_id);
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ------------------------------------------------------------ training

namespace {

struct LossAcc {
  double loss = 0;
  double acc = 0;
};

LossAcc evaluate_split(const std::vector<ModelInput>& inputs, const std::vector<int>& labels,
                       const ModelParams& params, const ClassifierConfig& config) {
  LossAcc out;
  if (inputs.empty()) return out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tape<float> tape(false);
    Network<float> net(tape, params, config);
    const auto pred = distribution_of(tape.value(net.forward(inputs[i])));
    const auto label = static_cast<std::size_t>(labels[i]);
    out.loss += -std::log(std::max(pred.probs[label], 1e-12));
    out.acc += pred.predicted_class == label;
  }
  out.loss /= static_cast<double>(inputs.size());
  out.acc /= static_cast<double>(inputs.size());
  return out;
}

}  // namespace

TrainResult train(const LabeledDataset& ds, const ClassifierConfig& config, const TrainHyper& hyper) {
  config.validate();
  if (ds.num_classes() != config.num_classes) {
    throw ValidationError("dataset has " + std::to_string(ds.num_classes()) + " classes, model expects " +
                          std::to_string(config.num_classes));
  }
  if (ds.splits.train.empty() || ds.splits.val.empty()) {
    throw ValidationError("train: train and validation splits must be non-empty");
  }
  if (hyper.batch_size == 0) throw ValidationError("train: batch_size must be >= 1");

  auto prepare = [&](const std::vector<std::size_t>& idx, std::vector<ModelInput>& inputs,
                     std::vector<int>& labels) {
    for (auto i : idx) {
      inputs.push_back(make_input(ds.sequences.at(i), config));
      labels.push_back(ds.sequences[i].label_id);
    }
  };
  std::vector<ModelInput> train_in, val_in;
  std::vector<int> train_y, val_y;
  prepare(ds.splits.train, train_in, train_y);
  prepare(ds.splits.val, val_in, val_y);

  TrainResult result;
  ModelParams params = init_params(config);
  result.params = params;
  if (hyper.epochs == 0) return result;

  Adam<float> opt(hyper.learning_rate);
  std::mt19937_64 rng(hyper.seed);
  DropoutContext drop{&rng, config.dropout_rate};
  std::vector<std::size_t> order(train_in.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double best_acc = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t stop = std::min(order.size(), start + hyper.batch_size);
      const float inv_batch = 1.0f / static_cast<float>(stop - start);
      std::vector<NumArray<float>> grads;
      grads.reserve(params.size());
      for (const auto& t : params.tensors()) grads.emplace_back(t.shape());
      for (std::size_t b = start; b < stop; ++b) {
        const auto& in = train_in[order[b]];
        const auto label = static_cast<std::size_t>(train_y[order[b]]);
        Tape<float> tape(false);
        Network<float> net(tape, params, config, true);
        const Var logits = net.forward(in, {}, &drop);
        NumArray<float> target({1, config.num_classes});
        target[label] = 1.0f;
        const Var loss = tape.nll(tape.log_softmax(logits), target);
        const double lv = tape.value(loss)[0];
        if (!std::isfinite(lv)) {
          throw NumericError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
        }
        loss_sum += lv;
        const auto& lg = tape.value(logits);
        const auto arg = static_cast<std::size_t>(
            std::distance(lg.values().begin(), std::max_element(lg.values().begin(), lg.values().end())));
        hits += arg == label;
        const auto g = tape.backward(loss, net.param_vars());
        for (std::size_t i = 0; i < g.size(); ++i) {
          auto dst = grads[i].values();
          const auto src = g[i].values();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * inv_batch;
        }
      }
      opt.step(params.tensors(), grads);
    }
    if (!std::all_of(params.tensors().begin(), params.tensors().end(),
                     [](const NumArray<float>& t) { return t.all_finite(); })) {
      throw NumericError("training diverged (non-finite parameters) at epoch " + std::to_string(epoch));
    }
    const LossAcc val = evaluate_split(val_in, val_y, params, config);
    EpochLog entry{epoch, loss_sum / static_cast<double>(order.size()),
                   static_cast<double>(hits) / static_cast<double>(order.size()), val.loss, val.acc};
    result.log.push_back(entry);
    log::debug("epoch ", epoch, " train_loss=", entry.train_loss, " train_acc=", entry.train_acc,
               " val_loss=", entry.val_loss, " val_acc=", entry.val_acc);

    if (val.acc > best_acc || (val.acc == best_acc && val.loss < best_loss)) {
      best_acc = val.acc;
      best_loss = val.loss;
      result.params = params;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }
  result.best_val_acc = best_acc;
  return result;
}

}  // namespace xflow
