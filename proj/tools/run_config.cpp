#include "run_config.hpp"

#include <cmath>
#include <set>

#include "xflow/checkpoint.hpp"
#include "xflow/errors.hpp"
#include "xflow/io.hpp"

namespace xflow::cli {

using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
}

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ValidationError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T value_of(const json& j, const std::string& where, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + ": bad value for '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const std::string& where, const std::string& key, T& out) {
  if (j.contains(key)) out = value_of<T>(j, where, key);
}

DataSection parse_data(const json& j) {
  const std::string where = "data";
  require_object(j, where);
  reject_unknown(j, where,
                 {"kind", "num_classes", "seq_len", "signature_len", "signatures", "spikes", "spike_magnitude_ms",
                  "noise", "instances_per_class", "max_hops", "split"});
  DataSection d;
  if (j.contains("kind")) d.kind = unit_kind_from_string(value_of<std::string>(j, where, "kind"));
  read(j, where, "num_classes", d.num_classes);
  read(j, where, "seq_len", d.seq_len);
  read(j, where, "signature_len", d.signature_len);
  read(j, where, "spike_magnitude_ms", d.spike_magnitude_ms);
  read(j, where, "instances_per_class", d.instances_per_class);
  read(j, where, "max_hops", d.max_hops);
  if (j.contains("noise")) d.noise = value_of<double>(j, where, "noise");
  if (j.contains("signatures")) {
    std::vector<std::vector<BytePlant>> sigs;
    try {
      for (const auto& cls : j.at("signatures")) {
        std::vector<BytePlant> plants;
        for (const auto& p : cls) {
          reject_unknown(p, "data.signatures", {"position", "value"});
          plants.push_back({p.at("position").get<std::size_t>(), p.at("value").get<int>()});
        }
        sigs.push_back(std::move(plants));
      }
    } catch (const json::exception&) {
      throw ValidationError("data.signatures: expected [[{\"position\", \"value\"}, ...], ...]");
    }
    d.signatures = std::move(sigs);
  }
  if (j.contains("spikes")) {
    std::vector<RttSpike> spikes;
    try {
      for (const auto& s : j.at("spikes")) {
        reject_unknown(s, "data.spikes", {"hop", "magnitude_ms"});
        spikes.push_back({s.at("hop").get<std::size_t>(), s.at("magnitude_ms").get<double>()});
      }
    } catch (const json::exception&) {
      throw ValidationError("data.spikes: expected [{\"hop\", \"magnitude_ms\"}, ...]");
    }
    d.spikes = std::move(spikes);
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    require_object(s, "data.split");
    reject_unknown(s, "data.split", {"train", "val", "test"});
    read(s, "data.split", "train", d.split.train);
    read(s, "data.split", "val", d.split.val);
    read(s, "data.split", "test", d.split.test);
    if (std::abs(d.split.train + d.split.val + d.split.test - 1.0) > 1e-9) {
      throw ValidationError("data.split: ratios must sum to 1");
    }
  }
  return d;
}

ModelSection parse_model(const json& j) {
  const std::string where = "model";
  require_object(j, where);
  ModelSection m;
  static const std::set<std::string> train_keys{"epochs", "batch_size", "learning_rate", "patience"};
  for (const auto& [key, value] : j.items()) {
    if (train_keys.count(key)) continue;
    m.classifier[key] = value;
  }
  read(j, where, "epochs", m.train.epochs);
  read(j, where, "batch_size", m.train.batch_size);
  read(j, where, "learning_rate", m.train.learning_rate);
  read(j, where, "patience", m.train.patience);
  if (m.train.batch_size == 0) throw ValidationError("model.batch_size must be >= 1");
  if (!(m.train.learning_rate > 0)) throw ValidationError("model.learning_rate must be positive");
  // Unknown classifier keys are rejected here rather than at train time.
  config_from_json(m.classifier);
  return m;
}

ExplainerSection parse_explainer(const json& j) {
  const std::string where = "explainer";
  require_object(j, where);
  reject_unknown(j, where,
                 {"objective", "alpha1", "alpha2", "budget", "steps", "learning_rate", "topk_fraction", "init_std",
                  "label_class", "level", "index_mode"});
  ExplainerSection e;
  auto& c = e.config;
  if (j.contains("objective")) c.objective = objective_from_string(value_of<std::string>(j, where, "objective"));
  read(j, where, "alpha1", c.alpha1);
  read(j, where, "alpha2", c.alpha2);
  read(j, where, "steps", c.steps);
  read(j, where, "learning_rate", c.learning_rate);
  read(j, where, "topk_fraction", c.topk_fraction);
  read(j, where, "init_std", c.init_std);
  if (j.contains("budget")) c.budget = value_of<double>(j, where, "budget");
  if (j.contains("label_class")) c.label_class = value_of<std::size_t>(j, where, "label_class");
  if (j.contains("level")) e.level = mask_level_from_string(value_of<std::string>(j, where, "level"));
  if (j.contains("index_mode")) e.index_mode = index_mode_from_string(value_of<std::string>(j, where, "index_mode"));
  c.validate();
  return e;
}

EvalSection parse_eval(const json& j) {
  const std::string where = "eval";
  require_object(j, where);
  reject_unknown(j, where, {"budgets", "swap_fraction", "lime_samples", "shap_permutations", "length_bins"});
  EvalSection e;
  read(j, where, "budgets", e.budgets);
  read(j, where, "swap_fraction", e.swap_fraction);
  read(j, where, "lime_samples", e.lime_samples);
  read(j, where, "shap_permutations", e.shap_permutations);
  read(j, where, "length_bins", e.length_bins);
  if (e.budgets.empty()) throw ValidationError("eval.budgets must not be empty");
  for (double b : e.budgets) {
    if (!(b > 0 && b <= 1)) throw ValidationError("eval.budgets entries must be in (0, 1]");
  }
  if (!(e.swap_fraction > 0 && e.swap_fraction <= 1)) throw ValidationError("eval.swap_fraction must be in (0, 1]");
  if (e.lime_samples == 0 || e.shap_permutations == 0) {
    throw ValidationError("eval.lime_samples and eval.shap_permutations must be >= 1");
  }
  return e;
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  require_object(j, "config");
  reject_unknown(j, "config", {"seed", "data", "model", "explainer", "eval"});
  RunConfig cfg;
  if (j.contains("seed")) cfg.seed = value_of<std::uint64_t>(j, "config", "seed");
  if (j.contains("data")) cfg.data = parse_data(j.at("data"));
  if (j.contains("model")) cfg.model = parse_model(j.at("model"));
  if (j.contains("explainer")) cfg.explainer = parse_explainer(j.at("explainer"));
  if (j.contains("eval")) cfg.eval = parse_eval(j.at("eval"));
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  const auto& d = cfg.data;
  SyntheticSpec s;
  s.kind = d.kind;
  s.num_classes = d.num_classes;
  s.seq_len = d.seq_len;
  s.instances_per_class = d.instances_per_class;
  s.seed = cfg.seed.value_or(0);
  s.noise = d.noise.value_or(d.kind == UnitKind::Bytes ? 0.05 : 2.0);
  if (d.kind == UnitKind::Bytes) {
    s.byte_signatures = d.signatures ? *d.signatures
                                     : make_shared_position_signatures(d.num_classes, d.seq_len, d.signature_len, s.seed);
  } else {
    s.rtt_spikes = d.spikes ? *d.spikes : make_rtt_spikes(d.num_classes, d.seq_len, d.spike_magnitude_ms);
  }
  s.validate();
  return s;
}

}  // namespace xflow::cli
