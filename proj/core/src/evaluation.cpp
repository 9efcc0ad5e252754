#include "xflow/evaluation.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "xflow/errors.hpp"

namespace xflow {

namespace {

std::vector<std::uint8_t> keep_flags(const UnitSequence& seq, std::span<const std::size_t> topk,
                                     const MaskSpec& spec, bool keep_selected) {
  if (spec.level != MaskLevel::Unit) {
    throw ValidationError("sequence perturbation applies to unit-level masks; interaction uses attention masks");
  }
  std::vector<std::uint8_t> selected(spec.index_mode == IndexMode::Positional ? seq.size() : kByteVocabSize, 0);
  for (auto i : topk) {
    if (i < selected.size()) selected[i] = 1;
  }
  std::vector<std::uint8_t> keep(seq.size(), 1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.present[i]) continue;
    const std::size_t idx = spec.index_mode == IndexMode::Positional ? i : static_cast<std::size_t>(seq.token(i));
    const bool in = selected[idx] != 0;
    keep[i] = keep_selected ? in : !in;
  }
  return keep;
}

MaskParams pair_mask(std::span<const std::size_t> topk, const MaskSpec& spec, const ClassifierConfig& config,
                     float selected, float other) {
  if (spec.level != MaskLevel::Interaction) throw ValidationError("pair mask requires an interaction spec");
  MaskParams m;
  m.theta = grad::NumArray<float>::filled(mask_shape(spec, config), other);
  for (auto i : topk) {
    if (i >= m.theta.size()) throw ValidationError("pair index " + std::to_string(i) + " outside mask");
    m.theta[i] = selected;
  }
  return m;
}

struct Tally {
  std::size_t n = 0, fid = 0, acc = 0, cfid = 0, cacc = 0;

  void add(const PerturbedPredictions& p, int label) {
    const auto truth = static_cast<std::size_t>(label);
    ++n;
    fid += p.kept.predicted_class == p.original.predicted_class;
    acc += p.kept.predicted_class == truth;
    cfid += p.removed.predicted_class != p.original.predicted_class;
    cacc += p.removed.predicted_class != truth;
  }

  MetricResult result(const ExplanationReport& like, double fraction) const {
    MetricResult r;
    const double dn = static_cast<double>(n);
    r.n = n;
    r.fid_hits = fid;
    r.acc_hits = acc;
    r.c_fid_hits = cfid;
    r.c_acc_hits = cacc;
    r.fid = static_cast<double>(fid) / dn;
    r.acc = static_cast<double>(acc) / dn;
    r.c_fid = static_cast<double>(cfid) / dn;
    r.c_acc = static_cast<double>(cacc) / dn;
    r.c_fid_agree = 1.0 - r.c_fid;
    r.c_acc_agree = 1.0 - r.c_acc;
    r.budget_fraction = fraction;
    r.method = like.method;
    r.level = like.spec.level;
    r.index_mode = like.spec.index_mode;
    return r;
  }
};

void check_aligned(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports) {
  if (instances.size() != reports.size()) {
    throw ValidationError("got " + std::to_string(reports.size()) + " reports for " +
                          std::to_string(instances.size()) + " instances");
  }
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (!reports[i].id.empty() && reports[i].id != instances[i].id) {
      throw ValidationError("report '" + reports[i].id + "' does not match instance '" + instances[i].id + "'");
    }
  }
}

}  // namespace

UnitSequence perturb_keep_topk(const UnitSequence& seq, std::span<const std::size_t> topk, const MaskSpec& spec) {
  return drop_units(seq, keep_flags(seq, topk, spec, true));
}

UnitSequence perturb_remove_topk(const UnitSequence& seq, std::span<const std::size_t> topk, const MaskSpec& spec) {
  return drop_units(seq, keep_flags(seq, topk, spec, false));
}

MaskParams interaction_keep_mask(std::span<const std::size_t> topk, const MaskSpec& spec,
                                 const ClassifierConfig& config) {
  return pair_mask(topk, spec, config, kKeptPairTheta, kDroppedPairTheta);
}

MaskParams interaction_remove_mask(std::span<const std::size_t> topk, const MaskSpec& spec,
                                   const ClassifierConfig& config) {
  return pair_mask(topk, spec, config, kDroppedPairTheta, kKeptPairTheta);
}

PerturbedPredictions perturbed_predictions(const UnitSequence& seq, std::span<const std::size_t> topk,
                                           const MaskSpec& spec, const ModelParams& params,
                                           const ClassifierConfig& config) {
  PerturbedPredictions out;
  out.original = predict(seq, params, config);
  if (spec.level == MaskLevel::Unit) {
    out.kept = predict(perturb_keep_topk(seq, topk, spec), params, config);
    out.removed = predict(perturb_remove_topk(seq, topk, spec), params, config);
  } else {
    out.kept = masked_predict(seq, params, config, interaction_keep_mask(topk, spec, config), spec);
    out.removed = masked_predict(seq, params, config, interaction_remove_mask(topk, spec, config), spec);
  }
  return out;
}

std::vector<std::size_t> report_topk(const ExplanationReport& report, double fraction) {
  if (report.shape.empty()) throw ValidationError("report '" + report.id + "' has no shape");
  return select_topk(report.scores, report.spec, fraction, report.effective_len, report.shape[0]);
}

MetricResult compute_metrics(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                             const ModelParams& params, const ClassifierConfig& config, double fraction) {
  if (instances.empty()) throw ValidationError("compute_metrics: empty instance set");
  check_aligned(instances, reports);
  Tally tally;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto topk = report_topk(reports[i], fraction);
    tally.add(perturbed_predictions(instances[i], topk, reports[i].spec, params, config), instances[i].label_id);
  }
  return tally.result(reports[0], fraction);
}

MetricResult evaluate_global(std::span<const UnitSequence> instances, const ExplanationReport& shared,
                             const ModelParams& params, const ClassifierConfig& config, double fraction) {
  const std::size_t c = shared.spec.global_class.value_or(shared.predicted_class);
  const auto topk = report_topk(shared, fraction);
  Tally tally;
  for (const auto& seq : instances) {
    if (predict(seq, params, config).predicted_class != c) continue;
    tally.add(perturbed_predictions(seq, topk, shared.spec, params, config), seq.label_id);
  }
  if (tally.n == 0) throw ValidationError("evaluate_global: no instance is predicted as class " + std::to_string(c));
  return tally.result(shared, fraction);
}

std::vector<SwapPair> sample_swap_pairs(std::span<const UnitSequence> instances, std::uint64_t seed) {
  std::set<int> classes;
  for (const auto& s : instances) classes.insert(s.label_id);
  if (classes.size() < 2) throw ValidationError("byte swap needs at least two classes");
  std::mt19937_64 rng(seed);
  std::vector<SwapPair> pairs;
  pairs.reserve(instances.size());
  std::vector<std::size_t> donors;
  for (std::size_t a = 0; a < instances.size(); ++a) {
    donors.clear();
    for (std::size_t b = 0; b < instances.size(); ++b) {
      if (instances[b].label_id != instances[a].label_id) donors.push_back(b);
    }
    std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
    const std::size_t b = donors[pick(rng)];
    pairs.push_back({a, b, instances[b].label_id});
  }
  return pairs;
}

UnitSequence swap_units(const UnitSequence& recipient, const UnitSequence& donor,
                        std::span<const std::size_t> positions) {
  UnitSequence out = recipient;
  for (auto p : positions) {
    if (p >= out.size() || p >= donor.size()) continue;
    out.units[p] = donor.units[p];
    out.present[p] = donor.present[p];
  }
  return out;
}

SwapResult byte_swap_experiment(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                                std::span<const SwapModel> models, double fraction, std::uint64_t seed) {
  return byte_swap_experiment(instances, reports, models, fraction, sample_swap_pairs(instances, seed));
}

SwapResult byte_swap_experiment(std::span<const UnitSequence> instances, std::span<const ExplanationReport> reports,
                                std::span<const SwapModel> models, double fraction,
                                const std::vector<SwapPair>& pairs) {
  check_aligned(instances, reports);
  if (models.empty()) throw ValidationError("byte swap needs at least one model");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("swap fraction must be in (0, 1]");
  for (const auto& s : instances) {
    if (s.kind != UnitKind::Bytes) throw ValidationError("byte swap requires byte sequences");
  }
  SwapResult result;
  result.pairs = pairs;
  std::vector<UnitSequence> swapped;
  swapped.reserve(pairs.size());
  for (const auto& pr : pairs) {
    if (pr.recipient >= instances.size() || pr.donor >= instances.size()) {
      throw ValidationError("swap pair index out of range");
    }
    if (instances[pr.recipient].label_id == instances[pr.donor].label_id) {
      throw ValidationError("swap pairs must join different classes");
    }
    const auto& rep = reports[pr.donor];
    if (rep.spec.level != MaskLevel::Unit) throw ValidationError("byte swap needs unit-level reports");
    std::vector<std::size_t> positions = report_topk(rep, fraction);
    if (rep.spec.index_mode == IndexMode::Value) {
      const std::set<std::size_t> values(positions.begin(), positions.end());
      const auto& donor = instances[pr.donor];
      positions.clear();
      for (std::size_t i = 0; i < donor.size(); ++i) {
        if (donor.present[i] && values.count(static_cast<std::size_t>(donor.token(i)))) positions.push_back(i);
      }
    }
    swapped.push_back(swap_units(instances[pr.recipient], instances[pr.donor], positions));
  }
  for (const auto& m : models) {
    if (m.params == nullptr) throw ValidationError("swap model '" + m.name + "' has no parameters");
    ModelSwapRate rate;
    rate.name = m.name;
    rate.n = pairs.size();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      rate.transformed +=
          predict(swapped[i], *m.params, m.config).predicted_class == static_cast<std::size_t>(pairs[i].donor_class);
    }
    rate.rate = rate.n ? static_cast<double>(rate.transformed) / static_cast<double>(rate.n) : 0.0;
    result.per_model.push_back(rate);
  }
  return result;
}

std::vector<LengthBin> length_sensitivity(std::span<const UnitSequence> instances,
                                          std::span<const ExplanationReport> reports, const ModelParams& params,
                                          const ClassifierConfig& config, double fraction,
                                          const std::vector<std::size_t>& bin_edges) {
  if (bin_edges.size() < 2) throw ValidationError("length bins need at least two edges");
  for (std::size_t i = 1; i < bin_edges.size(); ++i) {
    if (bin_edges[i] <= bin_edges[i - 1]) throw ValidationError("length bin edges must be strictly increasing");
  }
  check_aligned(instances, reports);
  std::vector<LengthBin> bins;
  for (std::size_t b = 0; b + 1 < bin_edges.size(); ++b) {
    const bool last = b + 2 == bin_edges.size();
    std::vector<UnitSequence> seqs;
    std::vector<ExplanationReport> reps;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const std::size_t len = instances[i].effective_len;
      if (len >= bin_edges[b] && (len < bin_edges[b + 1] || (last && len == bin_edges[b + 1]))) {
        seqs.push_back(instances[i]);
        reps.push_back(reports[i]);
      }
    }
    LengthBin bin{bin_edges[b], bin_edges[b + 1], std::nullopt};
    if (!seqs.empty()) bin.metrics = compute_metrics(seqs, reps, params, config, fraction);
    bins.push_back(std::move(bin));
  }
  return bins;
}

Recovery signature_recovery(std::span<const ExplanationReport> reports,
                            const std::map<std::string, GroundTruth>& truth) {
  Recovery r;
  for (const auto& rep : reports) {
    const auto it = truth.find(rep.id);
    if (it == truth.end()) throw ValidationError("no ground truth for '" + rep.id + "'");
    std::set<std::size_t> want;
    if (rep.spec.index_mode == IndexMode::Positional) {
      want.insert(it->second.positions.begin(), it->second.positions.end());
    } else {
      for (int v : it->second.values) want.insert(static_cast<std::size_t>(v));
    }
    std::size_t hit = 0;
    for (auto i : rep.topk) hit += want.count(i);
    r.precision += rep.topk.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(rep.topk.size());
    r.recall += want.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(want.size());
    ++r.n;
  }
  if (r.n > 0) {
    r.precision /= static_cast<double>(r.n);
    r.recall /= static_cast<double>(r.n);
  }
  return r;
}

}  // namespace xflow
