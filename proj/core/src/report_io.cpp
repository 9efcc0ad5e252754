#include "xflow/report_io.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>

#include "xflow/errors.hpp"
#include "xflow/io.hpp"

namespace xflow {

using nlohmann::json;

json mask_spec_to_json(const MaskSpec& spec) {
  json j{{"level", to_string(spec.level)}, {"index_mode", to_string(spec.index_mode)}};
  j["target"] = spec.global_class ? json{{"global_class", *spec.global_class}} : json("local");
  return j;
}

MaskSpec mask_spec_from_json(const json& j) {
  MaskSpec spec;
  try {
    spec.level = mask_level_from_string(j.at("level").get<std::string>());
    spec.index_mode = index_mode_from_string(j.at("index_mode").get<std::string>());
    const json& target = j.at("target");
    if (target.is_object()) {
      spec.global_class = target.at("global_class").get<std::size_t>();
    } else if (target.get<std::string>() != "local") {
      throw ValidationError("mask spec target must be \"local\" or {\"global_class\": c}");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed mask spec: ") + e.what());
  }
  return spec;
}

json report_to_json(const ExplanationReport& r, const ReportJsonOptions& opts) {
  json j;
  j["id"] = r.id;
  j["method"] = to_string(r.method);
  j["spec"] = mask_spec_to_json(r.spec);
  j["shape"] = r.shape;
  j["effective_len"] = r.effective_len;
  j["predicted_class"] = r.predicted_class;
  if (r.spec.level == MaskLevel::Interaction && !opts.dense) {
    std::vector<std::size_t> keep = r.topk;
    if (!r.shape.empty()) {
      auto wider = select_topk(r.scores, r.spec, opts.sparse_fraction, r.effective_len, r.shape[0]);
      if (wider.size() > keep.size()) keep = std::move(wider);
    }
    json entries = json::array();
    for (auto i : keep) entries.push_back(json::array({i, r.scores.at(i)}));
    j["entries"] = std::move(entries);
  } else {
    j["scores"] = r.scores;
  }
  j["topk"] = r.topk;
  j["trace"] = r.trace;
  j["seconds"] = opts.include_seconds && r.seconds ? json(*r.seconds) : json(nullptr);
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

ExplanationReport report_from_json(const json& j) {
  ExplanationReport r;
  try {
    r.id = j.at("id").get<std::string>();
    r.method = method_from_string(j.at("method").get<std::string>());
    r.spec = mask_spec_from_json(j.at("spec"));
    r.shape = j.at("shape").get<grad::Shape>();
    r.effective_len = j.at("effective_len").get<std::size_t>();
    r.predicted_class = j.at("predicted_class").get<std::size_t>();
    const std::size_t n = grad::shape_numel(r.shape);
    if (j.contains("scores")) {
      r.scores = j.at("scores").get<std::vector<double>>();
      if (r.scores.size() != n) throw ValidationError("report '" + r.id + "': scores do not match shape");
    } else {
      r.scores.assign(n, std::numeric_limits<double>::lowest());
      for (const auto& e : j.at("entries")) {
        const auto idx = e.at(0).get<std::size_t>();
        if (idx >= n) throw ValidationError("report '" + r.id + "': entry index outside shape");
        r.scores[idx] = e.at(1).get<double>();
      }
    }
    r.topk = j.at("topk").get<std::vector<std::size_t>>();
    r.trace = j.at("trace").get<std::vector<double>>();
    if (!j.at("seconds").is_null()) r.seconds = j.at("seconds").get<double>();
    if (j.contains("warnings")) r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string reports_to_jsonl(std::span<const ExplanationReport> reports, const ReportJsonOptions& opts) {
  std::string out;
  for (const auto& r : reports) {
    out += report_to_json(r, opts).dump();
    out += '\n';
  }
  return out;
}

std::vector<ExplanationReport> load_reports(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<ExplanationReport> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(report_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

json metric_to_json(const MetricResult& m) {
  return json{{"method", to_string(m.method)},
              {"level", to_string(m.level)},
              {"index_mode", to_string(m.index_mode)},
              {"budget", m.budget_fraction},
              {"n", m.n},
              {"fid", m.fid},
              {"acc", m.acc},
              {"c_fid", m.c_fid},
              {"c_acc", m.c_acc},
              {"counts", {{"fid", m.fid_hits}, {"acc", m.acc_hits}, {"c_fid", m.c_fid_hits}, {"c_acc", m.c_acc_hits}}},
              {"agreement_variant", {{"c_fid", m.c_fid_agree}, {"c_acc", m.c_acc_agree}}}};
}

json metrics_to_json(std::span<const MetricResult> rows) {
  json arr = json::array();
  for (const auto& m : rows) arr.push_back(metric_to_json(m));
  return json{{"metrics", std::move(arr)}};
}

std::string metrics_table(std::span<const MetricResult> rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-12s %-11s %7s %6s %8s %8s %8s %8s\n", "method", "level", "index", "budget",
                "n", "Fid", "Acc", "C-Fid", "C-Acc");
  out += buf;
  for (const auto& m : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %-12s %-11s %7.3f %6zu %8.4f %8.4f %8.4f %8.4f\n", to_string(m.method),
                  to_string(m.level), to_string(m.index_mode), m.budget_fraction, m.n, m.fid, m.acc, m.c_fid, m.c_acc);
    out += buf;
  }
  return out;
}

json swap_to_json(const SwapResult& result, double fraction) {
  json models = json::array();
  for (const auto& m : result.per_model) {
    models.push_back({{"name", m.name}, {"transformed", m.transformed}, {"n", m.n}, {"rate", m.rate}});
  }
  json pairs = json::array();
  for (const auto& p : result.pairs) pairs.push_back(json::array({p.recipient, p.donor, p.donor_class}));
  return json{{"fraction", fraction}, {"pairs", result.pairs.size()}, {"models", models}, {"pair_list", pairs}};
}

json train_log_to_json(const TrainResult& result) {
  json epochs = json::array();
  for (const auto& e : result.log) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc}});
  }
  return json{{"epochs", epochs}, {"best_epoch", result.best_epoch}, {"best_val_acc", result.best_val_acc}};
}

json recovery_to_json(const Recovery& r) {
  return json{{"precision", r.precision}, {"recall", r.recall}, {"n", r.n}};
}

json splits_to_json(const Splits& s) {
  return json{{"train", s.train}, {"val", s.val}, {"test", s.test}};
}

Splits splits_from_json(const json& j) {
  Splits s;
  try {
    s.train = j.at("train").get<std::vector<std::size_t>>();
    s.val = j.at("val").get<std::vector<std::size_t>>();
    s.test = j.at("test").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed split file: ") + e.what());
  }
  return s;
}

}  // namespace xflow
