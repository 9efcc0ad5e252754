#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "run_config.hpp"
#include "xflow/baselines.hpp"
#include "xflow/checkpoint.hpp"
#include "xflow/errors.hpp"
#include "xflow/evaluation.hpp"
#include "xflow/io.hpp"
#include "xflow/log.hpp"
#include "xflow/report_io.hpp"
#include "xflow/svg.hpp"

namespace xflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool timing = false;

  std::string out;
  std::string data;
  std::string labels;
  std::string input;
  std::vector<std::string> checkpoints;
  std::string reports;
  std::string truth;
  std::string subset = "all";
  std::optional<std::size_t> max_hops;
  std::optional<std::string> level;
  std::optional<std::string> index_mode;
  std::optional<std::string> objective;
  std::optional<std::string> method;
  std::optional<double> fraction;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> class_id;
  std::vector<double> budgets;
  std::vector<std::size_t> bins;
  bool svg = false;
  bool dense = false;
};

struct Context {
  Options opt;
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::ostream& out;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first failure by
// index is rethrown so error reporting does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

fs::path labels_path(const Options& o) {
  if (!o.labels.empty()) return o.labels;
  return fs::path(o.data).parent_path() / "labels.json";
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ValidationError("cannot create output directory " + dir.string());
}

LabeledDataset load_dataset(const Options& o) {
  if (o.data.empty()) throw ValidationError("--data is required");
  return load_jsonl(o.data, labels_path(o));
}

Splits load_split(const fs::path& checkpoint_dir) {
  const fs::path p = checkpoint_dir / "split.json";
  try {
    return splits_from_json(json::parse(read_file(p)));
  } catch (const json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

std::vector<UnitSequence> select_subset(const LabeledDataset& ds, const std::string& subset,
                                        const fs::path& checkpoint_dir) {
  if (subset == "all") return ds.sequences;
  const Splits s = load_split(checkpoint_dir);
  const std::vector<std::size_t>* idx = nullptr;
  if (subset == "train") idx = &s.train;
  if (subset == "val") idx = &s.val;
  if (subset == "test") idx = &s.test;
  if (idx == nullptr) throw ValidationError("--subset must be all|train|val|test");
  for (auto i : *idx) {
    if (i >= ds.sequences.size()) throw ValidationError("split index outside the dataset; wrong --data for this checkpoint?");
  }
  return ds.subset(*idx);
}

void check_compatible(const LabeledDataset& ds, const ClassifierConfig& config) {
  if (const auto k = ds.kind(); k && *k != config.kind) {
    throw ValidationError(std::string("dataset is ") + to_string(*k) + " but the model expects " +
                          to_string(config.kind));
  }
  if (ds.num_classes() != config.num_classes) {
    throw ValidationError("dataset has " + std::to_string(ds.num_classes()) + " classes, model has " +
                          std::to_string(config.num_classes));
  }
}

std::string file_stem_for(const std::string& id) {
  std::string s = id;
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

// ------------------------------------------------------------------ synth

int cmd_synth(Context& ctx) {
  const SyntheticSpec spec = synthetic_spec(ctx.cfg);
  const LabeledDataset ds = generate_synthetic(spec);
  const fs::path dir = ctx.opt.out;
  ensure_dir(dir);
  write_file(dir / "dataset.jsonl", to_jsonl(ds));
  write_file(dir / "labels.json", labels_json(ds));
  write_file(dir / "truth.json", truth_json(ds));
  ctx.out << "N=" << ds.sequences.size() << " C=" << ds.num_classes() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ ingest

int cmd_ingest(Context& ctx) {
  const std::size_t max_hops = ctx.opt.max_hops.value_or(ctx.cfg.data.max_hops);
  const LabeledDataset ds = ingest_traceroute(ctx.opt.input, max_hops);
  const fs::path dir = ctx.opt.out;
  ensure_dir(dir);
  write_file(dir / "dataset.jsonl", to_jsonl(ds));
  write_file(dir / "labels.json", labels_json(ds));
  ctx.out << "N=" << ds.sequences.size() << " C=" << ds.num_classes() << " skipped=" << ds.skipped << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train

int cmd_train(Context& ctx) {
  LabeledDataset ds = load_dataset(ctx.opt);
  const auto kind = ds.kind();
  if (!kind) throw ValidationError("dataset is empty");
  ClassifierConfig cc = config_from_json(ctx.cfg.model.classifier);
  const json& mc = ctx.cfg.model.classifier;
  if (mc.contains("kind") && cc.kind != *kind) {
    throw ValidationError(std::string("model kind ") + to_string(cc.kind) + " does not match " + to_string(*kind) +
                          " data");
  }
  if (mc.contains("num_classes") && cc.num_classes != ds.num_classes()) {
    throw ValidationError("model num_classes does not match the labels file");
  }
  cc.kind = *kind;
  cc.num_classes = ds.num_classes();
  if (!mc.contains("seed")) cc.seed = ctx.seed;
  cc.validate();

  ds = split_dataset(ds, ctx.cfg.data.split, ctx.seed);
  TrainHyper hyper = ctx.cfg.model.train;
  hyper.seed = ctx.seed;
  const TrainResult result = train(ds, cc, hyper);

  const fs::path dir = ctx.opt.out;
  ensure_dir(dir);
  save_checkpoint(dir, result.params, cc);
  write_file(dir / "split.json", splits_to_json(ds.splits).dump() + "\n");
  write_file(dir / "train_log.json", train_log_to_json(result).dump(2) + "\n");

  const auto test = ds.subset(ds.splits.test);
  ctx.out << "best_epoch=" << result.best_epoch << " val_acc=" << result.best_val_acc;
  if (!test.empty()) ctx.out << " test_acc=" << accuracy(test, result.params, cc);
  ctx.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ explain

MaskSpec make_spec(const Context& ctx, const ClassifierConfig& config, bool global) {
  MaskSpec spec;
  const auto& ex = ctx.cfg.explainer;
  spec.level = ctx.opt.level ? mask_level_from_string(*ctx.opt.level) : ex.level;
  if (ctx.opt.index_mode) {
    spec.index_mode = index_mode_from_string(*ctx.opt.index_mode);
  } else if (ex.index_mode) {
    spec.index_mode = *ex.index_mode;
  } else {
    spec.index_mode = global && config.kind == UnitKind::Bytes ? IndexMode::Value : IndexMode::Positional;
  }
  return spec;
}

ExplainerConfig make_xcfg(const Context& ctx) {
  ExplainerConfig x = ctx.cfg.explainer.config;
  if (ctx.opt.objective) x.objective = objective_from_string(*ctx.opt.objective);
  if (ctx.opt.fraction) x.topk_fraction = *ctx.opt.fraction;
  if (ctx.opt.steps) x.steps = *ctx.opt.steps;
  x.seed = ctx.seed;
  x.validate();
  return x;
}

BaselineOptions baseline_options(const Context& ctx, double fraction, const std::string& id) {
  BaselineOptions b;
  b.seed = job_seed(ctx.seed, id);
  b.topk_fraction = fraction;
  b.lime_samples = ctx.cfg.eval.lime_samples;
  b.shap_permutations = ctx.cfg.eval.shap_permutations;
  return b;
}

std::vector<ExplanationReport> explain_local(const Context& ctx, const std::vector<UnitSequence>& seqs,
                                             const Checkpoint& ck, const MaskSpec& spec, const ExplainerConfig& x,
                                             Method method) {
  std::vector<ExplanationReport> reports(seqs.size());
  parallel_for(seqs.size(), ctx.opt.jobs, [&](std::size_t i) {
    if (method == Method::MaskOptim) {
      ExplainerConfig xi = x;
      xi.seed = job_seed(ctx.seed, seqs[i].id);
      reports[i] = optimize_mask(seqs[i], ck.params, ck.config, spec, xi);
    } else {
      reports[i] = attribute(method, seqs[i], ck.params, ck.config, spec,
                             baseline_options(ctx, x.topk_fraction, seqs[i].id));
    }
  });
  return reports;
}

int cmd_explain(Context& ctx) {
  const Checkpoint ck = load_checkpoint(ctx.opt.checkpoints.at(0));
  const LabeledDataset ds = load_dataset(ctx.opt);
  check_compatible(ds, ck.config);
  const auto seqs = select_subset(ds, ctx.opt.subset, ctx.opt.checkpoints[0]);
  const ExplainerConfig x = make_xcfg(ctx);
  const bool global = x.objective == Objective::Global;
  MaskSpec spec = make_spec(ctx, ck.config, global);
  validate_spec(spec, ck.config);
  const Method method = ctx.opt.method ? method_from_string(*ctx.opt.method) : Method::MaskOptim;
  if (global && method != Method::MaskOptim) throw ValidationError("global explanations use the mask method");

  std::vector<ExplanationReport> reports;
  if (global) {
    const auto preds = predict_batch(seqs, ck.params, ck.config);
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < ck.config.num_classes; ++c) {
      if (ctx.opt.class_id && *ctx.opt.class_id != c) continue;
      classes.push_back(c);
    }
    if (ctx.opt.class_id && classes.empty()) throw ValidationError("--class outside the model's classes");
    std::vector<std::vector<UnitSequence>> sets(classes.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      for (std::size_t k = 0; k < classes.size(); ++k) {
        if (preds[i].predicted_class == classes[k]) sets[k].push_back(seqs[i]);
      }
    }
    std::vector<std::optional<ExplanationReport>> out(classes.size());
    parallel_for(classes.size(), ctx.opt.jobs, [&](std::size_t k) {
      if (sets[k].empty()) return;
      MaskSpec s = spec;
      s.global_class = classes[k];
      out[k] = optimize_mask(sets[k], ck.params, ck.config, s, x);
      out[k]->id = "global-" + ds.labels.at(classes[k]);
    });
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (out[k]) {
        reports.push_back(std::move(*out[k]));
      } else {
        log::info("no instance predicted as ", ds.labels.at(classes[k]), "; skipping its global explanation");
      }
    }
    if (reports.empty()) throw ValidationError("no class has predicted instances to explain");
  } else {
    reports = explain_local(ctx, seqs, ck, spec, x, method);
  }

  const fs::path dir = ctx.opt.out;
  ensure_dir(dir);
  ReportJsonOptions ro;
  ro.dense = ctx.opt.dense;
  ro.include_seconds = ctx.opt.timing;
  write_file(dir / "reports.jsonl", reports_to_jsonl(reports, ro));
  if (ctx.opt.svg) {
    ensure_dir(dir / "svg");
    std::map<std::string, const UnitSequence*> by_id;
    for (const auto& s : seqs) by_id[s.id] = &s;
    for (const auto& r : reports) {
      const auto it = by_id.find(r.id);
      write_file(dir / "svg" / (file_stem_for(r.id) + ".svg"),
                 report_svg(r, it == by_id.end() ? nullptr : it->second));
    }
  }
  double seconds = 0;
  for (const auto& r : reports) seconds += r.seconds.value_or(0.0);
  ctx.out << "reports=" << reports.size() << " method=" << to_string(method) << " level=" << to_string(spec.level)
          << " index_mode=" << to_string(spec.index_mode) << "\n";
  ctx.out << "seconds_per_report=" << (reports.empty() ? 0.0 : seconds / static_cast<double>(reports.size())) << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ eval / swap

// Reorders reports to follow the dataset and returns the matching sequences.
std::vector<UnitSequence> align_to_reports(const LabeledDataset& ds, const std::vector<ExplanationReport>& reports) {
  std::map<std::string, const UnitSequence*> by_id;
  for (const auto& s : ds.sequences) by_id[s.id] = &s;
  std::vector<UnitSequence> seqs;
  for (const auto& r : reports) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw ValidationError("report '" + r.id + "' has no matching instance in the dataset");
    seqs.push_back(*it->second);
  }
  return seqs;
}

int cmd_eval(Context& ctx) {
  const Checkpoint ck = load_checkpoint(ctx.opt.checkpoints.at(0));
  const LabeledDataset ds = load_dataset(ctx.opt);
  check_compatible(ds, ck.config);
  const std::vector<double> budgets = ctx.opt.budgets.empty() ? ctx.cfg.eval.budgets : ctx.opt.budgets;
  for (double b : budgets) {
    if (!(b > 0 && b <= 1)) throw ValidationError("--budgets entries must be in (0, 1]");
  }

  std::vector<ExplanationReport> reports;
  std::vector<UnitSequence> seqs;
  double measured = -1.0;
  if (!ctx.opt.reports.empty()) {
    if (ctx.opt.method) throw ValidationError("use either --reports or --method, not both");
    reports = load_reports(ctx.opt.reports);
    if (reports.empty()) throw ValidationError("reports file is empty");
  } else if (ctx.opt.method) {
    const Method method = method_from_string(*ctx.opt.method);
    seqs = select_subset(ds, ctx.opt.subset, ctx.opt.checkpoints[0]);
    const ExplainerConfig x = make_xcfg(ctx);
    if (x.objective == Objective::Global) throw ValidationError("--method evaluation covers local explanations");
    const MaskSpec spec = make_spec(ctx, ck.config, false);
    validate_spec(spec, ck.config);
    const auto t0 = std::chrono::steady_clock::now();
    reports = explain_local(ctx, seqs, ck, spec, x, method);
    measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } else {
    throw ValidationError("eval needs --reports FILE or --method NAME");
  }

  const bool global = reports.front().spec.is_global();
  for (const auto& r : reports) {
    if (r.spec.is_global() != global) throw ValidationError("reports mix local and global explanations");
  }
  std::vector<MetricResult> rows;
  json extra = json::object();
  if (global) {
    const auto test = select_subset(ds, ctx.opt.subset, ctx.opt.checkpoints[0]);
    for (const auto& r : reports) {
      for (double b : budgets) {
        rows.push_back(evaluate_global(test, r, ck.params, ck.config, b));
      }
    }
  } else {
    if (seqs.empty()) seqs = align_to_reports(ds, reports);
    std::vector<MetricResult> per(budgets.size());
    parallel_for(budgets.size(), ctx.opt.jobs,
                 [&](std::size_t i) { per[i] = compute_metrics(seqs, reports, ck.params, ck.config, budgets[i]); });
    rows = per;
    if (!ctx.opt.truth.empty()) {
      extra["recovery"] = recovery_to_json(signature_recovery(reports, load_truth(ctx.opt.truth)));
    }
    const auto bins = ctx.opt.bins.empty() ? ctx.cfg.eval.length_bins : ctx.opt.bins;
    if (!bins.empty()) {
      json arr = json::array();
      for (double b : budgets) {
        for (const auto& bin : length_sensitivity(seqs, reports, ck.params, ck.config, b, bins)) {
          arr.push_back({{"lo", bin.lo}, {"hi", bin.hi}, {"budget", b},
                         {"metrics", bin.metrics ? metric_to_json(*bin.metrics) : json(nullptr)}});
        }
      }
      extra["length_bins"] = arr;
    }
  }

  double report_seconds = 0.0;
  std::size_t timed = 0;
  for (const auto& r : reports) {
    if (r.seconds) {
      report_seconds += *r.seconds;
      ++timed;
    }
  }
  std::optional<double> per_instance;
  if (measured >= 0) {
    per_instance = measured / static_cast<double>(reports.size());
  } else if (timed > 0) {
    per_instance = report_seconds / static_cast<double>(timed);
  }

  json doc = metrics_to_json(rows);
  for (auto& [k, v] : extra.items()) doc[k] = v;
  doc["seconds_per_instance"] = ctx.opt.timing && per_instance ? json(*per_instance) : json(nullptr);
  const std::string table = metrics_table(rows);
  if (!ctx.opt.out.empty()) {
    const fs::path dir = ctx.opt.out;
    ensure_dir(dir);
    write_file(dir / "metrics.json", doc.dump(2) + "\n");
    write_file(dir / "metrics.txt", table);
  }
  ctx.out << table;
  if (extra.contains("recovery")) ctx.out << "recovery " << extra["recovery"].dump() << "\n";
  if (per_instance) {
    ctx.out << "seconds_per_instance=" << *per_instance << "\n";
  } else {
    ctx.out << "seconds_per_instance=n/a (reports written without --timing)\n";
  }
  return kExitOk;
}

int cmd_swap(Context& ctx) {
  const double fraction = ctx.opt.fraction.value_or(ctx.cfg.eval.swap_fraction);
  if (!(fraction > 0 && fraction <= 1)) throw ValidationError("--fraction must be in (0, 1]");
  const LabeledDataset ds = load_dataset(ctx.opt);
  if (ds.kind() != UnitKind::Bytes) throw ValidationError("byte swap requires a bytes dataset");
  if (ctx.opt.reports.empty()) throw ValidationError("swap needs --reports FILE");
  const auto reports = load_reports(ctx.opt.reports);
  const auto seqs = align_to_reports(ds, reports);

  std::vector<Checkpoint> cks;
  for (const auto& p : ctx.opt.checkpoints) {
    cks.push_back(load_checkpoint(p));
    check_compatible(ds, cks.back().config);
  }
  std::vector<SwapModel> models;
  for (std::size_t i = 0; i < cks.size(); ++i) {
    models.push_back({fs::path(ctx.opt.checkpoints[i]).lexically_normal().string(), &cks[i].params, cks[i].config});
  }
  const SwapResult result = byte_swap_experiment(seqs, reports, models, fraction, ctx.seed);
  if (!ctx.opt.out.empty()) {
    const fs::path dir = ctx.opt.out;
    ensure_dir(dir);
    write_file(dir / "swap.json", swap_to_json(result, fraction).dump(2) + "\n");
  }
  for (const auto& m : result.per_model) {
    ctx.out << m.name << " rate=" << m.rate << " (" << m.transformed << "/" << m.n << ")\n";
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explanations for traffic classifiers: synthesize data, train, explain, evaluate"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config_path, "Run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", opt.seed, "Global seed (overrides config)");
  app.add_option("--jobs", opt.jobs, "Parallel explanation jobs")->check(CLI::PositiveNumber);
  app.add_flag("--timing", opt.timing, "Write wall-clock seconds into output files");
  app.fallthrough();

  auto* synth = app.add_subcommand("synth", "Generate a planted-signature dataset");
  synth->add_option("--out", opt.out, "Output directory")->required();

  auto* ingest = app.add_subcommand("ingest", "Convert traceroute records to an RTT dataset");
  ingest->add_option("--input", opt.input, "Traceroute JSON array")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", opt.out, "Output directory")->required();
  ingest->add_option("--max-hops", opt.max_hops, "Sequence length")->check(CLI::PositiveNumber);

  auto* trn = app.add_subcommand("train", "Train a classifier");
  trn->add_option("--data", opt.data, "Dataset JSONL")->required();
  trn->add_option("--labels", opt.labels, "Labels JSON (default: labels.json next to --data)");
  trn->add_option("--out", opt.out, "Checkpoint directory")->required();

  auto* explain = app.add_subcommand("explain", "Explain predictions");
  auto* eval = app.add_subcommand("eval", "Score explanations with the perturbation metrics");
  auto* swap = app.add_subcommand("swap", "Byte-swap transfer experiment");
  for (auto* sc : {explain, eval, swap}) {
    sc->add_option("--data", opt.data, "Dataset JSONL")->required();
    sc->add_option("--labels", opt.labels, "Labels JSON (default: labels.json next to --data)");
  }
  explain->add_option("--checkpoint", opt.checkpoints, "Checkpoint directory")->required()->expected(1);
  eval->add_option("--checkpoint", opt.checkpoints, "Checkpoint directory")->required()->expected(1);
  swap->add_option("--checkpoint", opt.checkpoints, "Checkpoint directory (repeatable)")->required();
  explain->add_option("--out", opt.out, "Output directory")->required();
  eval->add_option("--out", opt.out, "Output directory for metrics.json / metrics.txt");
  swap->add_option("--out", opt.out, "Output directory for swap.json");
  for (auto* sc : {explain, eval}) {
    sc->add_option("--subset", opt.subset, "Instances: all|train|val|test (split stored with the checkpoint)")
        ->check(CLI::IsMember({"all", "train", "val", "test"}));
    sc->add_option("--level", opt.level, "unit|interaction")->check(CLI::IsMember({"unit", "interaction"}));
    sc->add_option("--index-mode", opt.index_mode, "positional|value")
        ->check(CLI::IsMember({"positional", "value"}));
    sc->add_option("--objective", opt.objective, "confidence|label|global")
        ->check(CLI::IsMember({"confidence", "label", "global"}));
    sc->add_option("--method", opt.method, "mask|random|saliency|attention|lime|shap")
        ->check(CLI::IsMember({"mask", "random", "saliency", "attention", "lime", "shap"}));
    sc->add_option("--steps", opt.steps, "Mask optimization steps")->check(CLI::PositiveNumber);
  }
  explain->add_option("--fraction", opt.fraction, "Top-K fraction");
  explain->add_option("--class", opt.class_id, "Only this class (global objective)");
  explain->add_flag("--svg", opt.svg, "Write one SVG heatmap per report");
  explain->add_flag("--dense", opt.dense, "Write full interaction score matrices");
  eval->add_option("--reports", opt.reports, "Reports JSONL from explain");
  eval->add_option("--budgets", opt.budgets, "Top-K fractions, comma separated")->delimiter(',');
  eval->add_option("--truth", opt.truth, "Ground-truth JSON for signature recovery");
  eval->add_option("--bins", opt.bins, "Length bin edges, comma separated")->delimiter(',');
  swap->add_option("--reports", opt.reports, "Reports JSONL from explain")->required();
  swap->add_option("--fraction", opt.fraction, "Share of donor units to swap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    Context ctx{opt, {}, 0, out};
    if (!opt.config_path.empty()) ctx.cfg = load_run_config(opt.config_path);
    const bool needs_seed = !ingest->parsed();
    const auto seed = opt.seed ? opt.seed : ctx.cfg.seed;
    if (needs_seed && !seed) throw ValidationError("a seed is required (config \"seed\" or --seed)");
    ctx.seed = seed.value_or(0);
    ctx.cfg.seed = ctx.seed;

    if (synth->parsed()) return cmd_synth(ctx);
    if (ingest->parsed()) return cmd_ingest(ctx);
    if (trn->parsed()) return cmd_train(ctx);
    if (explain->parsed()) return cmd_explain(ctx);
    if (eval->parsed()) return cmd_eval(ctx);
    if (swap->parsed()) return cmd_swap(ctx);
    return kExitUsage;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace xflow::cli
