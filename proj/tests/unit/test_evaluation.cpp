#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_util.hpp"
#include "xflow/baselines.hpp"
#include "xflow/errors.hpp"
#include "xflow/evaluation.hpp"

namespace xflow {
namespace {

const MaskSpec kUnit{};
const MaskSpec kValue{MaskLevel::Unit, IndexMode::Value, {}};
const MaskSpec kPairs{MaskLevel::Interaction, IndexMode::Positional, {}};

// Pad substitution written out by hand: units outside `kept` become the pad
// token with presence cleared.
UnitSequence hand_substitute(const UnitSequence& seq, const std::vector<std::size_t>& kept) {
  UnitSequence out = seq;
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (std::find(kept.begin(), kept.end(), j) == kept.end()) {
      out.units[j] = kPadToken;
      out.present[j] = 0;
    }
  }
  return out;
}

ExplanationReport unit_report(const UnitSequence& seq, std::size_t side, std::vector<std::size_t> ranked) {
  ExplanationReport r;
  r.id = seq.id;
  r.spec = kUnit;
  r.shape = {side};
  r.effective_len = seq.effective_len;
  r.scores.assign(side, 0.0);
  double s = 1.0;
  for (std::size_t j : ranked) {
    r.scores[j] = s;
    s /= 2;
  }
  return r;
}

TEST(Perturb, SubstitutionExamples) {
  const auto seq = test::byte_seq("s", {7, 8, 9});
  const std::size_t one[] = {1};
  const auto kept = perturb_keep_topk(seq, one, kUnit);
  EXPECT_EQ(kept.units, (std::vector<double>{256, 8, 256}));
  EXPECT_EQ(kept.present, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(perturb_remove_topk(seq, one, kUnit).units, (std::vector<double>{7, 256, 9}));
  const std::size_t all[] = {0, 1, 2};
  EXPECT_EQ(perturb_keep_topk(seq, all, kUnit), seq);
  const auto gone = perturb_remove_topk(seq, all, kUnit);
  EXPECT_EQ(gone.units, (std::vector<double>{256, 256, 256}));

  const auto v = test::byte_seq("v", {7, 8, 7});
  const std::size_t seven[] = {7};
  EXPECT_EQ(perturb_keep_topk(v, seven, kValue).units, (std::vector<double>{7, 256, 7}));
  EXPECT_EQ(perturb_remove_topk(v, seven, kValue).units, (std::vector<double>{256, 8, 256}));

  const auto rtt = make_sequence("r", UnitKind::Rtt, {5.0, 9.0, 12.0}, 0);
  const auto r = perturb_remove_topk(rtt, one, kUnit);
  EXPECT_EQ(r.units, (std::vector<double>{5.0, 0.0, 12.0}));
  EXPECT_EQ(r.present, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Perturb, KeepAndRemoveAreComplementary) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 30;
    std::vector<int> tokens(n);
    for (auto& t : tokens) t = static_cast<int>(rng() % 256);
    const auto seq = test::byte_seq("s", tokens);
    std::vector<std::size_t> topk;
    for (std::size_t j = 0; j < n; ++j) {
      if (rng() % 3 == 0) topk.push_back(j);
    }
    const auto keep = perturb_keep_topk(seq, topk, kUnit);
    const auto remove = perturb_remove_topk(seq, topk, kUnit);
    for (std::size_t j = 0; j < n; ++j) {
      const bool kept_changed = keep.units[j] != seq.units[j];
      const bool removed_changed = remove.units[j] != seq.units[j];
      ASSERT_NE(kept_changed, removed_changed) << j;
    }
    // Applying both substitution sets pads everything.
    const auto both = perturb_remove_topk(keep, topk, kUnit);
    for (std::size_t j = 0; j < n; ++j) {
      ASSERT_EQ(both.units[j], kPadToken);
      ASSERT_EQ(both.present[j], 0);
    }
  }
}

TEST(Perturb, InteractionMasks) {
  const auto config = test::tiny_config(UnitKind::Bytes, 3);
  const std::size_t pairs[] = {1, 5};
  const auto keep = interaction_keep_mask(pairs, kPairs, config);
  const auto remove = interaction_remove_mask(pairs, kPairs, config);
  ASSERT_EQ(keep.theta.shape(), (grad::Shape{3, 3}));
  for (std::size_t i = 0; i < 9; ++i) {
    const bool in = i == 1 || i == 5;
    EXPECT_EQ(keep.theta[i], in ? kKeptPairTheta : kDroppedPairTheta);
    EXPECT_EQ(remove.theta[i], in ? kDroppedPairTheta : kKeptPairTheta);
  }
}

// Three instances of the planted model: one attribution finds the signature,
// one misses it, and one instance carries a wrong label. Expected counts come
// from predictions on hand-built keep/remove sequences.
TEST(Metrics, ThreeInstanceHandFixture) {
  const auto& t = test::planted_model();
  std::vector<UnitSequence> inst;
  for (std::size_t k = 0; k < 3; ++k) inst.push_back(t.ds.sequences[t.ds.splits.test[k]]);
  inst[2].label_id = (inst[2].label_id + 1) % 3;
  const std::size_t p0 = t.ds.truth.at(inst[0].id).positions.front();
  const std::size_t p1 = t.ds.truth.at(inst[1].id).positions.front();
  const std::size_t p2 = t.ds.truth.at(inst[2].id).positions.front();
  const std::size_t miss = (p1 + 5) % 16;
  const std::vector<std::vector<std::size_t>> top{{p0, (p0 + 1) % 16}, {miss, (miss + 1) % 16}, {p2, (p2 + 3) % 16}};
  std::vector<ExplanationReport> reports;
  for (std::size_t k = 0; k < 3; ++k) reports.push_back(unit_report(inst[k], 16, top[k]));

  std::size_t fid = 0, acc = 0, cfid = 0, cacc = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto orig = predict(inst[k], t.params, t.config).predicted_class;
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < 16; ++j) {
      if (std::find(top[k].begin(), top[k].end(), j) == top[k].end()) rest.push_back(j);
    }
    const auto kept = predict(hand_substitute(inst[k], top[k]), t.params, t.config).predicted_class;
    const auto removed = predict(hand_substitute(inst[k], rest), t.params, t.config).predicted_class;
    const auto label = static_cast<std::size_t>(inst[k].label_id);
    fid += kept == orig;
    acc += kept == label;
    cfid += removed != orig;
    cacc += removed != label;
  }

  const auto m = compute_metrics(inst, reports, t.params, t.config, 2.0 / 16.0);
  EXPECT_EQ(m.n, 3u);
  EXPECT_EQ(m.fid_hits, fid);
  EXPECT_EQ(m.acc_hits, acc);
  EXPECT_EQ(m.c_fid_hits, cfid);
  EXPECT_EQ(m.c_acc_hits, cacc);
  EXPECT_DOUBLE_EQ(m.fid, fid / 3.0);
  EXPECT_DOUBLE_EQ(m.acc, acc / 3.0);
  EXPECT_DOUBLE_EQ(m.c_fid, cfid / 3.0);
  EXPECT_DOUBLE_EQ(m.c_acc, cacc / 3.0);
  EXPECT_DOUBLE_EQ(m.c_fid_agree, 1.0 - cfid / 3.0);
  EXPECT_EQ(m.budget_fraction, 2.0 / 16.0);
}

TEST(Metrics, FullBudgetAndOrderInvariance) {
  const auto& t = test::planted_model();
  std::vector<UnitSequence> inst;
  std::vector<ExplanationReport> reports;
  std::size_t changed_when_padded = 0;
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& seq = t.ds.sequences[t.ds.splits.test[k]];
    inst.push_back(seq);
    reports.push_back(random_attrib(seq, t.config, kUnit, k));
    reports.back().id = seq.id;
    reports.back().effective_len = seq.effective_len;
    reports.back().shape = {16};
    changed_when_padded += predict(hand_substitute(seq, {}), t.params, t.config).predicted_class !=
                           predict(seq, t.params, t.config).predicted_class;
  }
  const auto full = compute_metrics(inst, reports, t.params, t.config, 1.0);
  EXPECT_EQ(full.fid, 1.0);
  EXPECT_DOUBLE_EQ(full.acc, accuracy(inst, t.params, t.config));
  EXPECT_DOUBLE_EQ(full.c_fid, static_cast<double>(changed_when_padded) / 10.0);

  const auto a = compute_metrics(inst, reports, t.params, t.config, 0.125);
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), std::mt19937_64(3));
  std::vector<UnitSequence> inst2;
  std::vector<ExplanationReport> rep2;
  for (std::size_t k : order) {
    inst2.push_back(inst[k]);
    rep2.push_back(reports[k]);
  }
  const auto b = compute_metrics(inst2, rep2, t.params, t.config, 0.125);
  EXPECT_EQ(a.fid_hits, b.fid_hits);
  EXPECT_EQ(a.acc_hits, b.acc_hits);
  EXPECT_EQ(a.c_fid_hits, b.c_fid_hits);
  EXPECT_EQ(a.c_acc_hits, b.c_acc_hits);

  EXPECT_THROW(compute_metrics({}, {}, t.params, t.config, 0.1), ValidationError);
  rep2[0].id = "other";
  EXPECT_THROW(compute_metrics(inst2, rep2, t.params, t.config, 0.1), ValidationError);
}

TEST(Metrics, InsensitiveModelNeverFlips) {
  const auto config = test::tiny_config(UnitKind::Bytes, 8, 3);
  auto params = init_params(config);
  for (auto& w : params.at("head.w").values()) w = 0.0f;
  params.at("head.b")[1] = 1.0f;
  std::vector<UnitSequence> inst{test::byte_seq("a", {1, 2, 3}, 1), test::byte_seq("b", {4, 5, 6, 7}, 0)};
  std::vector<ExplanationReport> reports;
  for (std::size_t k = 0; k < inst.size(); ++k) {
    auto r = random_attrib(inst[k], config, kUnit, k);
    r.id = inst[k].id;
    r.effective_len = inst[k].effective_len;
    r.shape = {8};
    reports.push_back(r);
  }
  const auto m = compute_metrics(inst, reports, params, config, 0.3);
  EXPECT_EQ(m.c_fid, 0.0);
  EXPECT_EQ(m.fid, 1.0);
  EXPECT_EQ(m.acc, 0.5);
  EXPECT_EQ(m.c_acc, 0.5);
}

TEST(Metrics, GlobalSingleInstanceMatchesLocal) {
  const auto& t = test::planted_model();
  const auto& seq = t.ds.sequences[t.ds.splits.test.front()];
  const auto cls = predict(seq, t.params, t.config).predicted_class;
  auto local = unit_report(seq, 16, {3, 4});
  local.spec.global_class = cls;
  const std::vector<UnitSequence> one{seq};
  const auto g = evaluate_global(one, local, t.params, t.config, 0.125);
  auto plain = local;
  plain.spec.global_class.reset();
  const std::vector<ExplanationReport> reps{plain};
  const auto l = compute_metrics(one, reps, t.params, t.config, 0.125);
  EXPECT_EQ(g.fid_hits, l.fid_hits);
  EXPECT_EQ(g.c_fid_hits, l.c_fid_hits);
  EXPECT_EQ(g.n, 1u);
  local.spec.global_class = (cls + 1) % 3;
  EXPECT_THROW(evaluate_global(one, local, t.params, t.config, 0.125), ValidationError);
}

TEST(LengthSensitivity, BinsPartitionInstances) {
  const auto& t = test::planted_model();
  std::vector<UnitSequence> inst;
  std::vector<ExplanationReport> reports;
  for (std::size_t k = 0; k < 6; ++k) {
    auto seq = t.ds.sequences[t.ds.splits.test[k]];
    inst.push_back(seq);
    reports.push_back(unit_report(seq, 16, {0}));
  }
  const auto one = length_sensitivity(inst, reports, t.params, t.config, 0.1, {0, 100});
  ASSERT_EQ(one.size(), 1u);
  const auto all = compute_metrics(inst, reports, t.params, t.config, 0.1);
  EXPECT_EQ(one[0].metrics->n, all.n);
  EXPECT_EQ(one[0].metrics->fid_hits, all.fid_hits);

  std::vector<UnitSequence> tens;
  std::vector<ExplanationReport> trep;
  for (int k = 0; k < 3; ++k) {
    tens.push_back(test::byte_seq("t" + std::to_string(k), std::vector<int>(10, k + 1)));
    trep.push_back(unit_report(tens.back(), 16, {0}));
  }
  const auto bins = length_sensitivity(tens, trep, t.params, t.config, 0.1, {0, 5, 20});
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_FALSE(bins[0].metrics.has_value());
  ASSERT_TRUE(bins[1].metrics.has_value());
  EXPECT_EQ(bins[1].metrics->n, 3u);

  std::vector<UnitSequence> mixed;
  std::vector<ExplanationReport> mrep;
  for (std::size_t len = 1; len <= 16; ++len) {
    mixed.push_back(test::byte_seq("m" + std::to_string(len), std::vector<int>(len, 3)));
    mrep.push_back(unit_report(mixed.back(), 16, {0}));
  }
  std::size_t total = 0;
  for (const auto& b : length_sensitivity(mixed, mrep, t.params, t.config, 0.1, {0, 4, 8, 12, 16})) {
    if (b.metrics) total += b.metrics->n;
  }
  EXPECT_EQ(total, mixed.size());
  EXPECT_THROW(length_sensitivity(mixed, mrep, t.params, t.config, 0.1, {4, 4}), ValidationError);
}

TEST(Recovery, SetArithmetic) {
  auto report = [](std::string id, std::vector<std::size_t> topk) {
    ExplanationReport r;
    r.id = std::move(id);
    r.topk = std::move(topk);
    return r;
  };
  std::map<std::string, GroundTruth> truth{{"a", {{2, 5}, {}}}, {"b", {{1}, {}}}};
  const std::vector<ExplanationReport> exact{report("a", {5, 2}), report("b", {1})};
  EXPECT_EQ(signature_recovery(exact, truth).precision, 1.0);
  EXPECT_EQ(signature_recovery(exact, truth).recall, 1.0);
  const std::vector<ExplanationReport> disjoint{report("a", {0, 1}), report("b", {7})};
  EXPECT_EQ(signature_recovery(disjoint, truth).precision, 0.0);
  EXPECT_EQ(signature_recovery(disjoint, truth).recall, 0.0);
  const std::vector<ExplanationReport> wide{report("a", {2, 5, 6, 7})};
  EXPECT_EQ(signature_recovery(wide, truth).precision, 0.5);
  EXPECT_EQ(signature_recovery(wide, truth).recall, 1.0);
  const std::vector<ExplanationReport> mixed{report("a", {2, 9}), report("b", {1})};
  EXPECT_DOUBLE_EQ(signature_recovery(mixed, truth).precision, (0.5 + 1.0) / 2);
  EXPECT_DOUBLE_EQ(signature_recovery(mixed, truth).recall, (0.5 + 1.0) / 2);
  EXPECT_THROW(signature_recovery(std::vector<ExplanationReport>{report("zz", {1})}, truth), ValidationError);
}

TEST(Swap, PairsNeverShareAClass) {
  const auto& t = test::planted_model();
  const auto test_set = t.ds.subset(t.ds.splits.test);
  const auto pairs = sample_swap_pairs(test_set, 5);
  ASSERT_EQ(pairs.size(), test_set.size());
  for (const auto& p : pairs) {
    EXPECT_NE(test_set[p.recipient].label_id, test_set[p.donor].label_id);
    EXPECT_EQ(p.donor_class, test_set[p.donor].label_id);
  }
  EXPECT_EQ(sample_swap_pairs(test_set, 5).size(), pairs.size());
  const std::vector<UnitSequence> single{test::byte_seq("a", {1}), test::byte_seq("b", {2})};
  EXPECT_THROW(sample_swap_pairs(single, 0), ValidationError);

  const auto a = test::byte_seq("a", {1, 2, 3});
  const auto b = test::byte_seq("b", {7, 8, 9, 10});
  const std::size_t pos[] = {0, 2};
  EXPECT_EQ(swap_units(a, b, pos).units, (std::vector<double>{7, 2, 9}));
}

TEST(Swap, SignatureSwapTransformsAndBeatsRandom) {
  const auto& t = test::planted_model();
  const auto inst = t.ds.subset(t.ds.splits.test);
  std::vector<ExplanationReport> planted, random;
  for (std::size_t k = 0; k < inst.size(); ++k) {
    planted.push_back(unit_report(inst[k], 16, {t.ds.truth.at(inst[k].id).positions.front()}));
    auto r = random_attrib(inst[k], t.config, kUnit, k + 100);
    r.id = inst[k].id;
    r.effective_len = inst[k].effective_len;
    r.shape = {16};
    random.push_back(r);
  }
  const std::vector<SwapModel> models{{"source", &t.params, t.config}};
  const auto good = byte_swap_experiment(inst, planted, models, 1.0 / 16.0, 9);
  const auto bad = byte_swap_experiment(inst, random, models, 1.0 / 16.0, 9);
  ASSERT_EQ(good.per_model.size(), 1u);
  EXPECT_EQ(good.per_model[0].n, inst.size());
  EXPECT_GE(good.per_model[0].rate, 0.95);
  EXPECT_LT(bad.per_model[0].rate, good.per_model[0].rate);
  EXPECT_EQ(good.pairs.size(), bad.pairs.size());
}

}  // namespace
}  // namespace xflow
