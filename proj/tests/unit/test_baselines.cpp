#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "xflow/baselines.hpp"
#include "xflow/errors.hpp"

namespace xflow {
namespace {

const MaskSpec kUnit{};
const MaskSpec kPairs{MaskLevel::Interaction, IndexMode::Positional, {}};

TEST(RandomAttrib, SeededAndShaped) {
  const auto config = test::tiny_config(UnitKind::Bytes, 4);
  const auto seq = test::byte_seq("s", {1, 2, 3, 4});
  EXPECT_EQ(random_attrib(seq, config, kUnit, 3).scores, random_attrib(seq, config, kUnit, 3).scores);
  EXPECT_NE(random_attrib(seq, config, kUnit, 3).scores, random_attrib(seq, config, kUnit, 4).scores);
  EXPECT_EQ(random_attrib(seq, config, kPairs, 3).scores.size(), 16u);
}

TEST(RandomAttrib, ChanceRecoveryRate) {
  const auto config = test::tiny_config(UnitKind::Bytes, 100);
  std::vector<int> tokens(100, 1);
  const auto seq = test::byte_seq("s", tokens);
  const std::size_t planted[] = {10, 50, 90};
  std::size_t hits = 0;
  const std::size_t trials = 10000;
  for (std::size_t seed = 0; seed < trials; ++seed) {
    const auto r = random_attrib(seq, config, kUnit, seed);
    const auto top = select_topk(r.scores, kUnit, 0.03, 100, 100);
    for (std::size_t p : planted) hits += std::find(top.begin(), top.end(), p) != top.end();
  }
  const double per_slot = static_cast<double>(hits) / static_cast<double>(3 * trials);
  EXPECT_NEAR(per_slot, 0.03, 0.03 * 0.2);
}

TEST(SaliencyAttrib, ConstantModelGivesZeroScores) {
  const auto config = test::tiny_config();
  auto params = init_params(config);
  for (auto& w : params.at("head.w").values()) w = 0.0f;
  const auto seq = test::byte_seq("s", {5, 6, 7});
  for (const auto& spec : {kUnit, kPairs}) {
    for (double s : saliency_attrib(seq, params, config, spec).scores) EXPECT_EQ(s, 0.0);
  }
}

TEST(SaliencyAttrib, PureAndRanksPlantedPositionHigh) {
  const auto& t = test::planted_model();
  double rank_sum = 0;
  std::size_t n = 0;
  for (std::size_t i : t.ds.splits.test) {
    const auto& seq = t.ds.sequences[i];
    const auto a = saliency_attrib(seq, t.params, t.config, kUnit);
    EXPECT_EQ(a.scores, saliency_attrib(seq, t.params, t.config, kUnit).scores);
    const std::size_t p = t.ds.truth.at(seq.id).positions.front();
    // 0 = highest score.
    std::size_t rank = 0;
    for (std::size_t j = 0; j < seq.effective_len; ++j) rank += a.scores[j] > a.scores[p];
    rank_sum += static_cast<double>(rank);
    ++n;
  }
  EXPECT_LT(rank_sum / static_cast<double>(n), (16.0 - 1.0) / 2.0);
}

TEST(SaliencyAttrib, ValueModeSumsPositionsHoldingAValue) {
  const auto config = test::tiny_config();
  const auto params = init_params(config);
  const auto seq = test::byte_seq("s", {9, 4, 9, 200});
  const auto pos = saliency_attrib(seq, params, config, kUnit).scores;
  const auto val = saliency_attrib(seq, params, config, {MaskLevel::Unit, IndexMode::Value, {}}).scores;
  ASSERT_EQ(val.size(), kByteVocabSize);
  EXPECT_NEAR(val[9], pos[0] + pos[2], 1e-9);
  EXPECT_NEAR(val[4], pos[1], 1e-9);
  EXPECT_EQ(val[5], 0.0);
}

TEST(AttentionAttrib, RowsNormalizeAndPaddingIsIgnored) {
  const auto config = test::tiny_config(UnitKind::Bytes, 6);
  const auto params = init_params(config);
  const double layers = static_cast<double>(config.n_layers);

  const auto single = attention_attrib(test::byte_seq("a", {42}), params, config, kPairs).scores;
  ASSERT_EQ(single.size(), 36u);
  EXPECT_NEAR(single[0], layers, 1e-5);
  for (std::size_t i = 1; i < 36; ++i) EXPECT_NEAR(single[i], 0.0, 1e-7);

  const auto s = attention_attrib(test::byte_seq("b", {1, 2, 3, 4}), params, config, kPairs).scores;
  for (std::size_t j = 0; j < 4; ++j) {
    double row = 0;
    for (std::size_t k = 0; k < 6; ++k) {
      if (k >= 4) EXPECT_NEAR(s[j * 6 + k], 0.0, 1e-7);
      row += s[j * 6 + k];
    }
    EXPECT_NEAR(row, layers, 1e-5);
  }

  auto mlp = config;
  mlp.arch = Arch::Mlp;
  EXPECT_THROW(attention_attrib(test::byte_seq("c", {1}), init_params(mlp), mlp, kPairs), ValidationError);
}

// Oracle: the same weighted ridge problem solved as an augmented least
// squares system with QR instead of the normal equations.
struct Sample {
  std::vector<std::uint8_t> keep;
  double y;
};

std::vector<double> ridge_oracle(const std::vector<Sample>& samples, std::size_t dim, double width, double lambda) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  const auto p = static_cast<Eigen::Index>(dim) + 1;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + p - 1, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n + p - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const double d = static_cast<double>(std::count(s.keep.begin(), s.keep.end(), 0));
    const double sw = std::sqrt(std::exp(-d * d / (width * width)));
    a(i, 0) = sw;
    for (Eigen::Index j = 1; j < p; ++j) a(i, j) = sw * s.keep[static_cast<std::size_t>(j - 1)];
    b(i) = sw * s.y;
  }
  for (Eigen::Index j = 1; j < p; ++j) a(n + j - 1, j) = std::sqrt(lambda);
  const Eigen::VectorXd beta = a.colPivHouseholderQr().solve(b);
  return {beta.data(), beta.data() + p};
}

TEST(Lime, MatchesIndependentWeightedRidge) {
  const std::size_t dim = 6;
  std::vector<Sample> seen;
  const std::vector<double> w{0.3, -0.2, 0.05, 0.7, 0.0, -0.4};
  const ValueFunction f = [&](const std::vector<std::uint8_t>& keep) {
    double y = 0.1 + 0.25 * keep[0] * keep[1];
    for (std::size_t j = 0; j < dim; ++j) y += w[j] * keep[j];
    seen.push_back({keep, y});
    return y;
  };
  LimeOptions o;
  o.n_samples = 300;
  o.seed = 12;
  const auto fit = lime_fit(dim, f, o);
  ASSERT_EQ(seen.size(), 300u);
  const auto beta = ridge_oracle(seen, dim, 0.75 * std::sqrt(6.0), 1.0);
  EXPECT_NEAR(fit.intercept, beta[0], 1e-9);
  for (std::size_t j = 0; j < dim; ++j) EXPECT_NEAR(fit.coef[j], beta[j + 1], 1e-9) << j;
  EXPECT_FALSE(fit.underdetermined);

  seen.clear();
  EXPECT_EQ(lime_fit(dim, f, o).coef, fit.coef);
  o.n_samples = 3;
  EXPECT_TRUE(lime_fit(dim, f, o).underdetermined);
}

TEST(Lime, ConstantAndSingleFeatureModels) {
  LimeOptions o;
  const auto flat = lime_fit(8, [](const std::vector<std::uint8_t>&) { return 0.42; }, o);
  for (double c : flat.coef) EXPECT_NEAR(c, 0.0, 1e-6);
  const auto one = lime_fit(8, [](const std::vector<std::uint8_t>& k) { return 0.1 + 0.8 * k[3]; }, o);
  for (std::size_t j = 0; j < 8; ++j) {
    if (j != 3) EXPECT_GT(std::abs(one.coef[3]), std::abs(one.coef[j]));
  }
}

TEST(Lime, AttributionOnModelIsSeededAndUnitOnly) {
  const auto& t = test::planted_model();
  const auto& seq = t.ds.sequences[t.ds.splits.test.front()];
  LimeOptions o;
  o.n_samples = 200;
  o.seed = 1;
  const auto a = lime_attrib(seq, t.params, t.config, kUnit, o);
  EXPECT_EQ(a.scores, lime_attrib(seq, t.params, t.config, kUnit, o).scores);
  EXPECT_EQ(a.scores.size(), 16u);
  EXPECT_THROW(lime_attrib(seq, t.params, t.config, kPairs, o), ValidationError);
  EXPECT_THROW(shap_attrib(seq, t.params, t.config, kPairs, 5, 1), ValidationError);
}

// Exact Shapley values by enumerating all coalitions.
std::vector<double> exact_shapley(std::size_t dim, const ValueFunction& f) {
  std::vector<double> phi(dim, 0.0);
  std::vector<double> fact(dim + 1, 1.0);
  for (std::size_t i = 1; i <= dim; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  for (std::size_t mask = 0; mask < (1u << dim); ++mask) {
    std::vector<std::uint8_t> keep(dim);
    std::size_t size = 0;
    for (std::size_t j = 0; j < dim; ++j) size += keep[j] = (mask >> j) & 1u;
    const double base = f(keep);
    for (std::size_t j = 0; j < dim; ++j) {
      if (keep[j]) continue;
      auto with = keep;
      with[j] = 1;
      phi[j] += fact[size] * fact[dim - size - 1] / fact[dim] * (f(with) - base);
    }
  }
  return phi;
}

TEST(Shap, ConvergesToExactValues) {
  const ValueFunction additive = [](const std::vector<std::uint8_t>& k) { return 0.1 + 0.3 * k[0] + 0.5 * k[1]; };
  const auto exact2 = exact_shapley(2, additive);
  const auto est2 = shap_permutation(2, additive, 50, 3);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(est2[j], exact2[j], 0.05);

  const ValueFunction game = [](const std::vector<std::uint8_t>& k) {
    return 0.2 * k[0] + 0.1 * k[1] + 0.6 * k[0] * k[2] - 0.3 * k[1] * k[2] + 0.4 * k[0] * k[1] * k[2];
  };
  const auto exact = exact_shapley(3, game);
  const auto est = shap_permutation(3, game, 10000, 4);
  double sum = 0;
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(est[j], exact[j], 0.02) << j;
    sum += est[j];
  }
  EXPECT_NEAR(sum, game({1, 1, 1}) - game({0, 0, 0}), 1e-12);
}

TEST(Shap, MorePermutationsReduceVariance) {
  const ValueFunction game = [](const std::vector<std::uint8_t>& k) {
    return 0.9 * k[0] * k[1] + 0.2 * k[2] - 0.5 * k[1] * k[3] + 0.3 * k[0] * k[3];
  };
  auto variance = [&](std::size_t perms) {
    std::vector<double> v;
    for (std::uint64_t seed = 0; seed < 300; ++seed) v.push_back(shap_permutation(4, game, perms, seed)[0]);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return var / static_cast<double>(v.size() - 1);
  };
  EXPECT_LT(variance(20), variance(10));
  EXPECT_EQ(shap_permutation(4, game, 7, 9), shap_permutation(4, game, 7, 9));
}

TEST(Baselines, DispatchEmitsFiniteSpecShapedScores) {
  const auto& t = test::planted_model();
  const auto& seq = t.ds.sequences[t.ds.splits.test.front()];
  BaselineOptions o;
  o.lime_samples = 100;
  o.shap_permutations = 10;
  o.topk_fraction = 0.125;
  for (Method m : {Method::Random, Method::Saliency, Method::SelfAttention, Method::LimeLite, Method::ShapLite}) {
    const MaskSpec spec = m == Method::SelfAttention ? kPairs : kUnit;
    const auto r = attribute(m, seq, t.params, t.config, spec, o);
    EXPECT_EQ(r.method, m);
    EXPECT_EQ(r.scores.size(), grad::shape_numel(mask_shape(spec, t.config)));
    for (double s : r.scores) EXPECT_TRUE(std::isfinite(s));
    EXPECT_EQ(r.topk, select_topk(r.scores, spec, 0.125, seq.effective_len, 16));
    EXPECT_EQ(r.id, seq.id);
  }
  EXPECT_THROW(attribute(Method::MaskOptim, seq, t.params, t.config, kUnit, o), ValidationError);
}

}  // namespace
}  // namespace xflow
