#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "xflow/errors.hpp"
#include "xflow/explainer.hpp"

namespace xflow {
namespace {

using grad::NumArray;
using grad::Tape;
using grad::Var;
using test::away_from_zero;
using test::random_array;
using test::weighted_sum;

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;
constexpr std::uint64_t kSeeds = 50;

double check(const grad::GraphBuilder& build, const std::vector<NumArray<double>>& leaves,
             std::uint64_t seed = 0) {
  grad::FiniteDifferenceOptions opts;
  opts.seed = seed;
  return grad::finite_difference_check(build, leaves, kStep, opts);
}

class PrimitiveFd : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  std::mt19937_64 rng{GetParam() * 7919 + 1};
  std::uint64_t seed() const { return GetParam(); }
};

TEST_P(PrimitiveFd, Gather) {
  const std::vector<int> idx{0, 3, 3, 1, 4};
  auto build = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.gather(v[0], idx), seed()); };
  EXPECT_LE(check(build, {random_array({5, 3}, rng)}), kTol);
}

TEST_P(PrimitiveFd, PairGather) {
  const std::vector<int> idx{2, 0, 2, 1};
  auto build = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.pair_gather(v[0], idx), seed());
  };
  EXPECT_LE(check(build, {random_array({3, 3}, rng)}), kTol);
}

TEST_P(PrimitiveFd, LinearWithAndWithoutBias) {
  auto with_bias = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.linear(v[0], v[1], v[2]), seed());
  };
  EXPECT_LE(check(with_bias, {random_array({4, 3}, rng), random_array({3, 5}, rng), random_array({5}, rng)}), kTol);
  auto no_bias = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.linear(v[0], v[1]), seed()); };
  EXPECT_LE(check(no_bias, {random_array({2, 3}, rng), random_array({3, 2}, rng)}), kTol);
}

TEST_P(PrimitiveFd, AttentionWithMaskBiasAndScale) {
  const std::vector<std::uint8_t> present{1, 1, 0, 1};
  auto build = [&](Tape<double>& t, std::span<const Var> v) {
    grad::AttentionOptions o;
    o.heads = 2;
    o.key_present = present;
    o.logit_bias = v[3];
    o.logit_scale = v[4];
    return weighted_sum(t, t.attention(v[0], v[1], v[2], o), seed());
  };
  EXPECT_LE(check(build, {random_array({4, 6}, rng), random_array({4, 6}, rng), random_array({4, 6}, rng),
                          random_array({4, 4}, rng), random_array({4, 4}, rng, 0.5, 1.5)}),
            kTol);
}

TEST_P(PrimitiveFd, SoftmaxAndLogSoftmax) {
  auto sm = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.softmax(v[0]), seed()); };
  EXPECT_LE(check(sm, {random_array({3, 4}, rng, -3, 3)}), kTol);
  auto lsm = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.log_softmax(v[0]), seed()); };
  EXPECT_LE(check(lsm, {random_array({3, 4}, rng, -3, 3)}), kTol);
}

TEST_P(PrimitiveFd, LayerNorm) {
  auto build = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.layer_norm(v[0], v[1], v[2]), seed());
  };
  EXPECT_LE(check(build, {random_array({3, 5}, rng, -2, 2), random_array({5}, rng, 0.5, 1.5), random_array({5}, rng)}),
            kTol);
}

TEST_P(PrimitiveFd, Elementwise) {
  auto relu = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.relu(v[0]), seed()); };
  EXPECT_LE(check(relu, {away_from_zero({3, 4}, rng)}), kTol);
  auto sig = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.sigmoid(v[0]), seed()); };
  EXPECT_LE(check(sig, {random_array({6}, rng, -4, 4)}), kTol);
  auto lsig = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.log_sigmoid(v[0]), seed()); };
  EXPECT_LE(check(lsig, {random_array({6}, rng, -4, 4)}), kTol);
  auto lg = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.log(v[0]), seed()); };
  EXPECT_LE(check(lg, {random_array({6}, rng, 0.2, 3)}), kTol);
  auto sc = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.add_scalar(t.scale(v[0], -1.7), 0.3), seed());
  };
  EXPECT_LE(check(sc, {random_array({2, 3}, rng)}), kTol);
}

TEST_P(PrimitiveFd, BinaryAndReductions) {
  auto add_mul = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.mul(t.add(v[0], v[1]), v[1]), seed());
  };
  EXPECT_LE(check(add_mul, {random_array({3, 2}, rng), random_array({3, 2}, rng)}), kTol);
  auto rs = [&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.row_scale(v[0], v[1]), seed()); };
  EXPECT_LE(check(rs, {random_array({4, 3}, rng), random_array({4}, rng)}), kTol);
  const std::vector<std::uint8_t> present{1, 0, 1, 1};
  auto mp = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.mean_pool(v[0], present), seed());
  };
  EXPECT_LE(check(mp, {random_array({4, 3}, rng)}), kTol);
  auto rsh = [&](Tape<double>& t, std::span<const Var> v) {
    return weighted_sum(t, t.reshape(v[0], {3, 2}), seed());
  };
  EXPECT_LE(check(rsh, {random_array({6}, rng)}), kTol);
  auto nll = [&](Tape<double>& t, std::span<const Var> v) {
    std::mt19937_64 r(seed());
    return t.nll(v[0], random_array({2, 3}, r, 0.1, 1.0));
  };
  EXPECT_LE(check(nll, {random_array({2, 3}, rng)}), kTol);
}

// Unit/Interaction x Positional/Value masked prediction with the budget and
// explanation terms, differentiated with respect to the mask scores.
TEST_P(PrimitiveFd, MaskedPredictionLossComposite) {
  const auto config = test::tiny_config(UnitKind::Bytes, 8, 3, seed() + 1);
  const auto params = init_params(config).cast<double>();
  std::uniform_int_distribution<int> tok(0, 3);
  std::vector<int> tokens(6);
  for (auto& x : tokens) x = tok(rng) * 60;
  const ModelInput input = make_input(test::byte_seq("s", tokens), config);

  // Value-mode masks are expanded from a small table over the distinct
  // tokens (slot 0 collects every other value) so all coordinates are checked.
  std::vector<int> slot(kByteVocabSize, 0);
  for (int v = 0; v < 4; ++v) slot[static_cast<std::size_t>(v * 60)] = v + 1;
  slot[kPadToken] = 5;
  // Budget mass only over the values that occur, so the hinge term stays
  // small enough for the central difference to resolve every coordinate.
  const auto occurs = [&](std::size_t v) { return slot[v] != 0; };
  NumArray<double> unit_w({kByteVocabSize});
  NumArray<double> pair_w({kByteVocabSize, kByteVocabSize});
  for (std::size_t a = 0; a < kByteVocabSize; ++a) {
    unit_w[a] = occurs(a) ? 1.0 : 0.0;
    for (std::size_t b = 0; b < kByteVocabSize; ++b) pair_w.at(a, b) = occurs(a) && occurs(b) ? 1.0 : 0.0;
  }

  for (MaskLevel level : {MaskLevel::Unit, MaskLevel::Interaction}) {
    for (IndexMode mode : {IndexMode::Positional, IndexMode::Value}) {
      for (Objective obj : {Objective::Confidence, Objective::Label}) {
        const MaskSpec spec{level, mode, std::nullopt};
        std::vector<double> target(config.num_classes, 0.0);
        if (obj == Objective::Confidence) {
          std::uniform_real_distribution<double> u(0.1, 1.0);
          double z = 0;
          for (auto& p : target) z += (p = u(rng));
          for (auto& p : target) p /= z;
        } else {
          target[seed() % config.num_classes] = 1.0;
        }
        const bool unit = level == MaskLevel::Unit;
        const std::size_t n = mode == IndexMode::Positional ? config.max_len : 6;
        const std::size_t m = mode == IndexMode::Positional ? n : 5;
        const std::size_t entries = unit ? m : m * m;
        // Alternate between an active and an inactive budget hinge.
        const double budget = seed() % 2 == 0 ? 0.1 * static_cast<double>(entries) : 2.0 * static_cast<double>(entries);
        auto build = [&](Tape<double>& t, std::span<const Var> v) {
          Network<double> net(t, params, config);
          Var theta = v[0];
          if (mode == IndexMode::Value) {
            theta = unit ? t.reshape(t.gather(v[0], slot), {kByteVocabSize}) : t.pair_gather(v[0], slot);
          }
          const Var logits = masked_logits(t, net, input, theta, spec);
          const Var explain = explain_loss_graph(t, logits, target);
          const NumArray<double>* w = mode == IndexMode::Positional ? nullptr : unit ? &unit_w : &pair_w;
          return total_loss_graph(t, theta, explain, 0.1, 1.0, budget, w);
        };
        const grad::Shape shape = unit ? (mode == IndexMode::Positional ? grad::Shape{n} : grad::Shape{n, 1})
                                       : grad::Shape{n, n};
        grad::FiniteDifferenceOptions opts;
        opts.max_coords_per_leaf = 1000;
        const double err = grad::finite_difference_check(build, {random_array(shape, rng, -2, 2)}, kStep, opts);
        EXPECT_LE(err, kTol) << to_string(level) << "/" << to_string(mode) << "/" << to_string(obj);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveFd, ::testing::Range<std::uint64_t>(0, kSeeds));

TEST(FiniteDifference, LinearLayerIsTight) {
  std::mt19937_64 rng(3);
  auto build = [](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, t.linear(v[0], v[1], v[2]), 3); };
  EXPECT_LE(grad::finite_difference_check(build, {random_array({4, 3}, rng), random_array({3, 2}, rng),
                                                  random_array({2}, rng)},
                                          1e-5),
            1e-6);
}

TEST(FiniteDifference, SoftmaxNllComposite) {
  std::mt19937_64 rng(4);
  auto build = [&](Tape<double>& t, std::span<const Var> v) {
    auto w = NumArray<double>({2, 4}, {0, 1, 0, 0, 0, 0, 0, 1});
    return t.nll(t.log(t.softmax(t.linear(v[0], v[1]))), w);
  };
  EXPECT_LE(grad::finite_difference_check(build, {random_array({2, 3}, rng), random_array({3, 4}, rng)}, 1e-5), 1e-5);
}

TEST(FiniteDifference, ConstantFunctionGivesZero) {
  auto build = [](Tape<double>& t, std::span<const Var> v) {
    const Var zero_w = t.leaf(NumArray<double>({3, 2}));
    return t.sum(t.linear(v[0], zero_w));
  };
  std::mt19937_64 rng(5);
  EXPECT_NEAR(grad::finite_difference_check(build, {random_array({4, 3}, rng)}, 1e-5), 0.0, 1e-9);
}

TEST(Tape, BackwardIsLinear) {
  std::mt19937_64 rng(6);
  const auto x = random_array({3, 4}, rng);
  auto grad_of = [&](double a, double b) {
    Tape<double> t;
    const Var v = t.leaf(x, true);
    const Var f = weighted_sum(t, t.sigmoid(v), 1);
    const Var g = weighted_sum(t, t.softmax(v), 2);
    const Var out = t.add(t.scale(f, a), t.scale(g, b));
    return t.backward(out, std::vector<Var>{v})[0];
  };
  const auto gf = grad_of(1, 0), gg = grad_of(0, 1), gc = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-12);
}

TEST(Tape, IdenticalRecordsAreBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(8);
    Tape<float> t;
    const Var x = t.leaf(random_array({4, 6}, rng).cast<float>(), true);
    const std::vector<std::uint8_t> present(4, 1);
    grad::AttentionOptions o;
    o.heads = 3;
    o.key_present = present;
    const Var y = t.attention(x, x, x, o);
    const Var s = t.sum(t.layer_norm(y, t.leaf(NumArray<float>::filled({6}, 1.f)), t.leaf(NumArray<float>({6}))));
    return std::make_pair(t.value(y), t.backward(s, std::vector<Var>{x})[0]);
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(9);
  Tape<double> t;
  const auto& s = t.value(t.softmax(t.leaf(random_array({5, 7}, rng, -30, 30))));
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) sum += s.at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Tape, LayerNormStandardizesRows) {
  std::mt19937_64 rng(10);
  Tape<double> t;
  const std::size_t d = 16;
  const auto& y = t.value(t.layer_norm(t.leaf(random_array({4, d}, rng, -5, 5)),
                                       t.leaf(NumArray<double>::filled({d}, 1.0)), t.leaf(NumArray<double>({d}))));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mean += y.at(r, c);
    mean /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    var /= d;
    EXPECT_LE(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Tape, UnconnectedLeafGetsZeroGradient) {
  Tape<double> t;
  const Var a = t.leaf(NumArray<double>({2}, {1.0, 2.0}), true);
  const Var b = t.leaf(NumArray<double>({2}, {3.0, 4.0}), true);
  const auto g = t.backward(t.sum(a), std::vector<Var>{a, b});
  EXPECT_EQ(g[0], NumArray<double>::filled({2}, 1.0));
  EXPECT_EQ(g[1], NumArray<double>({2}));
}

TEST(Tape, LogSoftmaxFloorClampsWithZeroGradient) {
  Tape<double> t;
  const Var x = t.leaf(NumArray<double>({1, 2}, {0.0, -100.0}), true);
  const Var y = t.log_softmax(x, std::log(1e-12));
  EXPECT_NEAR(t.value(y)[1], std::log(1e-12), 1e-12);
  const auto g = t.backward(t.sum(t.mul(y, t.leaf(NumArray<double>({1, 2}, {0.0, 1.0})))), std::vector<Var>{x});
  EXPECT_EQ(g[0][0], 0.0);
  EXPECT_EQ(g[0][1], 0.0);
}

TEST(Tape, ShapeMismatchThrows) {
  Tape<double> t;
  const Var a = t.leaf(NumArray<double>({2, 3}));
  const Var b = t.leaf(NumArray<double>({2, 2}));
  EXPECT_THROW(t.add(a, b), ShapeError);
  EXPECT_THROW(t.linear(a, b), ShapeError);
  EXPECT_THROW(t.gather(a, std::vector<int>{2}), ShapeError);
}

TEST(NumArray, RejectsBadSizeAndNonFinite) {
  EXPECT_THROW(NumArray<double>({2, 2}, {1.0, 2.0}), ShapeError);
  EXPECT_THROW(NumArray<double>({1}, {std::nan("")}), NumericError);
}

}  // namespace
}  // namespace xflow
