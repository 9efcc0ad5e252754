#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>

#include "test_util.hpp"
#include "xflow/checkpoint.hpp"
#include "xflow/classifier.hpp"
#include "xflow/errors.hpp"
#include "xflow/io.hpp"

namespace xflow {
namespace {

namespace fs = std::filesystem;
using grad::NumArray;
using grad::Tape;
using grad::Var;

double logits_loss(const BasicModelParams<double>& params, const ClassifierConfig& config, const ModelInput& in,
                   const std::vector<double>& w) {
  Tape<double> t(false);
  Network<double> net(t, params, config);
  const auto& l = t.value(net.forward(in));
  double s = 0;
  for (std::size_t i = 0; i < l.size(); ++i) s += w[i] * l[i];
  return s;
}

// Independent oracle: perturb each weight in a private copy and difference
// the forward pass by hand.
void check_param_gradients(const ClassifierConfig& config, const UnitSequence& seq, std::uint64_t seed) {
  auto params = init_params(config).cast<double>();
  std::mt19937_64 rng(seed);
  for (auto& t : params.tensors()) {
    for (auto& v : t.values()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  }
  const ModelInput in = make_input(seq, config);
  std::vector<double> w(config.num_classes);
  for (auto& x : w) x = std::uniform_real_distribution<double>(0.5, 1.5)(rng);

  Tape<double> t(true);
  Network<double> net(t, params, config, true);
  const Var logits = net.forward(in);
  NumArray<double> wl({1, config.num_classes}, w);
  const Var loss = t.sum(t.mul(logits, t.leaf(wl)));
  const auto grads = t.backward(loss, net.param_vars());

  const double h = 1e-5;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& tensor = params.tensor(p);
    for (int k = 0; k < 6; ++k) {
      const std::size_t c = rng() % tensor.size();
      const double orig = tensor[c];
      tensor[c] = orig + h;
      const double up = logits_loss(params, config, in, w);
      tensor[c] = orig - h;
      const double down = logits_loss(params, config, in, w);
      tensor[c] = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(grads[p][c], numeric, 1e-6 + 1e-4 * std::abs(numeric)) << params.names()[p] << "[" << c << "]";
    }
  }
}

TEST(Classifier, TransformerParameterGradientsMatchDifferences) {
  const auto seq = test::byte_seq("s", {3, 200, 17, 17, 90});
  for (std::uint64_t seed = 0; seed < 4; ++seed) check_param_gradients(test::tiny_config(), seq, seed);
}

TEST(Classifier, MlpAndRttGradientsMatchDifferences) {
  auto mlp = test::tiny_config();
  mlp.arch = Arch::Mlp;
  check_param_gradients(mlp, test::byte_seq("s", {3, 200, 17}), 1);
  const auto rtt = make_sequence("r", UnitKind::Rtt, {1.0, 40.0, 41.0, 160.0}, 0);
  check_param_gradients(test::tiny_config(UnitKind::Rtt), rtt, 2);
}

TEST(Classifier, LayoutAndInitialization) {
  const auto config = test::tiny_config();
  const auto params = init_params(config);
  const auto layout = param_layout(config);
  ASSERT_EQ(params.size(), layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    EXPECT_EQ(params.names()[i], layout[i].first);
    EXPECT_EQ(params.tensor(i).shape(), layout[i].second);
  }
  EXPECT_EQ(params.at("embed.table").shape(), (grad::Shape{kByteVocabSize, 8}));
  for (float g : params.at("layers.0.ln1.gamma").values()) EXPECT_EQ(g, 1.0f);
  for (float b : params.at("head.b").values()) EXPECT_EQ(b, 0.0f);
  EXPECT_EQ(init_params(config), params);
  auto other = config;
  other.seed = 99;
  EXPECT_NE(init_params(other).checksum(), params.checksum());
}

TEST(Classifier, PredictionsAreDistributionsAndBatchMatchesSingle) {
  const auto config = test::tiny_config();
  const auto params = init_params(config);
  std::vector<UnitSequence> seqs{test::byte_seq("a", {1, 2, 3}), test::byte_seq("b", {250}),
                                 test::byte_seq("c", {9, 9, 9, 9, 9, 9, 9, 9})};
  const auto batch = predict_batch(seqs, params, config);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    double s = 0;
    for (double p : batch[i].probs) s += p;
    EXPECT_NEAR(s, 1.0, 1e-9);
    EXPECT_EQ(batch[i].probs, predict(seqs[i], params, config).probs);
  }
}

TEST(Classifier, PaddingLengthDoesNotChangeTransformerOutput) {
  auto short_cfg = test::tiny_config(UnitKind::Bytes, 6);
  auto long_cfg = short_cfg;
  long_cfg.max_len = 16;
  const auto params = init_params(short_cfg);
  const auto seq = test::byte_seq("a", {4, 8, 15, 16});
  const auto a = predict(seq, params, short_cfg).probs;
  const auto b = predict(seq, params, long_cfg).probs;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Classifier, ArgmaxTiesGoToLowestIndex) {
  EXPECT_EQ(PredictionDistribution::from_logits(std::vector<double>{1.0, 3.0, 3.0}).predicted_class, 1u);
  EXPECT_EQ(PredictionDistribution::from_probs({0.5, 0.5}).predicted_class, 0u);
}

TEST(Classifier, InputValidation) {
  const auto config = test::tiny_config();
  EXPECT_THROW(make_input(make_sequence("r", UnitKind::Rtt, {1.0}, 0), config), ValidationError);
  UnitSequence bad = test::byte_seq("b", {1});
  bad.units[0] = 300;
  EXPECT_THROW(make_input(bad, config), ValidationError);
  const ModelInput empty = make_input(test::byte_seq("e", {}), config);
  EXPECT_EQ(empty.present[0], 1);
  auto cfg = config;
  cfg.d_model = 9;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = config;
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

LabeledDataset separable(std::size_t per_class) {
  SyntheticSpec s;
  s.num_classes = 3;
  s.seq_len = 8;
  s.byte_signatures = make_shared_position_signatures(3, 8, 2, 4);
  s.noise = 0.05;
  s.instances_per_class = per_class;
  s.seed = 4;
  return split_dataset(generate_synthetic(s), {0.8, 0.1, 0.1}, 4);
}

TEST(Training, LearnsSeparableFixtureDeterministically) {
  const auto ds = separable(40);
  auto config = test::tiny_config(UnitKind::Bytes, 8, 3, 5);
  config.dropout_rate = 0.1;
  TrainHyper h;
  h.epochs = 25;
  h.batch_size = 16;
  h.learning_rate = 5e-3;
  h.patience = 25;
  h.seed = 5;
  const auto a = train(ds, config, h);
  EXPECT_GE(a.best_val_acc, 0.99);
  EXPECT_GE(accuracy(ds.subset(ds.splits.test), a.params, config), 0.99);
  ASSERT_FALSE(a.log.empty());
  EXPECT_LT(a.log.back().train_loss, a.log.front().train_loss);
  EXPECT_GE(a.best_epoch, 1u);
  EXPECT_LE(a.best_epoch, a.log.size());
  const auto b = train(ds, config, h);
  EXPECT_EQ(a.params, b.params);
}

TEST(Training, EarlyStoppingRespectsPatience) {
  const auto ds = separable(20);
  const auto config = test::tiny_config(UnitKind::Bytes, 8, 3, 6);
  TrainHyper h;
  h.epochs = 200;
  h.batch_size = 8;
  h.learning_rate = 5e-3;
  h.patience = 3;
  const auto r = train(ds, config, h);
  EXPECT_LT(r.log.size(), 200u);
  EXPECT_LE(r.log.size(), r.best_epoch + h.patience);
}

TEST(Training, RejectsEmptyTrainingSplit) {
  auto ds = separable(5);
  ds.splits.train.clear();
  EXPECT_THROW(train(ds, test::tiny_config(UnitKind::Bytes, 8, 3), TrainHyper{}), ValidationError);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("xflow_ck_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Checkpoint, RoundTripsExactly) {
  for (Arch arch : {Arch::Transformer, Arch::Mlp}) {
    auto config = test::tiny_config();
    config.arch = arch;
    const auto params = init_params(config);
    const auto dir = temp_dir(to_string(arch));
    save_checkpoint(dir, params, config);
    const auto ck = load_checkpoint(dir);
    EXPECT_EQ(ck.config, config);
    EXPECT_EQ(ck.params, params);
    const auto seq = test::byte_seq("a", {1, 2, 3});
    EXPECT_EQ(predict(seq, ck.params, ck.config).probs, predict(seq, params, config).probs);
  }
}

TEST(Checkpoint, RejectsTamperedManifestsAndBlobs) {
  const auto config = test::tiny_config();
  const auto dir = temp_dir("tamper");
  save_checkpoint(dir, init_params(config), config);
  const std::string manifest = read_file(dir / "manifest.json");
  const std::string blob = read_file(dir / "params.bin");
  auto edit = [&](const std::function<void(nlohmann::json&)>& change) {
    auto m = nlohmann::json::parse(manifest);
    change(m);
    write_file(dir / "manifest.json", m.dump());
  };
  edit([](nlohmann::json& m) { m["version"] = 2; });
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
  edit([](nlohmann::json& m) { m["config"]["d_model"] = 16; });
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
  edit([](nlohmann::json& m) { m["config"]["extra"] = 1; });
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
  write_file(dir / "manifest.json", manifest);
  write_file(dir / "params.bin", blob.substr(0, blob.size() - 4));
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
  std::string nan_blob = blob;
  const std::uint32_t nan_bits = 0x7fc00000u;
  std::memcpy(nan_blob.data(), &nan_bits, 4);
  write_file(dir / "params.bin", nan_blob);
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
  EXPECT_THROW(load_checkpoint(temp_dir("missing")), ValidationError);
}

TEST(Checkpoint, ConfigJsonRejectsUnknownKeys) {
  EXPECT_THROW(config_from_json(nlohmann::json{{"d_modell", 3}}), ValidationError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"d_model", "big"}}), ValidationError);
  const auto c = config_from_json(nlohmann::json{{"d_model", 16}, {"arch", "mlp"}});
  EXPECT_EQ(c.d_model, 16u);
  EXPECT_EQ(c.arch, Arch::Mlp);
  EXPECT_EQ(config_from_json(config_to_json(test::tiny_config())), test::tiny_config());
}

}  // namespace
}  // namespace xflow
