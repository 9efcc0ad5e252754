#include <benchmark/benchmark.h>

#include <random>

#include "xflow/classifier.hpp"
#include "xflow/explainer.hpp"
#include "xflow/optim.hpp"

namespace {

using namespace xflow;

ClassifierConfig bench_config(std::size_t max_len) {
  ClassifierConfig c;
  c.kind = UnitKind::Bytes;
  c.max_len = max_len;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.ff_hidden = 128;
  c.dropout_rate = 0.1;
  c.num_classes = 6;
  return c;
}

UnitSequence random_bytes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> u(n);
  for (auto& x : u) x = static_cast<double>(rng() % 256);
  return make_sequence("bench", UnitKind::Bytes, std::move(u), 0);
}

void BM_Forward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const auto config = bench_config(len);
  const auto params = init_params(config);
  const auto seq = random_bytes(len, 1);
  for (auto _ : state) benchmark::DoNotOptimize(predict(seq, params, config));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  const auto config = bench_config(64);
  auto params = init_params(config);
  const auto input = make_input(random_bytes(64, 2), config);
  Adam<float> opt(1e-3);
  grad::NumArray<float> target({1, config.num_classes});
  target[0] = 1.0f;
  for (auto _ : state) {
    grad::Tape<float> tape(false);
    Network<float> net(tape, params, config, true);
    const auto loss = tape.nll(tape.log_softmax(net.forward(input)), target);
    auto grads = tape.backward(loss, net.param_vars());
    opt.step(params.tensors(), grads);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMicrosecond);

void BM_ExplainUnit(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  auto config = bench_config(len);
  const auto params = init_params(config);
  const auto seq = random_bytes(len, 3);
  ExplainerConfig x;
  x.steps = 10;
  for (auto _ : state) benchmark::DoNotOptimize(optimize_mask(seq, params, config, MaskSpec{}, x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.steps));
}
BENCHMARK(BM_ExplainUnit)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
