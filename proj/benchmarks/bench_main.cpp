#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "langroute/awareness.hpp"
#include "langroute/corpus.hpp"
#include "langroute/model.hpp"
#include "langroute/router.hpp"
#include "langroute/tape.hpp"

namespace {

using namespace langroute;

Tensor random_tensor(std::vector<std::int64_t> shape, std::uint64_t seed) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.5);
  for (double& v : t.data) v = dist(rng);
  return t;
}

struct ModelFixture {
  LanguageFamily family = make_language_family(3, 32, 9);
  TransformerModel model;
  Batch batch;

  explicit ModelFixture(int n_layers, int d_model, int d_ff, int rows) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = d_model;
    cfg.d_ff = d_ff;
    cfg.n_heads = 4;
    cfg.vocab_size = family.vocab.size();
    cfg.max_seq_len = 40;
    cfg.seed = 3;
    model = TransformerModel(cfg);
    model.init_params();

    auto examples = gen_parallel(family, "aa", "bb", rows, 17);
    std::vector<BatchRow> brs;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      brs.push_back(apply_template(family, examples[i], -1, 100 + i, 40));
    }
    batch = rows_to_batch(brs, "aa-bb");
  }
};

void BM_TapeMatmul(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  const Tensor a = random_tensor({n, n}, 1);
  const Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tape tape;
    const NodeId out = tape.matmul(tape.leaf(a), tape.leaf(b));
    benchmark::DoNotOptimize(tape.value(out).data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_TapeMatmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
  ModelFixture fx(static_cast<int>(state.range(0)), 32, 64, 8);
  for (auto _ : state) {
    Tape tape;
    const ForwardResult fr = forward(fx.model, fx.batch, {}, tape);
    benchmark::DoNotOptimize(tape.value(fr.logits).data.data());
  }
}
BENCHMARK(BM_Forward)->Arg(2)->Arg(4);

void BM_ForwardBackward(benchmark::State& state) {
  ModelFixture fx(static_cast<int>(state.range(0)), 32, 64, 8);
  for (auto _ : state) {
    Tape tape;
    const ForwardResult fr = forward(fx.model, fx.batch, {}, tape);
    const NodeId loss = lm_loss_node(tape, fr, fx.batch);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(fr.logits).data.data());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(2)->Arg(4);

void BM_RoutedFfn(benchmark::State& state) {
  const std::int64_t d_model = 32, d_ff = state.range(0), rows = 64;
  const Tensor x = random_tensor({rows, d_model}, 4);
  const Tensor w1 = random_tensor({d_model, d_ff}, 5);
  const Tensor b1 = random_tensor({d_ff}, 6);
  const Tensor w2 = random_tensor({d_ff, d_model}, 7);
  const Tensor b2 = random_tensor({d_model}, 8);
  LayerRouting routing;
  routing.car = 0.4;
  routing.general_scale.assign(static_cast<std::size_t>(d_ff), 0.0);
  routing.specific_scale.assign(static_cast<std::size_t>(d_ff), 0.0);
  for (std::int64_t i = 0; i < d_ff; ++i) {
    if (i % 8 == 0) routing.specific_scale[static_cast<std::size_t>(i)] = 1.0;
    else if (i % 8 != 7) routing.general_scale[static_cast<std::size_t>(i)] = 1.0;
  }
  for (auto _ : state) {
    const Tensor out = routed_ffn(x, w1, b1, w2, b2, routing);
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_RoutedFfn)->Arg(64)->Arg(256);

void BM_ScoreLanguage(benchmark::State& state) {
  ModelFixture fx(2, 32, 64, 8);
  std::vector<BatchRow> mono;
  auto examples = gen_parallel(fx.family, "aa", "bb", 8, 23);
  for (const auto& ex : examples) mono.push_back(lm_row(ex.src));
  const Batch mb = rows_to_batch(mono, "aa");
  for (auto _ : state) {
    AwarenessTable table = make_awareness_table({"aa", "bb"}, {0, 1}, 64);
    score_language(fx.model, "aa", {mb}, table);
    benchmark::DoNotOptimize(table.phi.at(0).data.data());
  }
}
BENCHMARK(BM_ScoreLanguage);

}  // namespace

BENCHMARK_MAIN();
