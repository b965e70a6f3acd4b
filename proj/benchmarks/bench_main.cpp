// Microbenchmarks for the hot paths: the matmul kernel, a full model forward,
// forward+backward (the training step body), a single trace-grid cell, and
// the closed-form edit update.

#include <benchmark/benchmark.h>

#include "mmtl/editor.hpp"
#include "mmtl/model.hpp"
#include "mmtl/tracer.hpp"
#include "mmtl/trainer.hpp"
#include "mmtl/world.hpp"

namespace {

using namespace mmtl;

const World& bench_world() {
  static World w = World::generate(12, 2, 5);
  return w;
}

const MultiModalLM& bench_model() {
  static MultiModalLM m(default_model_config(bench_world(), /*text_only=*/false, 17));
  return m;
}

PromptSpec bench_prompt() {
  const World& w = bench_world();
  const Fact& f = w.fact(w.train_split.front());
  return w.make_prompt(f, w.question_template(w.group_templates(f.relation).front()), 3);
}

void BM_matmul(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int k = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  Rng rng(42);
  Tensor a = Tensor::randn({m, k}, 1.0, rng);
  Tensor b = Tensor::randn({k, n}, 1.0, rng);
  NoGradGuard ng;
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t{m} * k * n);
}
BENCHMARK(BM_matmul)->Args({28, 128, 128})->Args({28, 128, 512})->Args({28, 512, 128});

void BM_forward(benchmark::State& state) {
  const MultiModalLM& model = bench_model();
  PromptSpec p = bench_prompt();
  NoGradGuard ng;
  for (auto _ : state) {
    ForwardResult r = model.forward(p);
    benchmark::DoNotOptimize(r.logits.data().data());
  }
}
BENCHMARK(BM_forward);

void BM_forward_backward(benchmark::State& state) {
  MultiModalLM model(default_model_config(bench_world(), false, 17));
  model.set_params_requires_grad(true);
  PromptSpec p = bench_prompt();
  for (auto _ : state) {
    for (Tensor& t : model.parameters()) t.zero_grad();
    Tensor loss = model.answer_nll(p, p.answer_tokens);
    backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_forward_backward);

void BM_trace_cell(benchmark::State& state) {
  const MultiModalLM& model = bench_model();
  const World& w = bench_world();
  PromptSpec p = bench_prompt();
  CorruptionSpec spec =
      make_token_replace(w, p, CorruptionSpec::Target::visual_constraint, 9);
  CorruptionResult corr = build_corrupted(p, spec, w);
  NoGradGuard ng;
  ForwardResult clean = model.forward(p, {}, true);
  std::vector<Intervention> ivs;
  for (int l = 2; l < 5; ++l) {
    const Tensor& m = clean.cache->mlp_out[l];
    std::vector<double> row(m.data().begin() + 3 * m.cols(),
                            m.data().begin() + 4 * m.cols());
    ivs.push_back(Intervention::replace_at(Site::mlp_out, l, 3, Tensor::vec(std::move(row))));
  }
  for (auto _ : state) {
    double pr = model.answer_prob(corr.prompt, p.answer_tokens, ivs);
    benchmark::DoNotOptimize(pr);
  }
}
BENCHMARK(BM_trace_cell);

void BM_closed_form_update(benchmark::State& state) {
  Rng rng(7);
  Tensor w = Tensor::randn({128, 512}, 0.02, rng);
  Tensor k = Tensor::randn({512}, 1.0, rng);
  Tensor z = Tensor::randn({128}, 1.0, rng);
  for (auto _ : state) {
    Tensor ws = closed_form_update(w, k, z, 0.01);
    benchmark::DoNotOptimize(ws.data().data());
  }
}
BENCHMARK(BM_closed_form_update);

}  // namespace

BENCHMARK_MAIN();
