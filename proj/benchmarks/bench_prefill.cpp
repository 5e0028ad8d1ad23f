// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <benchmark/benchmark.h>

#include "uniprefill/propagation.hpp"
#include "uniprefill/report.hpp"
#include "uniprefill/rng.hpp"

using namespace uniprefill;

namespace {

ModelConfig bench_model() {
    ModelConfig c;
    c.num_blocks = 2;
    c.sublayers_per_block = 2;
    c.layer_pattern = {SublayerKind::FullAttention, SublayerKind::SlidingWindowAttention,
                       SublayerKind::FFN};
    c.hidden_dim = 32;
    c.head_dim = 8;
    c.num_heads = 4;
    c.window_size = 256;
    c.ffn_dim = 64;
    c.vocab_size = 64;
    c.seed = 11;
    return c;
}

ScoreConfig bench_score() {
    ScoreConfig s;
    s.top_p = 0.9f;
    s.block_size_g = 64;
    s.sink_count_a = 64;
    s.query_window_n = 64;
    return s;
}

Matrix low_entropy_prompt(const Model& model, int64_t n, uint64_t seed) {
    WorkloadEntry entry;
    entry.prompt_length = n;
    entry.content_kind = "low_entropy";
    return materialize_prompt(model, entry, seed, 0);
}

} // namespace

static void BM_DensePrefill(benchmark::State& state) {
    const Model model = build_model(bench_model());
    const Matrix prompt = low_entropy_prompt(model, state.range(0), 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dense_prefill(model, prompt));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DensePrefill)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

static void BM_AcceleratedPrefill(benchmark::State& state) {
    const Model model = build_model(bench_model());
    const Matrix prompt = low_entropy_prompt(model, state.range(0), 1);
    const ScoreConfig score = bench_score();
    for (auto _ : state) {
        benchmark::DoNotOptimize(accelerated_prefill(model, prompt, score));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AcceleratedPrefill)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
