// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <benchmark/benchmark.h>

#include "uniprefill/importance.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/selection.hpp"

using namespace uniprefill;

namespace {

std::vector<float> random_scores(int64_t n, uint64_t seed) {
    const CounterRng rng(seed, 0x626dULL);
    std::vector<float> s(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        s[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(static_cast<uint64_t>(i)));
    }
    return s;
}

} // namespace

static void BM_PhiEncode(benchmark::State& state) {
    const std::vector<float> scores = random_scores(state.range(0), 1);
    for (auto _ : state) {
        uint32_t acc = 0;
        for (float s : scores) acc ^= phi_encode(s);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PhiEncode)->Range(1 << 10, 1 << 16);

static void BM_TopPSelect(benchmark::State& state) {
    const int64_t blocks = state.range(0);
    const std::vector<float> scores = random_scores(blocks, 2);
    ScoreConfig cfg;
    cfg.top_p = 0.9f;
    cfg.block_size_g = 64;
    cfg.sink_count_a = 128;
    cfg.query_window_n = 128;
    const int64_t tokens = blocks * 64;
    for (auto _ : state) {
        benchmark::DoNotOptimize(top_p_select(scores, cfg, tokens));
    }
    state.SetItemsProcessed(state.iterations() * blocks);
}
BENCHMARK(BM_TopPSelect)->Range(16, 1 << 12);

static void BM_OnlineSoftmaxReduce(benchmark::State& state) {
    const int64_t n_keys = state.range(0);
    const CounterRng rng(3, 0x736dULL);
    Matrix q(64, 8), k(n_keys, 8);
    for (size_t i = 0; i < q.data.size(); ++i) q.data[i] = rng.normal(i, 0.7);
    for (size_t i = 0; i < k.data.size(); ++i) k.data[i] = rng.normal(500000 + i, 0.7);
    const std::vector<Matrix> heads{partial_scores(q, k)};
    for (auto _ : state) {
        benchmark::DoNotOptimize(online_softmax_reduce(heads));
    }
    state.SetItemsProcessed(state.iterations() * n_keys);
}
BENCHMARK(BM_OnlineSoftmaxReduce)->Range(256, 1 << 13);

BENCHMARK_MAIN();
