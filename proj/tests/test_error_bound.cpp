// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/error_bound.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/tasks.hpp"

#include <cmath>
#include <cstring>

using namespace uniprefill;

namespace {

Matrix random_matrix(int64_t r, int64_t c, uint64_t seed, double stddev = 0.6) {
    const CounterRng rng(seed, 0x6562ULL);
    Matrix m(r, c);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.normal(i, stddev);
    return m;
}

ModelConfig bound_config(uint64_t seed) {
    ModelConfig c;
    c.num_blocks = 2;
    c.sublayers_per_block = 2;
    c.layer_pattern = {SublayerKind::FullAttention, SublayerKind::FFN,
                       SublayerKind::SlidingWindowAttention};
    c.hidden_dim = 32;
    c.head_dim = 8;
    c.num_heads = 4;
    c.window_size = 8;
    c.ffn_dim = 48;
    c.vocab_size = 64;
    c.seed = seed;
    return c;
}


void plant_attractor(const Model& model, Matrix& prompt, int64_t pos, int64_t window_span,
                     uint64_t seed) {
    std::vector<int64_t> window;
    for (int64_t i = prompt.rows - window_span; i < prompt.rows; ++i) window.push_back(i);
    const std::vector<std::vector<int64_t>> groups{{pos}};
    const AlignmentPlan plan = plan_alignment(model, 0, window, groups, seed);
    install_plan(prompt, plan, window, groups);
}

std::vector<int64_t> iota_positions(int64_t n) {
    std::vector<int64_t> pos(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = i;
    return pos;
}

} // namespace

TEST_CASE("keep-all has exactly zero perturbation") {
    const int64_t n = 32;
    const Matrix q = random_matrix(n, 32, 1);
    const Matrix k = random_matrix(n, 32, 2);
    const Matrix v = random_matrix(n, 32, 3);
    const std::vector<int64_t> pos = iota_positions(n);
    const std::vector<uint8_t> keep(static_cast<size_t>(n), 1);
    const DropEventErrorReport rep = measure_readout_drop_error(q, pos, k, v, pos, keep, 4, 1.0);
    CHECK(rep.measured_mean_perturbation == 0.0);
    CHECK(rep.measured_max_perturbation == 0.0);
    CHECK(rep.within_bound);
}

TEST_CASE("uniform attention dropping a tenth of the mass stays under a tenth of V_max") {
    // Zero queries give exactly uniform softmax rows; the single tail query
    // sees every key so its retained mass is exactly the retained fraction.
    const int64_t n = 200;
    const Matrix k = random_matrix(n, 32, 4);
    const Matrix v = random_matrix(n, 32, 5);
    const std::vector<int64_t> pos = iota_positions(n);
    std::vector<uint8_t> keep(static_cast<size_t>(n), 1);
    // Drop 20 interior keys: exactly 10% of the last row's mass.
    for (int64_t i = 0; i < 20; ++i) keep[static_cast<size_t>(40 + i * 7)] = 0;
    Matrix q_last(1, 32); // zeros
    const std::vector<int64_t> q_pos{n - 1};
    const DropEventErrorReport rep =
        measure_readout_drop_error(q_last, q_pos, k, v, pos, keep, 4, 0.9);
    CHECK(rep.dropped == 20);
    CHECK(rep.measured_mean_perturbation <= 0.1 * rep.v_max + 1e-5);
    CHECK(rep.within_bound);
}

TEST_CASE("an adversarial huge value among the dropped keys is covered by V_max") {
    const int64_t n = 64;
    const Matrix k = random_matrix(n, 32, 6);
    Matrix v(n, 32); // all-zero values except the dropped victim
    std::vector<uint8_t> keep(static_cast<size_t>(n), 1);
    const int64_t victim = 30;
    keep[static_cast<size_t>(victim)] = 0;
    const CounterRng rng(7, 0x61647633ULL);
    for (int c = 0; c < 32; ++c) v.at(victim, c) = rng.normal(static_cast<uint64_t>(c), 40.0);
    const std::vector<int64_t> pos = iota_positions(n);
    Matrix q_last(1, 32); // uniform attention from the tail query
    const std::vector<int64_t> q_pos{n - 1};
    // covered_mass for uniform attention over the last row: 63/64. The
    // dropped contribution is exactly (1/64) * v_huge, so the bound is tight.
    const double covered = static_cast<double>(n - 1) / static_cast<double>(n);
    const DropEventErrorReport rep =
        measure_readout_drop_error(q_last, q_pos, k, v, pos, keep, 4, covered);
    CHECK(rep.within_bound);
    CHECK(rep.v_max > 100.0); // per-head V_max tracks the huge row
    CHECK(rep.measured_mean_perturbation > 0.5 * rep.bound);
    CHECK(rep.measured_mean_perturbation <= rep.bound + 1e-5);
}

TEST_CASE("model-level drop events satisfy the bound across seeds") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        const Model model = build_model(bound_config(seed));
        const int64_t n = 128;
        Matrix prompt = random_matrix(n, 32, 100 + seed, 1.0);
        // Concentrate some attention so drops actually happen.
        plant_attractor(model, prompt, 50, 8, 300 + seed);
        ScoreConfig score;
        score.top_p = 0.9f;
        score.block_size_g = 8;
        score.sink_count_a = 8;
        score.query_window_n = 8;
        const ErrorBoundReport rep = measure_drop_error(model, prompt, score, 0);
        CHECK(rep.drop.within_bound);
        if (rep.drop.dropped > 0) {
            CHECK(rep.drop.measured_mean_perturbation > 0.0);
            CHECK(rep.drop.measured_max_perturbation > 0.0);
        }
    }
}

TEST_CASE("p=1 on the model path gives zero perturbation") {
    const Model model = build_model(bound_config(3));
    const Matrix prompt = random_matrix(96, 32, 500, 1.0);
    ScoreConfig score;
    score.top_p = 1.0f;
    score.block_size_g = 8;
    score.sink_count_a = 4;
    score.query_window_n = 8;
    const ErrorBoundReport rep = measure_drop_error(model, prompt, score, 0);
    CHECK(rep.drop.measured_mean_perturbation == 0.0);
    CHECK(rep.drop.measured_max_perturbation == 0.0);
    CHECK(rep.drop.dropped == 0);
}

TEST_CASE("block extension reports amplification and the product bound") {
    const Model model = build_model(bound_config(4));
    const int64_t n = 96;
    Matrix prompt = random_matrix(n, 32, 600, 1.0);
    plant_attractor(model, prompt, 40, 8, 601);
    ScoreConfig score;
    score.top_p = 0.85f;
    score.block_size_g = 8;
    score.sink_count_a = 8;
    score.query_window_n = 8;
    const ErrorBoundReport rep =
        measure_drop_error(model, prompt, score, 0, /*extend_through_block=*/true,
                           /*lipschitz_probes=*/16, /*probe_seed=*/1);
    REQUIRE(rep.block.has_value());
    CHECK(rep.block->sublayer_lipschitz.size() == 2); // two sublayers after the drop layer
    for (double lm : rep.block->sublayer_lipschitz) CHECK(lm > 0.0);
    CHECK(rep.block->lipschitz_product > 0.0);
    CHECK(std::isfinite(rep.block->end_of_block_error));
    CHECK(rep.block->product_bound >= 0.0);
}

TEST_CASE("sublayer amplification estimates are positive and finite") {
    const Model model = build_model(bound_config(5));
    const Matrix states = random_matrix(24, 32, 700, 1.0);
    const std::vector<int64_t> pos = iota_positions(24);
    for (int layer : {1, 2}) {
        const double lm = estimate_sublayer_lipschitz(model, layer, states, pos, 8, 42);
        CHECK(lm > 0.0);
        CHECK(std::isfinite(lm));
    }
}
