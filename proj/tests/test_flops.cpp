// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/errors.hpp"
#include "uniprefill/flops.hpp"
#include "uniprefill/propagation.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/tasks.hpp"

#include <cstring>

using namespace uniprefill;

namespace {

ModelConfig counting_config() {
    ModelConfig c;
    c.num_blocks = 1;
    c.sublayers_per_block = 3;
    c.layer_pattern = {SublayerKind::FullAttention, SublayerKind::FFN, SublayerKind::FFN,
                       SublayerKind::FFN};
    c.hidden_dim = 64;
    c.head_dim = 8;
    c.num_heads = 8;
    c.window_size = 16;
    c.ffn_dim = 256;
    c.vocab_size = 64;
    c.seed = 0;
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

Matrix random_tokens(int64_t n, int d, uint64_t seed) {
    const CounterRng rng(seed, 0x666cULL);
    Matrix m(n, d);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.normal(i, 1.0);
    return m;
}

} // namespace

TEST_CASE("zero tokens cost zero flops") {
    const ModelConfig c = counting_config();
    for (SublayerKind k : {SublayerKind::FullAttention, SublayerKind::SlidingWindowAttention,
                           SublayerKind::LinearAttention, SublayerKind::FFN}) {
        CHECK(layer_flops(k, 0, c) == 0);
    }
}

TEST_CASE("FFN cost is the direct formula") {
    const ModelConfig c = counting_config();
    CHECK(layer_flops(SublayerKind::FFN, 10, c) == 4ull * 10 * 64 * 256); // 655360
}

TEST_CASE("cost homogeneity: linear kinds double, attention pair term quadruples") {
    const ModelConfig c = counting_config();
    CHECK(layer_flops(SublayerKind::FFN, 20, c) == 2 * layer_flops(SublayerKind::FFN, 10, c));
    const uint64_t proj_10 = 8ull * 10 * 64 * 64;
    const uint64_t proj_20 = 8ull * 20 * 64 * 64;
    const uint64_t pair_10 = layer_flops(SublayerKind::FullAttention, 10, c) - proj_10;
    const uint64_t pair_20 = layer_flops(SublayerKind::FullAttention, 20, c) - proj_20;
    CHECK(pair_20 == 4 * pair_10);
    // Sliding window caps at the window span.
    const uint64_t swa_below = layer_flops(SublayerKind::SlidingWindowAttention, 8, c);
    CHECK(swa_below == 2ull * 8 * 8 * 8 * 8 + 8ull * 8 * 64 * 64); // n < w: min is n
    const uint64_t swa_above = layer_flops(SublayerKind::SlidingWindowAttention, 100, c);
    CHECK(swa_above == 2ull * 100 * 16 * 8 * 8 + 8ull * 100 * 64 * 64);
}

TEST_CASE("no drops means zero savings") {
    const ModelConfig c = counting_config();
    FlopsLedger dense, accel;
    for (int l = 0; l < c.total_layers(); ++l) {
        dense.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 64, c);
        accel.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 64, c);
    }
    const SavingsReport r = validate_savings(dense, accel, c);
    CHECK(r.measured_delta == 0);
    CHECK(r.formula_delta == 0);
    CHECK(r.exact_match);
}

TEST_CASE("single drop at half retention on a linear-cost tail is exact") {
    const ModelConfig c = counting_config();
    FlopsLedger dense, accel;
    for (int l = 0; l < 4; ++l) {
        dense.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 64, c);
    }
    accel.add_layer(0, SublayerKind::FullAttention, 64, c); // charged at entry count
    for (int l = 1; l < 4; ++l) accel.add_layer(l, SublayerKind::FFN, 32, c);
    accel.add_drop(DropRecord{0, 64, 32, 0.5, 0.95});

    const SavingsReport r = validate_savings(dense, accel, c);
    CHECK(r.exact_match);
    CHECK(r.single_drop);
    CHECK(r.layers_after_drop == 3);
    // (1 - rho) * (L - l1) * per-layer cost, exactly.
    const uint64_t per_layer = layer_flops(SublayerKind::FFN, 64, c);
    CHECK(r.measured_delta == per_layer * 3 / 2);
    CHECK(r.closed_linear_form == r.formula_delta);
    CHECK(r.linear_form_exact);
}

TEST_CASE("attention-only savings ratio at N=4096") {
    ModelConfig c = counting_config();
    c.sublayers_per_block = 7;
    c.layer_pattern.assign(8, SublayerKind::FFN);
    c.layer_pattern[0] = SublayerKind::FullAttention;
    FlopsLedger dense, accel;
    for (int l = 0; l < 8; ++l) {
        dense.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 4096, c);
        accel.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], l == 0 ? 4096 : 2048, c);
    }
    accel.add_drop(DropRecord{0, 4096, 2048, 0.5, 0.9});
    const SavingsReport r = validate_savings(dense, accel, c);
    CHECK(r.layers_after_drop == 7);
    CHECK(r.attention_only_ratio == doctest::Approx(0.875).epsilon(1e-12));
}

TEST_CASE("mismatched ledgers are rejected") {
    const ModelConfig c = counting_config();
    FlopsLedger dense, accel;
    for (int l = 0; l < 4; ++l) {
        dense.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 64, c);
        accel.add_layer(l, c.layer_pattern[static_cast<size_t>(l)], 48, c); // no drop recorded
    }
    CHECK_THROWS_AS(validate_savings(dense, accel, c), ContractViolation);

    FlopsLedger short_ledger;
    short_ledger.add_layer(0, SublayerKind::FullAttention, 64, c);
    CHECK_THROWS_AS(validate_savings(dense, short_ledger, c), ContractViolation);
}

TEST_CASE("the formula matches the measured delta on real multi-drop runs") {
    ModelConfig cfg;
    cfg.num_blocks = 3;
    cfg.sublayers_per_block = 2;
    cfg.layer_pattern = {SublayerKind::FullAttention, SublayerKind::LinearAttention,
                         SublayerKind::FFN};
    cfg.hidden_dim = 32;
    cfg.head_dim = 8;
    cfg.num_heads = 4;
    cfg.window_size = 8;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 64;

    for (uint64_t seed = 0; seed < 4; ++seed) {
        cfg.seed = seed;
        const Model model = build_model(cfg);
        const int64_t n = 96;
        Matrix tokens = random_tokens(n, 32, 500 + seed);
        plant_attractor(model, tokens, 33, 8, 600 + seed);

        ScoreConfig score;
        score.top_p = 0.8f;
        score.block_size_g = 8;
        score.sink_count_a = 8;
        score.query_window_n = 8;
        const PrefillResult accel = accelerated_prefill(model, tokens, score);

        FlopsLedger dense;
        for (int l = 0; l < model.num_layers(); ++l) {
            dense.add_layer(l, model.layer_kind(l), n, cfg);
        }
        const SavingsReport r = validate_savings(dense, accel.ledger, cfg);
        CHECK(r.exact_match);
        CHECK(accel.ledger.total() <= dense.total());
        if (!accel.ledger.drops().empty()) {
            CHECK(accel.ledger.scoring_overhead() > 0);
        }
    }
}

TEST_CASE("lowering top_p never increases the accelerated total") {
    ModelConfig cfg;
    cfg.num_blocks = 2;
    cfg.sublayers_per_block = 2;
    cfg.layer_pattern = {SublayerKind::FullAttention, SublayerKind::FFN, SublayerKind::FFN};
    cfg.hidden_dim = 32;
    cfg.head_dim = 8;
    cfg.num_heads = 4;
    cfg.window_size = 8;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 64;
    cfg.seed = 3;
    const Model model = build_model(cfg);
    const int64_t n = 96;
    Matrix tokens = random_tokens(n, 32, 900);
    plant_attractor(model, tokens, 40, 8, 901);

    uint64_t previous = ~0ull;
    for (float p : {1.0f, 0.99f, 0.9f, 0.7f, 0.5f, 0.2f}) {
        ScoreConfig score;
        score.top_p = p;
        score.block_size_g = 8;
        score.sink_count_a = 8;
        score.query_window_n = 8;
        const PrefillResult result = accelerated_prefill(model, tokens, score);
        CHECK(result.ledger.total() <= previous);
        previous = result.ledger.total();
    }
}
