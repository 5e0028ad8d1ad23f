// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/errors.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/selection.hpp"
#include "uniprefill/tp_sim.hpp"

#include <algorithm>
#include <cmath>

using namespace uniprefill;

namespace {

Matrix random_matrix(int64_t r, int64_t c, uint64_t seed) {
    const CounterRng rng(seed, 0x7470ULL);
    Matrix m(r, c);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.normal(i, 0.6);
    return m;
}

ScoreConfig score_cfg() {
    ScoreConfig c;
    c.query_window_n = 8;
    c.block_size_g = 8;
    c.sink_count_a = 4;
    c.top_p = 0.9f;
    return c;
}

} // namespace

TEST_CASE("a single shard reproduces the unsharded computation exactly") {
    const Matrix q = random_matrix(40, 64, 1);
    const Matrix k = random_matrix(40, 64, 2);
    const auto shards = sharded_block_scores(q, k, 8, score_cfg(), 1);
    REQUIRE(shards.size() == 1);
    const ImportanceScores full = score_tokens(q, k, 8, score_cfg());
    CHECK(shards[0].block_scores == full.block_scores);
}

TEST_CASE("shard partial sums add up to the unsharded scores") {
    const Matrix q = random_matrix(48, 64, 3);
    const Matrix k = random_matrix(48, 64, 4);
    const ImportanceScores full = score_tokens(q, k, 8, score_cfg());
    for (int tp : {2, 4, 8}) {
        const auto shards = sharded_block_scores(q, k, 8, score_cfg(), tp);
        REQUIRE(static_cast<int>(shards.size()) == tp);
        const std::vector<float> reduced = allreduce_scores(shards);
        REQUIRE(reduced.size() == full.block_scores.size());
        for (size_t g = 0; g < reduced.size(); ++g) {
            CHECK(std::fabs(static_cast<double>(reduced[g]) - full.block_scores[g]) < 1e-6);
        }
    }
}

TEST_CASE("one head per shard at T=8") {
    const Matrix q = random_matrix(24, 64, 5);
    const Matrix k = random_matrix(24, 64, 6);
    const auto shards = sharded_block_scores(q, k, 8, score_cfg(), 8);
    REQUIRE(shards.size() == 8);
    for (int t = 0; t < 8; ++t) {
        const ImportanceScores one = score_tokens_heads(q, k, 8, t, t + 1, score_cfg());
        CHECK(shards[static_cast<size_t>(t)].block_scores == one.block_scores);
    }
}

TEST_CASE("allreduce sums elementwise and tolerates shard permutations") {
    std::vector<ShardScores> shards{{0, {1.0f, 2.0f}}, {1, {3.0f, 4.0f}}};
    CHECK(allreduce_scores(shards) == std::vector<float>{4.0f, 6.0f});
    std::swap(shards[0], shards[1]);
    CHECK(allreduce_scores(shards) == std::vector<float>{4.0f, 6.0f});
}

TEST_CASE("all-zero shards reduce to the degenerate keep-all fallback") {
    const std::vector<ShardScores> shards{{0, {0.0f, 0.0f, 0.0f}}, {1, {0.0f, 0.0f, 0.0f}}};
    const std::vector<float> reduced = allreduce_scores(shards);
    const Selection sel = top_p_select(reduced, score_cfg(), 24);
    CHECK(sel.degenerate_keep_all);
    CHECK(sel.retained_count() == 24);
}

TEST_CASE("missing or duplicated shards are contract violations") {
    CHECK_THROWS_AS(allreduce_scores(std::vector<ShardScores>{}), ContractViolation);
    const std::vector<ShardScores> dup{{0, {1.0f}}, {0, {2.0f}}};
    CHECK_THROWS_AS(allreduce_scores(dup), ContractViolation);
    const std::vector<ShardScores> skip{{0, {1.0f}}, {2, {2.0f}}};
    CHECK_THROWS_AS(allreduce_scores(skip), ContractViolation);
    const std::vector<ShardScores> ragged{{0, {1.0f}}, {1, {2.0f, 3.0f}}};
    CHECK_THROWS_AS(allreduce_scores(ragged), ContractViolation);
}

TEST_CASE("head count must divide by the TP degree") {
    const Matrix q = random_matrix(16, 64, 7);
    const Matrix k = random_matrix(16, 64, 8);
    CHECK_THROWS_AS(sharded_block_scores(q, k, 8, score_cfg(), 3), ConfigError);
}

TEST_CASE("the selection is identical for every TP degree") {
    for (uint64_t trial = 0; trial < 25; ++trial) {
        const int64_t n = 16 + static_cast<int64_t>(CounterRng(trial, 1).bits(0) % 120);
        const Matrix q = random_matrix(n, 64, 100 + trial);
        const Matrix k = random_matrix(n, 64, 200 + trial);
        const ScoreConfig cfg = score_cfg();
        std::vector<Selection> selections;
        for (int tp : {1, 2, 4, 8}) {
            const auto shards = sharded_block_scores(q, k, 8, cfg, tp);
            const std::vector<float> reduced = allreduce_scores(shards);
            selections.push_back(top_p_select(reduced, cfg, n));
        }
        for (size_t i = 1; i < selections.size(); ++i) {
            CHECK(selections[i].keep_mask == selections[0].keep_mask);
            CHECK(selections[i].cutoff_rank == selections[0].cutoff_rank);
        }
    }
}

TEST_CASE("fixed-order reduction is bitwise reproducible") {
    const Matrix q = random_matrix(32, 64, 9);
    const Matrix k = random_matrix(32, 64, 10);
    const auto shards = sharded_block_scores(q, k, 8, score_cfg(), 4);
    const std::vector<float> a = allreduce_scores(shards);
    std::vector<ShardScores> reversed(shards.rbegin(), shards.rend());
    const std::vector<float> b = allreduce_scores(reversed);
    CHECK(a == b);
}
