// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/errors.hpp"
#include "uniprefill/importance.hpp"
#include "uniprefill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

using namespace uniprefill;

namespace {

Matrix random_matrix(int64_t r, int64_t c, uint64_t seed) {
    const CounterRng rng(seed, 0x696d70ULL);
    Matrix m(r, c);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.normal(i, 0.7);
    return m;
}

// Dense softmax oracle over the masked raw matrices: materialize each row's
// softmax in double and reduce directly.
std::vector<double> dense_reduce(const std::vector<Matrix>& per_head) {
    const int64_t n = per_head[0].rows;
    const int64_t N = per_head[0].cols;
    std::vector<double> acc(static_cast<size_t>(N), 0.0);
    for (const Matrix& raw : per_head) {
        for (int64_t j = 0; j < n; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t i = 0; i < N; ++i) {
                if (std::isfinite(raw.at(j, i))) mx = std::max(mx, static_cast<double>(raw.at(j, i)));
            }
            double denom = 0.0;
            for (int64_t i = 0; i < N; ++i) {
                if (std::isfinite(raw.at(j, i))) denom += std::exp(raw.at(j, i) - mx);
            }
            for (int64_t i = 0; i < N; ++i) {
                if (std::isfinite(raw.at(j, i))) {
                    acc[static_cast<size_t>(i)] += std::exp(raw.at(j, i) - mx) / denom / static_cast<double>(n);
                }
            }
        }
    }
    return acc;
}

} // namespace

TEST_CASE("partial_scores: zero dot product gives a zero score") {
    Matrix q(1, 4), k(1, 4);
    q.at(0, 0) = 1.0f;
    k.at(0, 1) = 1.0f; // orthogonal
    const Matrix raw = partial_scores(q, k);
    CHECK(raw.rows == 1);
    CHECK(raw.cols == 1);
    CHECK(raw.at(0, 0) == 0.0f);
}

TEST_CASE("partial_scores applies the causal mask inline") {
    const Matrix q = random_matrix(2, 4, 1);
    const Matrix k = random_matrix(3, 4, 2);
    const Matrix raw = partial_scores(q, k);
    // Query row 0 sits at position 1: key 2 is masked.
    CHECK(raw.at(0, 2) == -std::numeric_limits<float>::infinity());
    CHECK(std::isfinite(raw.at(0, 0)));
    CHECK(std::isfinite(raw.at(0, 1)));
    // Query row 1 at position 2 sees everything.
    for (int i = 0; i < 3; ++i) CHECK(std::isfinite(raw.at(1, i)));
}

TEST_CASE("partial_scores rejects n > N") {
    const Matrix q = random_matrix(3, 4, 3);
    const Matrix k = random_matrix(2, 4, 4);
    CHECK_THROWS_AS(partial_scores(q, k), ContractViolation);
}

TEST_CASE("partial_scores matches a naive double-loop GEMM") {
    const Matrix q = random_matrix(4, 8, 7);
    const Matrix k = random_matrix(32, 8, 8);
    const Matrix raw = partial_scores(q, k);
    for (int64_t j = 0; j < 4; ++j) {
        for (int64_t i = 0; i < 32; ++i) {
            if (i > 32 - 4 + j) {
                CHECK(raw.at(j, i) == -std::numeric_limits<float>::infinity());
                continue;
            }
            double dot = 0.0;
            for (int c = 0; c < 8; ++c) dot += static_cast<double>(q.at(j, c)) * k.at(i, c);
            CHECK(raw.at(j, i) == doctest::Approx(dot / std::sqrt(8.0)).epsilon(1e-6));
        }
    }
}

TEST_CASE("online softmax: singleton and uniform rows") {
    Matrix one(1, 1);
    one.at(0, 0) = 3.25f;
    const std::vector<float> single = online_softmax_reduce(std::vector<Matrix>{one});
    CHECK(single.size() == 1);
    CHECK(single[0] == doctest::Approx(1.0));

    Matrix flat(1, 4); // all zeros
    const std::vector<float> uniform = online_softmax_reduce(std::vector<Matrix>{flat});
    for (float s : uniform) CHECK(s == doctest::Approx(0.25));
}

TEST_CASE("online softmax equals the dense oracle and conserves mass") {
    std::vector<Matrix> heads;
    for (int h = 0; h < 2; ++h) {
        Matrix q = random_matrix(3, 8, 100 + static_cast<uint64_t>(h));
        Matrix k = random_matrix(20, 8, 200 + static_cast<uint64_t>(h));
        heads.push_back(partial_scores(q, k));
    }
    const std::vector<float> got = online_softmax_reduce(heads);
    const std::vector<double> want = dense_reduce(heads);
    double total = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        CHECK(std::fabs(static_cast<double>(got[i]) - want[i]) < 1e-6);
        total += got[i];
    }
    CHECK(total == doctest::Approx(2.0).epsilon(1e-5)); // one unit of mass per head
}

TEST_CASE("online/dense equivalence holds up to N=4096") {
    for (const int64_t n_keys : {3LL, 64LL, 1000LL, 4096LL}) {
        const int64_t n_queries = std::min<int64_t>(16, n_keys);
        std::vector<Matrix> heads;
        heads.push_back(partial_scores(random_matrix(n_queries, 8, 300 + static_cast<uint64_t>(n_keys)),
                                       random_matrix(n_keys, 8, 400 + static_cast<uint64_t>(n_keys))));
        const std::vector<float> got = online_softmax_reduce(heads);
        const std::vector<double> want = dense_reduce(heads);
        double worst = 0.0;
        for (size_t i = 0; i < got.size(); ++i) {
            worst = std::max(worst, std::fabs(static_cast<double>(got[i]) - want[i]));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("fully masked row is a contract violation") {
    Matrix raw(1, 2);
    raw.at(0, 0) = -std::numeric_limits<float>::infinity();
    raw.at(0, 1) = -std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(online_softmax_reduce(std::vector<Matrix>{raw}), ContractViolation);
}

TEST_CASE("block_reduce takes plain and ragged means") {
    const std::vector<float> even{1, 3, 5, 7};
    const std::vector<float> out_even = block_reduce(even, 2);
    CHECK(out_even == std::vector<float>{2, 6});

    const std::vector<float> ragged{1, 3, 5, 7, 9};
    const std::vector<float> out_ragged = block_reduce(ragged, 2);
    CHECK(out_ragged == std::vector<float>{2, 6, 9});
}

TEST_CASE("block scores conserve token mass at G=64") {
    const CounterRng rng(77, 1);
    std::vector<float> token_scores(200);
    double direct = 0.0;
    for (size_t i = 0; i < token_scores.size(); ++i) {
        token_scores[i] = static_cast<float>(rng.uniform(i));
        direct += token_scores[i];
    }
    const std::vector<float> blocks = block_reduce(token_scores, 64);
    CHECK(blocks.size() == 4);
    double mass = 0.0;
    for (size_t g = 0; g < blocks.size(); ++g) {
        const size_t members = std::min<size_t>(64, token_scores.size() - g * 64);
        mass += static_cast<double>(blocks[g]) * static_cast<double>(members);
    }
    CHECK(std::fabs(mass - direct) < 1e-6 * std::max(1.0, direct));
}

TEST_CASE("permuting key columns permutes token scores identically") {
    Matrix raw = partial_scores(random_matrix(4, 8, 500), random_matrix(12, 8, 501));
    const std::vector<float> base = online_softmax_reduce(std::vector<Matrix>{raw});

    std::vector<int64_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    Matrix shuffled(raw.rows, raw.cols);
    for (int64_t j = 0; j < raw.rows; ++j) {
        for (int64_t i = 0; i < raw.cols; ++i) shuffled.at(j, perm[static_cast<size_t>(i)]) = raw.at(j, i);
    }
    const std::vector<float> moved = online_softmax_reduce(std::vector<Matrix>{shuffled});
    for (int64_t i = 0; i < 12; ++i) {
        CHECK(moved[static_cast<size_t>(perm[static_cast<size_t>(i)])] ==
              doctest::Approx(base[static_cast<size_t>(i)]).epsilon(1e-7));
    }
}

TEST_CASE("score_tokens clamps the query window to the stream length") {
    ScoreConfig cfg;
    cfg.query_window_n = 128;
    cfg.block_size_g = 4;
    const Matrix q = random_matrix(10, 16, 600);
    const Matrix k = random_matrix(10, 16, 601);
    const ImportanceScores scores = score_tokens(q, k, 2, cfg);
    CHECK(scores.effective_n == 10);
    CHECK(scores.num_tokens == 10);
    CHECK(scores.block_scores.size() == 3);
    double total = 0.0;
    for (float s : scores.token_scores) {
        CHECK(s >= 0.0f);
        total += s;
    }
    CHECK(total == doctest::Approx(2.0).epsilon(1e-5));
}
