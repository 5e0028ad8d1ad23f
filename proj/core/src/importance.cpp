// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/importance.hpp"

#include "uniprefill/errors.hpp"

#include <cmath>
#include <limits>

namespace uniprefill {

namespace {
constexpr float kMasked = -std::numeric_limits<float>::infinity();
}

Matrix partial_scores(const Matrix& queries, const Matrix& keys) {
    const int64_t n = queries.rows;
    const int64_t N = keys.rows;
    if (n > N) throw ContractViolation("partial_scores: n > N, clamp the query window first");
    if (queries.cols != keys.cols) throw ContractViolation("partial_scores: head dim mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(queries.cols));
    Matrix raw(n, N);
    for (int64_t j = 0; j < n; ++j) {
        const int64_t query_pos = N - n + j;
        for (int64_t i = 0; i < N; ++i) {
            raw.at(j, i) = i > query_pos
                               ? kMasked
                               : static_cast<float>(dot_f32(queries.row(j), keys.row(i), queries.cols) * scale);
        }
    }
    return raw;
}

std::vector<float> online_softmax_reduce(std::span<const Matrix> per_head_raw) {
    if (per_head_raw.empty()) throw ContractViolation("online_softmax_reduce: no heads");
    const int64_t n = per_head_raw[0].rows;
    const int64_t N = per_head_raw[0].cols;
    std::vector<double> acc(static_cast<size_t>(N), 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (const Matrix& raw : per_head_raw) {
        if (raw.rows != n || raw.cols != N) {
            throw ContractViolation("online_softmax_reduce: head shape mismatch");
        }
        for (int64_t j = 0; j < n; ++j) {
            const float* row = raw.row(j);
            // Pass 1: running max and sum of exponentials.
            double max_logit = -std::numeric_limits<double>::infinity();
            double denom = 0.0;
            for (int64_t i = 0; i < N; ++i) {
                const double x = row[i];
                if (x == -std::numeric_limits<double>::infinity()) continue;
                if (x > max_logit) {
                    denom = denom * std::exp(max_logit - x) + 1.0;
                    max_logit = x;
                } else {
                    denom += std::exp(x - max_logit);
                }
            }
            if (denom <= 0.0 || !std::isfinite(max_logit)) {
                throw ContractViolation("online_softmax_reduce: fully masked query row");
            }
            // Pass 2: accumulate normalized weights into per-token scores.
            for (int64_t i = 0; i < N; ++i) {
                const double x = row[i];
                if (x == -std::numeric_limits<double>::infinity()) continue;
                acc[static_cast<size_t>(i)] += std::exp(x - max_logit) / denom * inv_n;
            }
        }
    }
    std::vector<float> out(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) out[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(i)]);
    return out;
}

std::vector<float> block_reduce(std::span<const float> token_scores, int block_size) {
    if (token_scores.empty()) throw ContractViolation("block_reduce: empty scores");
    if (block_size <= 0) throw ContractViolation("block_reduce: block size must be positive");
    const int64_t N = static_cast<int64_t>(token_scores.size());
    const int64_t num_blocks = (N + block_size - 1) / block_size;
    std::vector<float> out(static_cast<size_t>(num_blocks));
    for (int64_t g = 0; g < num_blocks; ++g) {
        const int64_t begin = g * block_size;
        const int64_t end = std::min(N, begin + block_size);
        double sum = 0.0;
        for (int64_t i = begin; i < end; ++i) sum += token_scores[static_cast<size_t>(i)];
        out[static_cast<size_t>(g)] = static_cast<float>(sum / static_cast<double>(end - begin));
    }
    return out;
}

ImportanceScores score_tokens_heads(const Matrix& q, const Matrix& k, int num_heads,
                                    int head_begin, int head_end, const ScoreConfig& config) {
    if (q.cols != k.cols || q.cols % num_heads != 0) {
        throw ContractViolation("score_tokens: bad head layout");
    }
    if (head_begin < 0 || head_end > num_heads || head_begin >= head_end) {
        throw ContractViolation("score_tokens: bad head range");
    }
    const int64_t N = k.rows;
    const int head_dim = static_cast<int>(q.cols) / num_heads;
    const int effective_n = static_cast<int>(std::min<int64_t>(config.query_window_n, N));

    std::vector<Matrix> raw;
    raw.reserve(static_cast<size_t>(head_end - head_begin));
    for (int h = head_begin; h < head_end; ++h) {
        Matrix qh(effective_n, head_dim);
        Matrix kh(N, head_dim);
        const int64_t off = static_cast<int64_t>(h) * head_dim;
        for (int64_t j = 0; j < effective_n; ++j) {
            const float* src = q.row(q.rows - effective_n + j) + off;
            std::copy(src, src + head_dim, qh.row(j));
        }
        for (int64_t i = 0; i < N; ++i) {
            const float* src = k.row(i) + off;
            std::copy(src, src + head_dim, kh.row(i));
        }
        raw.push_back(partial_scores(qh, kh));
    }

    ImportanceScores scores;
    scores.num_tokens = N;
    scores.effective_n = effective_n;
    scores.token_scores = online_softmax_reduce(raw);
    scores.block_scores = block_reduce(scores.token_scores, config.block_size_g);
    return scores;
}

ImportanceScores score_tokens(const Matrix& q, const Matrix& k, int num_heads,
                              const ScoreConfig& config) {
    return score_tokens_heads(q, k, num_heads, 0, num_heads, config);
}

} // namespace uniprefill
