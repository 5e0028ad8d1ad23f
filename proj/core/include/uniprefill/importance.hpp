// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <span>
#include <vector>

#include "uniprefill/config.hpp"
#include "uniprefill/tensor.hpp"

namespace uniprefill {

/// Per-token and per-block importance at one full-attention layer.
/// token_scores[i] is the attention mass on token i averaged over the query
/// window and summed across heads; block_scores[g] is the mean of token
/// scores over block g's members (ragged tail averages over its actual size).
struct ImportanceScores {
    std::vector<float> token_scores;
    std::vector<float> block_scores;
    int64_t num_tokens = 0;
    int effective_n = 0;
};

/// Raw n x N score matrix for one head: S = Q_tail K^T / sqrt(d_k) with the
/// causal mask applied inline. Entry (j, i) is -inf when key i exceeds query
/// position N - n + j. Rejects n > N.
Matrix partial_scores(const Matrix& queries, const Matrix& keys);

/// Streaming two-pass softmax over the full key dimension of each query row,
/// averaged over the n rows and summed across heads. Each row must have at
/// least one unmasked entry. Matches a dense softmax to 1e-6.
std::vector<float> online_softmax_reduce(std::span<const Matrix> per_head_raw);

/// Block g's score is the mean over its members; the final ragged block
/// averages over its actual member count.
std::vector<float> block_reduce(std::span<const float> token_scores, int block_size);

/// Full scoring pipeline for head range [head_begin, head_end): take the last
/// min(n, N) query rows, mask, softmax-reduce, block-reduce. q/k are
/// rows x hidden with head-blocked columns, already position-rotated.
ImportanceScores score_tokens_heads(const Matrix& q, const Matrix& k, int num_heads,
                                    int head_begin, int head_end, const ScoreConfig& config);

/// All heads.
ImportanceScores score_tokens(const Matrix& q, const Matrix& k, int num_heads,
                              const ScoreConfig& config);

} // namespace uniprefill
