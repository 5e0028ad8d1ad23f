// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/tp_sim.hpp"

#include "uniprefill/errors.hpp"

#include <algorithm>

namespace uniprefill {

std::vector<ShardScores> sharded_block_scores(const Matrix& q, const Matrix& k, int num_heads,
                                              const ScoreConfig& config, int tp_degree) {
    if (tp_degree <= 0) throw ConfigError("tp_degree must be positive");
    if (num_heads % tp_degree != 0) {
        throw ConfigError("num_heads must be divisible by tp_degree");
    }
    const int heads_per_shard = num_heads / tp_degree;
    std::vector<ShardScores> shards;
    shards.reserve(static_cast<size_t>(tp_degree));
    for (int t = 0; t < tp_degree; ++t) {
        const ImportanceScores scores = score_tokens_heads(
            q, k, num_heads, t * heads_per_shard, (t + 1) * heads_per_shard, config);
        shards.push_back(ShardScores{t, scores.block_scores});
    }
    return shards;
}

std::vector<float> allreduce_scores(std::span<const ShardScores> shards) {
    if (shards.empty()) throw ContractViolation("allreduce_scores: no shards");
    const size_t length = shards[0].block_scores.size();
    const int tp = static_cast<int>(shards.size());
    std::vector<const ShardScores*> by_id(shards.size(), nullptr);
    for (const ShardScores& s : shards) {
        if (s.shard_id < 0 || s.shard_id >= tp || by_id[static_cast<size_t>(s.shard_id)] != nullptr) {
            throw ContractViolation("allreduce_scores: shard ids must be exactly 0..T-1");
        }
        if (s.block_scores.size() != length) {
            throw ContractViolation("allreduce_scores: shard length mismatch");
        }
        by_id[static_cast<size_t>(s.shard_id)] = &s;
    }
    std::vector<float> reduced(length, 0.0f);
    for (int t = 0; t < tp; ++t) {
        const std::vector<float>& b = by_id[static_cast<size_t>(t)]->block_scores;
        for (size_t g = 0; g < length; ++g) reduced[g] += b[g];
    }
    return reduced;
}

} // namespace uniprefill
