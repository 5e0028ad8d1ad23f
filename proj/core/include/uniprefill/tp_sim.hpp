// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <span>
#include <vector>

#include "uniprefill/config.hpp"
#include "uniprefill/importance.hpp"
#include "uniprefill/tensor.hpp"

namespace uniprefill {

/// Partial block scores computed from one shard's contiguous slice of heads.
struct ShardScores {
    int shard_id = 0;
    std::vector<float> block_scores;
};

/// Shard the attention heads into tp_degree groups and score each group
/// independently: shard t covers heads [t*H/T, (t+1)*H/T). q/k are
/// rows x hidden with head-blocked columns, already position-rotated.
/// Throws ConfigError when num_heads is not divisible by tp_degree.
std::vector<ShardScores> sharded_block_scores(const Matrix& q, const Matrix& k, int num_heads,
                                              const ScoreConfig& config, int tp_degree);

/// Elementwise sum in ascending shard id order (bitwise stable regardless of
/// the order shards are handed in). Throws ContractViolation when a shard is
/// missing, duplicated, or lengths disagree.
std::vector<float> allreduce_scores(std::span<const ShardScores> shards);

} // namespace uniprefill
