// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace uniprefill {

/// Kinds a sublayer can take. Every layer of a model is exactly one kind.
enum class SublayerKind {
    FullAttention,
    SlidingWindowAttention,
    LinearAttention,
    FFN,
};

const char* to_string(SublayerKind kind);
SublayerKind sublayer_kind_from_string(const std::string& name);

/// Toy hybrid transformer shape. A model is num_blocks repetitions of
/// layer_pattern; the pattern's first entry must be FullAttention so every
/// block opens with a scoring-capable layer.
struct ModelConfig {
    int num_blocks = 2;
    int sublayers_per_block = 3;
    std::vector<SublayerKind> layer_pattern;
    int hidden_dim = 64;
    int head_dim = 8;
    int num_heads = 8;
    int window_size = 16;
    int ffn_dim = 128;
    int vocab_size = 256;
    uint64_t seed = 0;

    int pattern_length() const { return 1 + sublayers_per_block; }
    int total_layers() const { return num_blocks * pattern_length(); }

    /// Throws ConfigError naming the violated invariant.
    void validate() const;

    static ModelConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

/// Importance-estimation and selection knobs. Defaults follow the reference
/// operating point: last n=128 queries, G=64 token blocks, 128 sink tokens,
/// top-p 0.99.
struct ScoreConfig {
    int query_window_n = 128;
    int block_size_g = 64;
    int sink_count_a = 128;
    float top_p = 0.99f;

    void validate() const;

    static ScoreConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

} // namespace uniprefill
