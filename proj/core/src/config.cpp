// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/config.hpp"

#include "uniprefill/errors.hpp"

#include <sstream>

namespace uniprefill {

const char* to_string(SublayerKind kind) {
    switch (kind) {
    case SublayerKind::FullAttention: return "FullAttention";
    case SublayerKind::SlidingWindowAttention: return "SlidingWindowAttention";
    case SublayerKind::LinearAttention: return "LinearAttention";
    case SublayerKind::FFN: return "FFN";
    }
    return "?";
}

SublayerKind sublayer_kind_from_string(const std::string& name) {
    if (name == "FullAttention") return SublayerKind::FullAttention;
    if (name == "SlidingWindowAttention") return SublayerKind::SlidingWindowAttention;
    if (name == "LinearAttention") return SublayerKind::LinearAttention;
    if (name == "FFN") return SublayerKind::FFN;
    throw ConfigError("unknown sublayer kind: " + name);
}

void ModelConfig::validate() const {
    if (num_blocks <= 0) throw ConfigError("num_blocks must be positive");
    if (sublayers_per_block <= 0) throw ConfigError("sublayers_per_block must be positive");
    if (hidden_dim <= 0) throw ConfigError("hidden_dim must be positive");
    if (head_dim <= 0) throw ConfigError("head_dim must be positive");
    if (num_heads <= 0) throw ConfigError("num_heads must be positive");
    if (window_size <= 0) throw ConfigError("window_size must be positive");
    if (ffn_dim <= 0) throw ConfigError("ffn_dim must be positive");
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (num_heads * head_dim != hidden_dim) {
        std::ostringstream os;
        os << "hidden_dim must equal num_heads * head_dim (" << hidden_dim
           << " != " << num_heads << " * " << head_dim << ")";
        throw ConfigError(os.str());
    }
    if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary embeddings");
    if (layer_pattern.empty()) throw ConfigError("layer_pattern must not be empty");
    if (static_cast<int>(layer_pattern.size()) != pattern_length()) {
        std::ostringstream os;
        os << "layer_pattern length must equal 1 + sublayers_per_block ("
           << layer_pattern.size() << " != " << pattern_length() << ")";
        throw ConfigError(os.str());
    }
    if (layer_pattern[0] != SublayerKind::FullAttention) {
        throw ConfigError("layer_pattern[0] must be FullAttention for every block");
    }
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.num_blocks = j.at("num_blocks").get<int>();
        c.sublayers_per_block = j.at("sublayers_per_block").get<int>();
        c.layer_pattern.clear();
        for (const auto& k : j.at("layer_pattern")) {
            c.layer_pattern.push_back(sublayer_kind_from_string(k.get<std::string>()));
        }
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.head_dim = j.at("head_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.window_size = j.at("window_size").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config document: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::ordered_json ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["num_blocks"] = num_blocks;
    j["sublayers_per_block"] = sublayers_per_block;
    auto pattern = nlohmann::ordered_json::array();
    for (SublayerKind k : layer_pattern) pattern.push_back(to_string(k));
    j["layer_pattern"] = pattern;
    j["hidden_dim"] = hidden_dim;
    j["head_dim"] = head_dim;
    j["num_heads"] = num_heads;
    j["window_size"] = window_size;
    j["ffn_dim"] = ffn_dim;
    j["vocab_size"] = vocab_size;
    j["seed"] = seed;
    return j;
}

void ScoreConfig::validate() const {
    if (query_window_n <= 0) throw ConfigError("query_window_n must be positive");
    if (block_size_g <= 0) throw ConfigError("block_size_g must be positive");
    if (sink_count_a < 0) throw ConfigError("sink_count_a must be non-negative");
    if (!(top_p > 0.0f && top_p <= 1.0f)) throw ConfigError("top_p must lie in (0, 1]");
}

ScoreConfig ScoreConfig::from_json(const nlohmann::json& j) {
    ScoreConfig c;
    try {
        c.query_window_n = j.at("query_window_n").get<int>();
        c.block_size_g = j.at("block_size_g").get<int>();
        c.sink_count_a = j.at("sink_count_a").get<int>();
        c.top_p = j.at("top_p").get<float>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad score config document: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::ordered_json ScoreConfig::to_json() const {
    nlohmann::ordered_json j;
    j["query_window_n"] = query_window_n;
    j["block_size_g"] = block_size_g;
    j["sink_count_a"] = sink_count_a;
    j["top_p"] = top_p;
    return j;
}

} // namespace uniprefill
