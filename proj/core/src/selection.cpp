// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/selection.hpp"

#include "uniprefill/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace uniprefill {

uint32_t phi_encode(float x) {
    if (!std::isfinite(x)) throw ContractViolation("phi_encode: input must be finite");
    if (x == 0.0f) x = 0.0f; // collapse -0.0 onto +0.0
    const uint32_t bits = std::bit_cast<uint32_t>(x);
    return x >= 0.0f ? bits ^ 0x80000000u : bits ^ 0xFFFFFFFFu;
}

float phi_decode(uint32_t bits) {
    // High bit set means the original float was non-negative.
    const uint32_t raw = (bits & 0x80000000u) ? bits ^ 0x80000000u : bits ^ 0xFFFFFFFFu;
    return std::bit_cast<float>(raw);
}

PackedScore PackedScore::pack(float score, uint32_t block_index) {
    return PackedScore{(static_cast<uint64_t>(phi_encode(score)) << 32) |
                       static_cast<uint64_t>(~block_index)};
}

float PackedScore::score() const { return phi_decode(static_cast<uint32_t>(word >> 32)); }

uint32_t PackedScore::block_index() const { return ~static_cast<uint32_t>(word & 0xFFFFFFFFu); }

std::vector<uint8_t> expand_mask(const std::vector<uint8_t>& block_mask, int block_size,
                                 int64_t num_tokens, int64_t sink_count, int64_t window_n) {
    const int64_t expected_blocks = (num_tokens + block_size - 1) / block_size;
    if (static_cast<int64_t>(block_mask.size()) != expected_blocks) {
        throw ContractViolation("expand_mask: block mask length must be ceil(N/G)");
    }
    std::vector<uint8_t> keep(static_cast<size_t>(num_tokens), 0);
    for (int64_t i = 0; i < num_tokens; ++i) {
        const bool block_kept = block_mask[static_cast<size_t>(i / block_size)] != 0;
        keep[static_cast<size_t>(i)] =
            (block_kept || i < sink_count || i >= num_tokens - window_n) ? 1 : 0;
    }
    return keep;
}

Selection top_p_select(std::span<const float> block_scores, const ScoreConfig& config,
                       int64_t num_tokens) {
    config.validate();
    if (num_tokens < 1) throw ContractViolation("top_p_select: num_tokens must be positive");
    const int G = config.block_size_g;
    const int64_t num_blocks = (num_tokens + G - 1) / G;
    if (static_cast<int64_t>(block_scores.size()) != num_blocks) {
        throw ContractViolation("top_p_select: block score length must be ceil(N/G)");
    }

    double total = 0.0;
    for (float s : block_scores) {
        if (!(s >= 0.0f) || !std::isfinite(s)) {
            throw ContractViolation("top_p_select: block scores must be finite and non-negative");
        }
        total += s;
    }

    const int64_t effective_n = std::min<int64_t>(config.query_window_n, num_tokens);
    Selection sel;

    std::vector<uint8_t> block_mask(static_cast<size_t>(num_blocks), 0);
    if (total <= 0.0) {
        sel.degenerate_keep_all = true;
        sel.cutoff_rank = num_blocks;
        std::fill(block_mask.begin(), block_mask.end(), 1);
    } else {
        std::vector<uint64_t> packed(static_cast<size_t>(num_blocks));
        for (int64_t g = 0; g < num_blocks; ++g) {
            packed[static_cast<size_t>(g)] =
                PackedScore::pack(block_scores[static_cast<size_t>(g)], static_cast<uint32_t>(g)).word;
        }
        std::sort(packed.begin(), packed.end(), std::greater<uint64_t>());
        double cumulative = 0.0;
        int64_t k_star = 0;
        const double threshold = static_cast<double>(config.top_p);
        for (int64_t rank = 0; rank < num_blocks; ++rank) {
            const PackedScore ps{packed[static_cast<size_t>(rank)]};
            cumulative += static_cast<double>(ps.score());
            block_mask[ps.block_index()] = 1;
            k_star = rank + 1;
            if (cumulative / total >= threshold) break;
        }
        sel.cutoff_rank = k_star;
    }

    sel.keep_mask = expand_mask(block_mask, G, num_tokens, config.sink_count_a, effective_n);
    for (int64_t i = 0; i < num_tokens; ++i) {
        if (sel.keep_mask[static_cast<size_t>(i)]) sel.retained_indices.push_back(i);
    }
    sel.retention_ratio =
        static_cast<double>(sel.retained_indices.size()) / static_cast<double>(num_tokens);

    if (sel.degenerate_keep_all || total <= 0.0) {
        sel.covered_mass = 1.0;
    } else {
        // Token-level attribution: each kept token carries its block's mean
        // score, so a fully kept block contributes its Eq-style mass and a
        // partially forced block contributes its kept fraction.
        double covered = 0.0;
        for (int64_t g = 0; g < num_blocks; ++g) {
            const int64_t begin = g * G;
            const int64_t end = std::min<int64_t>(num_tokens, begin + G);
            int64_t kept = 0;
            for (int64_t i = begin; i < end; ++i) kept += sel.keep_mask[static_cast<size_t>(i)];
            covered += static_cast<double>(block_scores[static_cast<size_t>(g)]) *
                       (static_cast<double>(kept) / static_cast<double>(end - begin));
        }
        sel.covered_mass = covered / total;
    }
    return sel;
}

} // namespace uniprefill
