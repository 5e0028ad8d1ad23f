// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uniprefill/config.hpp"

namespace uniprefill {

/// Order-preserving bitcast of a finite float: unsigned comparison of the
/// encodings matches float comparison. -0.0 is canonicalized to +0.0 so equal
/// floats always encode equally. Throws ContractViolation on NaN/inf.
uint32_t phi_encode(float x);

/// Exact inverse of phi_encode.
float phi_decode(uint32_t bits);

/// (score, block index) packed into one 64-bit word. Descending word order
/// equals descending score order with the lower block index winning ties;
/// the low half stores the ones' complement of the index to get that order.
struct PackedScore {
    uint64_t word = 0;

    static PackedScore pack(float score, uint32_t block_index);
    float score() const;
    uint32_t block_index() const;
};

/// Result of one drop decision over a stream of num_tokens rows.
struct Selection {
    std::vector<uint8_t> keep_mask;        // length num_tokens
    std::vector<int64_t> retained_indices; // sorted kept row indices
    double retention_ratio = 1.0;          // |retained| / num_tokens
    double covered_mass = 1.0;             // retained fraction of block score mass
    int64_t cutoff_rank = 0;               // score-selected block count (k*)
    bool degenerate_keep_all = false;      // zero total mass fallback

    int64_t num_tokens() const { return static_cast<int64_t>(keep_mask.size()); }
    int64_t retained_count() const { return static_cast<int64_t>(retained_indices.size()); }
};

/// Lift a block mask to token granularity: token i kept iff its block is kept
/// OR i < sink_count OR i >= num_tokens - window_n.
std::vector<uint8_t> expand_mask(const std::vector<uint8_t>& block_mask, int block_size,
                                 int64_t num_tokens, int64_t sink_count, int64_t window_n);

/// Top-p sort-and-threshold over block scores: pack, sort descending, keep
/// the smallest prefix whose cumulative score fraction reaches top_p, expand
/// to tokens, then force sinks and the query window. covered_mass is
/// recomputed on the final mask (forced tokens add mass). Zero total mass
/// degenerates to keep-all with the flag set.
Selection top_p_select(std::span<const float> block_scores, const ScoreConfig& config,
                       int64_t num_tokens);

} // namespace uniprefill
