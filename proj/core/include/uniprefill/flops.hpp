// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uniprefill/config.hpp"

namespace uniprefill {

/// Analytic per-layer cost at a given token count. Constants:
///   full attention: 2*n^2*d_k per head, plus 8*n*d^2 QKVO projections
///   sliding window: 2*n*min(n,w)*d_k per head, plus projections
///   linear attention: 2*n*d_k*d_v per head state update, plus projections
///   FFN: 4*n*d*ffn_dim
/// Counts are exact integers, not hardware measurements.
uint64_t layer_flops(SublayerKind kind, int64_t tokens, const ModelConfig& config);

/// Cost of the importance-estimation pipeline at one drop event: the partial
/// GEMM 2*n*N*d_k per head. Counted separately so net savings stay honest.
uint64_t scoring_flops(int64_t effective_n, int64_t num_keys, const ModelConfig& config);

struct LayerFlopsEntry {
    int layer = 0;
    SublayerKind kind = SublayerKind::FFN;
    int64_t tokens = 0;   // token count the layer entered with
    uint64_t flops = 0;
};

struct DropRecord {
    int layer = 0;
    int64_t tokens_before = 0;
    int64_t tokens_after = 0;
    double retention_ratio = 1.0; // tokens_after / tokens_before
    double covered_mass = 1.0;
};

/// Per-request analytic FLOPs ledger. Layers are charged at the token count
/// they entered with; a drop at layer l only reduces the charge of layers
/// strictly after l, matching the formula's sum over downstream layers.
class FlopsLedger {
public:
    void add_layer(int layer, SublayerKind kind, int64_t tokens, const ModelConfig& config);
    void add_drop(DropRecord record);
    void add_scoring(uint64_t flops) { scoring_overhead_ += flops; }
    void merge(const FlopsLedger& other);

    uint64_t total() const;
    uint64_t scoring_overhead() const { return scoring_overhead_; }
    const std::vector<LayerFlopsEntry>& entries() const { return entries_; }
    const std::vector<DropRecord>& drops() const { return drops_; }

private:
    std::vector<LayerFlopsEntry> entries_;
    std::vector<DropRecord> drops_;
    uint64_t scoring_overhead_ = 0;
};

struct SavingsReport {
    uint64_t dense_total = 0;
    uint64_t accel_total = 0;
    uint64_t scoring_overhead = 0;
    uint64_t measured_delta = 0;   // dense_total - accel_total
    uint64_t formula_delta = 0;    // drop-history formula, composed across drops
    bool exact_match = false;
    // Single-drop extras.
    bool single_drop = false;
    double retention_ratio = 1.0;
    int drop_layer = -1;
    int layers_after_drop = 0;
    uint64_t closed_linear_form = 0;   // (1 - rho) * sum of downstream dense costs
    bool linear_form_exact = false;
    double attention_only_ratio = 0.0; // (L - l1) * N * d^2 / (N^2 * d_k)
    std::string to_text() const;
};

/// Cross-check measured savings against the drop-history formula. The formula
/// side attributes, to each drop, the downstream cost difference between the
/// pre-drop and post-drop token counts up to the next reconstitution; summed
/// over drops this telescopes to the exact dense-minus-accelerated delta.
/// Throws ContractViolation when the two ledgers do not describe the same
/// (model, input) run.
SavingsReport validate_savings(const FlopsLedger& dense, const FlopsLedger& accel,
                               const ModelConfig& config);

} // namespace uniprefill
