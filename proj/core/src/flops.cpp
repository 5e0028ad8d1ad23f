// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/flops.hpp"

#include "uniprefill/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace uniprefill {

uint64_t layer_flops(SublayerKind kind, int64_t tokens, const ModelConfig& config) {
    if (tokens < 0) throw ContractViolation("layer_flops: negative token count");
    if (tokens == 0) return 0;
    const uint64_t n = static_cast<uint64_t>(tokens);
    const uint64_t d = static_cast<uint64_t>(config.hidden_dim);
    const uint64_t dk = static_cast<uint64_t>(config.head_dim);
    const uint64_t heads = static_cast<uint64_t>(config.num_heads);
    const uint64_t proj = 8 * n * d * d; // QKVO GEMMs
    switch (kind) {
    case SublayerKind::FullAttention:
        return 2 * n * n * dk * heads + proj;
    case SublayerKind::SlidingWindowAttention:
        return 2 * n * std::min(n, static_cast<uint64_t>(config.window_size)) * dk * heads + proj;
    case SublayerKind::LinearAttention:
        return 2 * n * dk * dk * heads + proj;
    case SublayerKind::FFN:
        return 4 * n * d * static_cast<uint64_t>(config.ffn_dim);
    }
    throw ContractViolation("layer_flops: unknown kind");
}

uint64_t scoring_flops(int64_t effective_n, int64_t num_keys, const ModelConfig& config) {
    if (effective_n < 0 || num_keys < 0) throw ContractViolation("scoring_flops: negative count");
    return 2 * static_cast<uint64_t>(effective_n) * static_cast<uint64_t>(num_keys) *
           static_cast<uint64_t>(config.head_dim) * static_cast<uint64_t>(config.num_heads);
}

void FlopsLedger::add_layer(int layer, SublayerKind kind, int64_t tokens,
                            const ModelConfig& config) {
    entries_.push_back(LayerFlopsEntry{layer, kind, tokens, layer_flops(kind, tokens, config)});
}

void FlopsLedger::add_drop(DropRecord record) { drops_.push_back(std::move(record)); }

void FlopsLedger::merge(const FlopsLedger& other) {
    entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
    drops_.insert(drops_.end(), other.drops_.begin(), other.drops_.end());
    scoring_overhead_ += other.scoring_overhead_;
}

uint64_t FlopsLedger::total() const {
    uint64_t t = 0;
    for (const LayerFlopsEntry& e : entries_) t += e.flops;
    return t;
}

SavingsReport validate_savings(const FlopsLedger& dense, const FlopsLedger& accel,
                               const ModelConfig& config) {
    const int total_layers = config.total_layers();
    if (static_cast<int>(dense.entries().size()) != total_layers ||
        static_cast<int>(accel.entries().size()) != total_layers) {
        throw ContractViolation("validate_savings: ledgers must cover every layer exactly once");
    }
    if (!dense.drops().empty()) {
        throw ContractViolation("validate_savings: dense ledger must not contain drop events");
    }
    const int64_t original = dense.entries()[0].tokens;
    for (int l = 0; l < total_layers; ++l) {
        const LayerFlopsEntry& de = dense.entries()[static_cast<size_t>(l)];
        const LayerFlopsEntry& ae = accel.entries()[static_cast<size_t>(l)];
        if (de.layer != l || ae.layer != l || de.kind != ae.kind || de.tokens != original) {
            throw ContractViolation("validate_savings: mismatched run identities");
        }
    }

    // Replay the drop history against the accelerated ledger's entry counts.
    const int pattern = config.pattern_length();
    size_t next_drop = 0;
    int64_t current = original;
    for (int l = 0; l < total_layers; ++l) {
        if (accel.entries()[static_cast<size_t>(l)].tokens != current) {
            throw ContractViolation("validate_savings: per-layer token counts disagree with history");
        }
        if (next_drop < accel.drops().size() && accel.drops()[next_drop].layer == l) {
            const DropRecord& d = accel.drops()[next_drop];
            if (d.tokens_before != current) {
                throw ContractViolation("validate_savings: drop record inconsistent with stream");
            }
            current = d.tokens_after;
            ++next_drop;
        }
        if ((l + 1) % pattern == 0) current = original; // reconstitution boundary
    }
    if (next_drop != accel.drops().size()) {
        throw ContractViolation("validate_savings: drop layers out of order");
    }

    SavingsReport rep;
    rep.dense_total = dense.total();
    rep.accel_total = accel.total();
    rep.scoring_overhead = accel.scoring_overhead();
    rep.measured_delta = rep.dense_total - rep.accel_total;

    // Formula side: each drop is credited with the downstream cost difference
    // between its pre- and post-drop counts, up to the reconstitution
    // boundary of its block. Credits telescope across stacked drops.
    uint64_t formula = 0;
    for (const DropRecord& d : accel.drops()) {
        const int sweep_end = (d.layer / pattern + 1) * pattern - 1;
        for (int l = d.layer + 1; l <= sweep_end; ++l) {
            const SublayerKind kind = dense.entries()[static_cast<size_t>(l)].kind;
            formula += layer_flops(kind, d.tokens_before, config) -
                       layer_flops(kind, d.tokens_after, config);
        }
    }
    rep.formula_delta = formula;
    rep.exact_match = rep.formula_delta == rep.measured_delta;

    if (accel.drops().size() == 1) {
        const DropRecord& d = accel.drops()[0];
        rep.single_drop = true;
        rep.retention_ratio = d.retention_ratio;
        rep.drop_layer = d.layer;
        const int sweep_end = (d.layer / pattern + 1) * pattern - 1;
        rep.layers_after_drop = sweep_end - d.layer;
        uint64_t downstream_dense = 0;
        for (int l = d.layer + 1; l <= sweep_end; ++l) {
            downstream_dense +=
                layer_flops(dense.entries()[static_cast<size_t>(l)].kind, d.tokens_before, config);
        }
        rep.closed_linear_form = static_cast<uint64_t>(
            std::llround((1.0 - d.retention_ratio) * static_cast<double>(downstream_dense)));
        rep.linear_form_exact = rep.closed_linear_form == rep.formula_delta;
        const double n = static_cast<double>(original);
        rep.attention_only_ratio = static_cast<double>(rep.layers_after_drop) * n *
                                   static_cast<double>(config.hidden_dim) *
                                   static_cast<double>(config.hidden_dim) /
                                   (n * n * static_cast<double>(config.head_dim));
    }
    return rep;
}

std::string SavingsReport::to_text() const {
    std::ostringstream os;
    os << "dense=" << dense_total << " accel=" << accel_total
       << " scoring_overhead=" << scoring_overhead << " delta=" << measured_delta
       << " formula=" << formula_delta << (exact_match ? " [exact]" : " [MISMATCH]");
    if (single_drop) {
        os << " single_drop{layer=" << drop_layer << " rho=" << retention_ratio
           << " downstream_layers=" << layers_after_drop
           << " linear_form=" << closed_linear_form
           << (linear_form_exact ? " exact" : " approx")
           << " attention_only_ratio=" << attention_only_ratio << "}";
    }
    return os.str();
}

} // namespace uniprefill
