// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "uniprefill/model.hpp"
#include "uniprefill/propagation.hpp"

namespace uniprefill {

/// Drop-layer comparison for the retained query-window rows (the rows whose
/// attention the selection's covered mass summarizes).
///
/// The bound (1 - covered_mass) * V_max governs the dropped attention
/// contribution: per (row, head), the removed readout term is at most the
/// row's dropped softmax mass times the largest per-head value norm, and the
/// dropped masses average to exactly 1 - covered_mass over the window. Both
/// forms are checked: per (row, head) against the row's own dropped mass, and
/// the window mean against the covered-mass bound. The worst renormalized
/// forward difference is reported alongside as a diagnostic; individual rows
/// can see several times the average dropped mass, so no per-row statement
/// follows from the event-level scalar.
struct DropEventErrorReport {
    double covered_mass = 1.0;   // retained fraction of token score mass
    double v_max = 0.0;          // max per-head value-row norm at the drop layer
    double measured_mean_perturbation = 0.0; // mean removed readout term, per (row, head)
    double measured_max_perturbation = 0.0;  // max renormalized forward diff (diagnostic)
    double bound = 0.0;          // (1 - covered_mass) * v_max
    bool within_bound = true;    // mean <= bound + 1e-5 and every per-row mass check
    int64_t num_tokens = 0;
    int64_t retained = 0;
    int64_t dropped = 0;
};

/// Block-level extension: both paths carried through the remaining sublayers
/// of the drop layer's block. The product bound is reported, not asserted;
/// per-sublayer constants are empirical amplification estimates.
struct BlockErrorReport {
    std::vector<double> sublayer_lipschitz;
    double lipschitz_product = 1.0;
    double end_of_block_error = 0.0;
    double product_bound = 0.0; // (1 - covered_mass) * V_max * prod(L_m)
};

struct ErrorBoundReport {
    DropEventErrorReport drop;
    std::optional<BlockErrorReport> block;
};

/// Readout-level comparison on explicit q/k/v (single attention layer, no
/// model needed). keep[i] marks retained KV rows; every row of `queries` is
/// measured, attending causally. covered_mass comes from the caller's
/// selection.
DropEventErrorReport measure_readout_drop_error(const Matrix& queries,
                                                std::span<const int64_t> query_pos,
                                                const Matrix& k, const Matrix& v,
                                                std::span<const int64_t> kv_pos,
                                                const std::vector<uint8_t>& keep, int num_heads,
                                                double covered_mass);

/// Empirical amplification of one sublayer at the given operating point:
/// max over `probes` random unit Frobenius perturbations of
/// |f(x + delta) - f(x)|_F / |delta|_F.
double estimate_sublayer_lipschitz(const Model& model, int layer, const Matrix& base_states,
                                   std::span<const int64_t> positions, int probes, uint64_t seed);

/// Run dense and dropped forwards through `drop_layer`'s attention on the
/// given prompt (single designated drop for isolation) and verify the
/// perturbation of the retained window tokens against the bound. When
/// extend_through_block is set, both paths continue to the block boundary
/// and the product bound is evaluated empirically with `lipschitz_probes`
/// probes per sublayer.
ErrorBoundReport measure_drop_error(const Model& model, const Matrix& prompt,
                                    const ScoreConfig& score_config, int drop_layer,
                                    bool extend_through_block = false,
                                    int lipschitz_probes = 64, uint64_t probe_seed = 0);

} // namespace uniprefill
