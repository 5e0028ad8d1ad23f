// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <map>
#include <optional>
#include <set>
#include <vector>

#include "uniprefill/drop_history.hpp"
#include "uniprefill/flops.hpp"
#include "uniprefill/model.hpp"
#include "uniprefill/selection.hpp"

namespace uniprefill {

/// Running token stream of one request. Active rows are the tokens still
/// being computed; parked rows hold the state a token had when it was
/// dropped, untouched until reconstitution.
struct TokenStream {
    Matrix active_states;
    std::vector<int64_t> logical_positions;
    std::map<int64_t, std::vector<float>> parked_states;
    int64_t original_length = 0;

    static TokenStream from_prompt(const Matrix& prompt);

    int64_t active_count() const { return static_cast<int64_t>(logical_positions.size()); }

    /// Positions strictly increasing; active and parked positions partition
    /// [0, original_length). Throws ContractViolation.
    void validate() const;
};

/// Move dropped rows to the parked map (storing their current states),
/// compact retained rows in position order, and append a history event.
/// The selection indexes the stream's current active rows.
void apply_drop(TokenStream& stream, const Selection& selection, int layer, DropHistory& history);

/// Restore the full sequence at a block boundary: retained rows carry their
/// updated states, parked rows re-enter with their parked states unchanged.
void reconstitute(TokenStream& stream);

/// Per-layer result of the shared prefill engine step: transformed states for
/// the rows that survive the layer, plus the drop decision when one was made.
struct LayerStepResult {
    Matrix new_states;
    std::optional<Selection> selection;
    uint64_t scoring_flops = 0;
};

/// One sublayer of the accelerated pipeline over a request segment. With
/// drop_here set (full-attention layers only) this writes K/V for every
/// incoming row, scores the stream (sharded when tp_degree > 1), selects,
/// and computes attention for retained rows over retained keys; the returned
/// states are compacted to the retained rows. Without drop_here it matches
/// forward_sublayer exactly. banned_positions, when given, are excluded from
/// re-admission at selection time.
LayerStepResult prefill_layer_step(const Model& model, int layer, const Matrix& states,
                                   std::span<const int64_t> positions, PagedKVCache& kv,
                                   RequestId request, const ScoreConfig& score_config,
                                   bool drop_here, int tp_degree = 1,
                                   const std::set<int64_t>* banned_positions = nullptr);

struct AcceleratedOptions {
    /// Layers that drop; defaults to every full-attention layer. Must all be
    /// full-attention layers.
    std::optional<std::vector<int>> drop_layers;
    int tp_degree = 1;
    bool allow_readmission = true;
    int kv_block_size = 16;
};

struct PrefillResult {
    Matrix final_states;
    PagedKVCache cache;
    DropHistory history;
    FlopsLedger ledger;
};

/// Full accelerated pipeline: at each drop layer score -> select -> drop;
/// between blocks reconstitute; K/V written only for rows active at each
/// layer. Returns everything decode needs plus the FLOPs ledger.
PrefillResult accelerated_prefill(const Model& model, const Matrix& tokens,
                                  const ScoreConfig& score_config,
                                  const AcceleratedOptions& options = {},
                                  RequestId request = 0);

/// Resolve the effective drop layer set for a model, validating that every
/// requested layer is full attention.
std::set<int> resolve_drop_layers(const Model& model,
                                  const std::optional<std::vector<int>>& requested);

} // namespace uniprefill
