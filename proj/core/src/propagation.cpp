// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/propagation.hpp"

#include "uniprefill/errors.hpp"
#include "uniprefill/importance.hpp"
#include "uniprefill/tp_sim.hpp"

#include <algorithm>
#include <cstring>

namespace uniprefill {

TokenStream TokenStream::from_prompt(const Matrix& prompt) {
    if (prompt.rows < 1) throw ContractViolation("TokenStream: prompt must be non-empty");
    TokenStream s;
    s.active_states = prompt;
    s.logical_positions.resize(static_cast<size_t>(prompt.rows));
    for (int64_t i = 0; i < prompt.rows; ++i) s.logical_positions[static_cast<size_t>(i)] = i;
    s.original_length = prompt.rows;
    return s;
}

void TokenStream::validate() const {
    if (active_states.rows != active_count()) {
        throw ContractViolation("TokenStream: states row count disagrees with positions");
    }
    int64_t prev = -1;
    for (int64_t p : logical_positions) {
        if (p <= prev) throw ContractViolation("TokenStream: positions must be strictly increasing");
        prev = p;
    }
    if (active_count() + static_cast<int64_t>(parked_states.size()) != original_length) {
        throw ContractViolation("TokenStream: active and parked must partition the sequence");
    }
    for (const auto& [pos, state] : parked_states) {
        if (pos < 0 || pos >= original_length) {
            throw ContractViolation("TokenStream: parked position out of range");
        }
        if (std::binary_search(logical_positions.begin(), logical_positions.end(), pos)) {
            throw ContractViolation("TokenStream: position both active and parked");
        }
    }
}

void apply_drop(TokenStream& stream, const Selection& selection, int layer, DropHistory& history) {
    const int64_t rows = stream.active_count();
    if (selection.num_tokens() != rows) {
        throw ContractViolation("apply_drop: selection length disagrees with the active stream");
    }
    const int64_t d = stream.active_states.cols;
    Matrix compacted(selection.retained_count(), d);
    std::vector<int64_t> retained_positions;
    retained_positions.reserve(static_cast<size_t>(selection.retained_count()));
    int64_t out = 0;
    for (int64_t i = 0; i < rows; ++i) {
        const int64_t pos = stream.logical_positions[static_cast<size_t>(i)];
        if (selection.keep_mask[static_cast<size_t>(i)]) {
            std::memcpy(compacted.row(out), stream.active_states.row(i),
                        sizeof(float) * static_cast<size_t>(d));
            retained_positions.push_back(pos);
            ++out;
        } else {
            const float* src = stream.active_states.row(i);
            stream.parked_states[pos] = std::vector<float>(src, src + d);
        }
    }
    stream.active_states = std::move(compacted);
    stream.logical_positions = retained_positions;

    DropEvent event;
    event.layer = layer;
    event.retained_length = static_cast<int64_t>(retained_positions.size());
    event.retained_positions = std::move(retained_positions);
    history.events.push_back(std::move(event));
}

void reconstitute(TokenStream& stream) {
    if (stream.parked_states.empty()) return;
    const int64_t d = stream.active_states.cols;
    const int64_t n = stream.original_length;
    Matrix full(n, d);
    std::vector<int64_t> positions(static_cast<size_t>(n));
    int64_t active_idx = 0;
    for (int64_t p = 0; p < n; ++p) {
        positions[static_cast<size_t>(p)] = p;
        auto parked = stream.parked_states.find(p);
        if (parked != stream.parked_states.end()) {
            std::memcpy(full.row(p), parked->second.data(), sizeof(float) * static_cast<size_t>(d));
        } else {
            std::memcpy(full.row(p), stream.active_states.row(active_idx),
                        sizeof(float) * static_cast<size_t>(d));
            ++active_idx;
        }
    }
    stream.active_states = std::move(full);
    stream.logical_positions = std::move(positions);
    stream.parked_states.clear();
}

namespace {

/// Gather a subset of rows from a head-blocked matrix.
Matrix gather_rows(const Matrix& src, std::span<const int64_t> row_indices) {
    Matrix out(static_cast<int64_t>(row_indices.size()), src.cols);
    for (size_t i = 0; i < row_indices.size(); ++i) {
        std::memcpy(out.row(static_cast<int64_t>(i)), src.row(row_indices[i]),
                    sizeof(float) * static_cast<size_t>(src.cols));
    }
    return out;
}

/// Re-derive retention fields after re-admission has been vetoed for some
/// rows. covered_mass keeps the per-token block attribution.
void restrict_selection(Selection& sel, std::span<const float> block_scores, int block_size) {
    sel.retained_indices.clear();
    const int64_t n = sel.num_tokens();
    for (int64_t i = 0; i < n; ++i) {
        if (sel.keep_mask[static_cast<size_t>(i)]) sel.retained_indices.push_back(i);
    }
    sel.retention_ratio = static_cast<double>(sel.retained_indices.size()) / static_cast<double>(n);
    double total = 0.0;
    double covered = 0.0;
    const int64_t num_blocks = static_cast<int64_t>(block_scores.size());
    for (int64_t g = 0; g < num_blocks; ++g) {
        const int64_t begin = g * block_size;
        const int64_t end = std::min<int64_t>(n, begin + block_size);
        int64_t kept = 0;
        for (int64_t i = begin; i < end; ++i) kept += sel.keep_mask[static_cast<size_t>(i)];
        total += block_scores[static_cast<size_t>(g)];
        covered += static_cast<double>(block_scores[static_cast<size_t>(g)]) *
                   (static_cast<double>(kept) / static_cast<double>(end - begin));
    }
    sel.covered_mass = total > 0.0 ? covered / total : 1.0;
}

} // namespace

LayerStepResult prefill_layer_step(const Model& model, int layer, const Matrix& states,
                                   std::span<const int64_t> positions, PagedKVCache& kv,
                                   RequestId request, const ScoreConfig& score_config,
                                   bool drop_here, int tp_degree,
                                   const std::set<int64_t>* banned_positions) {
    if (!drop_here) {
        return LayerStepResult{forward_sublayer(model, layer, states, kv, positions, request),
                               std::nullopt, 0};
    }
    if (model.layer_kind(layer) != SublayerKind::FullAttention) {
        throw ConfigError("drop layers must be full-attention layers");
    }
    const ModelConfig& cfg = model.config();
    const int64_t rows = states.rows;

    const AttnProjections proj = project_qkv(model, layer, states, positions);
    // K/V for every incoming row: the drop at this layer only narrows cache
    // visibility for layers after it, so decode at this layer still sees the
    // pre-drop set.
    for (int64_t i = 0; i < rows; ++i) {
        kv.write(layer, request, positions[static_cast<size_t>(i)], proj.k.row(i), proj.v.row(i));
    }

    std::vector<float> block_scores;
    if (tp_degree <= 1) {
        block_scores = score_tokens(proj.q, proj.k, cfg.num_heads, score_config).block_scores;
    } else {
        const std::vector<ShardScores> shards =
            sharded_block_scores(proj.q, proj.k, cfg.num_heads, score_config, tp_degree);
        block_scores = allreduce_scores(shards);
    }

    Selection sel = top_p_select(block_scores, score_config, rows);
    if (banned_positions != nullptr && !banned_positions->empty()) {
        bool changed = false;
        for (int64_t i = 0; i < rows; ++i) {
            if (sel.keep_mask[static_cast<size_t>(i)] &&
                banned_positions->count(positions[static_cast<size_t>(i)]) > 0) {
                sel.keep_mask[static_cast<size_t>(i)] = 0;
                changed = true;
            }
        }
        if (changed) restrict_selection(sel, block_scores, score_config.block_size_g);
    }

    LayerStepResult result;
    result.scoring_flops = scoring_flops(std::min<int64_t>(score_config.query_window_n, rows),
                                         rows, cfg);

    const Sublayer& weights = model.sublayer(layer);
    const bool keep_all = sel.retained_count() == rows;
    std::vector<int64_t> retained_pos;
    retained_pos.reserve(static_cast<size_t>(sel.retained_count()));
    for (int64_t i : sel.retained_indices) retained_pos.push_back(positions[static_cast<size_t>(i)]);

    Matrix readout;
    if (keep_all) {
        readout = attention_readout(proj.q, positions, proj.k, proj.v, positions, cfg.num_heads,
                                    std::nullopt);
    } else {
        const Matrix q_ret = gather_rows(proj.q, sel.retained_indices);
        const Matrix k_ret = gather_rows(proj.k, sel.retained_indices);
        const Matrix v_ret = gather_rows(proj.v, sel.retained_indices);
        readout = attention_readout(q_ret, retained_pos, k_ret, v_ret, retained_pos,
                                    cfg.num_heads, std::nullopt);
    }

    Matrix out(sel.retained_count(), cfg.hidden_dim);
    for (int64_t r = 0; r < sel.retained_count(); ++r) {
        const int64_t src_row = sel.retained_indices[static_cast<size_t>(r)];
        float* y = out.row(r);
        matvec(weights.attn.wo.data(), readout.row(keep_all ? src_row : r), cfg.hidden_dim,
               cfg.hidden_dim, y);
        const float* x = states.row(src_row);
        for (int c = 0; c < cfg.hidden_dim; ++c) y[c] += x[c];
    }
    result.new_states = std::move(out);
    result.selection = std::move(sel);
    return result;
}

std::set<int> resolve_drop_layers(const Model& model,
                                  const std::optional<std::vector<int>>& requested) {
    std::set<int> layers;
    if (requested.has_value()) {
        for (int l : *requested) {
            if (l < 0 || l >= model.num_layers()) {
                throw ConfigError("drop layer index out of range");
            }
            if (model.layer_kind(l) != SublayerKind::FullAttention) {
                throw ConfigError("drop layers must be full-attention layers");
            }
            layers.insert(l);
        }
    } else {
        for (int l : model.full_attention_layers()) layers.insert(l);
    }
    return layers;
}

PrefillResult accelerated_prefill(const Model& model, const Matrix& tokens,
                                  const ScoreConfig& score_config,
                                  const AcceleratedOptions& options, RequestId request) {
    score_config.validate();
    if (tokens.rows < 1) throw ContractViolation("accelerated_prefill: tokens must be non-empty");
    if (options.tp_degree > 1 && model.config().num_heads % options.tp_degree != 0) {
        throw ConfigError("num_heads must be divisible by tp_degree");
    }
    const std::set<int> drop_layers = resolve_drop_layers(model, options.drop_layers);

    TokenStream stream = TokenStream::from_prompt(tokens);
    DropHistory history;
    history.original_length = tokens.rows;
    FlopsLedger ledger;
    PagedKVCache cache(model.num_layers(), model.config().hidden_dim, options.kv_block_size);
    std::set<int64_t> banned;

    for (int l = 0; l < model.num_layers(); ++l) {
        const int64_t entry_rows = stream.active_count();
        const bool drop_here = drop_layers.count(l) > 0;
        LayerStepResult step = prefill_layer_step(
            model, l, stream.active_states, stream.logical_positions, cache, request,
            score_config, drop_here, options.tp_degree,
            options.allow_readmission ? nullptr : &banned);
        ledger.add_layer(l, model.layer_kind(l), entry_rows, model.config());
        if (step.selection.has_value()) {
            ledger.add_scoring(step.scoring_flops);
            const Selection& sel = *step.selection;
            ledger.add_drop(DropRecord{l, entry_rows, sel.retained_count(),
                                       static_cast<double>(sel.retained_count()) /
                                           static_cast<double>(entry_rows),
                                       sel.covered_mass});
            if (!options.allow_readmission) {
                for (int64_t i = 0; i < entry_rows; ++i) {
                    if (!sel.keep_mask[static_cast<size_t>(i)]) {
                        banned.insert(stream.logical_positions[static_cast<size_t>(i)]);
                    }
                }
            }
            apply_drop(stream, sel, l, history);
        }
        stream.active_states = std::move(step.new_states);
        if (model.is_block_boundary_after(l)) reconstitute(stream);
    }

    if (!stream.active_states.all_finite()) {
        throw AuditError("accelerated_prefill: non-finite states in the final stream");
    }
    return PrefillResult{std::move(stream.active_states), std::move(cache), std::move(history),
                         std::move(ledger)};
}

} // namespace uniprefill
