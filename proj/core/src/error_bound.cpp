// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/error_bound.hpp"

#include "uniprefill/errors.hpp"
#include "uniprefill/importance.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace uniprefill {

namespace {

constexpr double kBoundSlack = 1e-5;

Matrix gather_rows(const Matrix& src, std::span<const int64_t> rows) {
    Matrix out(static_cast<int64_t>(rows.size()), src.cols);
    for (size_t i = 0; i < rows.size(); ++i) {
        std::memcpy(out.row(static_cast<int64_t>(i)), src.row(rows[i]),
                    sizeof(float) * static_cast<size_t>(src.cols));
    }
    return out;
}

double frobenius(const Matrix& m) {
    double acc = 0.0;
    for (float x : m.data) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

} // namespace

DropEventErrorReport measure_readout_drop_error(const Matrix& queries,
                                                std::span<const int64_t> query_pos,
                                                const Matrix& k, const Matrix& v,
                                                std::span<const int64_t> kv_pos,
                                                const std::vector<uint8_t>& keep, int num_heads,
                                                double covered_mass) {
    if (keep.size() != static_cast<size_t>(k.rows)) {
        throw ContractViolation("measure_readout_drop_error: mask must cover every key row");
    }
    if (queries.cols != k.cols || k.rows != v.rows ||
        queries.rows != static_cast<int64_t>(query_pos.size())) {
        throw ContractViolation("measure_readout_drop_error: shape mismatch");
    }
    const int head_dim = static_cast<int>(queries.cols) / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    DropEventErrorReport rep;
    rep.covered_mass = covered_mass;
    rep.num_tokens = k.rows;
    for (int64_t i = 0; i < k.rows; ++i) {
        rep.retained += keep[static_cast<size_t>(i)] ? 1 : 0;
        for (int h = 0; h < num_heads; ++h) {
            rep.v_max = std::max(rep.v_max,
                                 row_norm(v.row(i) + static_cast<int64_t>(h) * head_dim, head_dim));
        }
    }
    rep.dropped = rep.num_tokens - rep.retained;
    if (rep.retained == 0) {
        throw ContractViolation("measure_readout_drop_error: empty retained set");
    }
    rep.bound = (1.0 - covered_mass) * rep.v_max;

    bool per_row_ok = true;
    double mean_acc = 0.0;
    int64_t mean_count = 0;
    std::vector<double> weights(static_cast<size_t>(k.rows));
    std::vector<double> dropped_term(static_cast<size_t>(head_dim));
    std::vector<double> renorm_diff(static_cast<size_t>(queries.cols));

    for (int64_t j = 0; j < queries.rows; ++j) {
        const int64_t qp = query_pos[static_cast<size_t>(j)];
        const auto hi_it = std::upper_bound(kv_pos.begin(), kv_pos.end(), qp);
        const int64_t hi = hi_it - kv_pos.begin();
        if (hi <= 0) throw ContractViolation("measure_readout_drop_error: query sees no key");
        double renorm_sq = 0.0;
        for (int h = 0; h < num_heads; ++h) {
            const int64_t off = static_cast<int64_t>(h) * head_dim;
            const float* qh = queries.row(j) + off;
            // Dense softmax weights over the visible prefix.
            double max_logit = -1e300;
            for (int64_t i = 0; i < hi; ++i) {
                const double logit = dot_f32(qh, k.row(i) + off, head_dim) * scale;
                weights[static_cast<size_t>(i)] = logit;
                max_logit = std::max(max_logit, logit);
            }
            double denom = 0.0;
            for (int64_t i = 0; i < hi; ++i) {
                weights[static_cast<size_t>(i)] = std::exp(weights[static_cast<size_t>(i)] - max_logit);
                denom += weights[static_cast<size_t>(i)];
            }
            double head_v_max = 0.0;
            double dropped_mass = 0.0;
            double retained_mass = 0.0;
            std::fill(dropped_term.begin(), dropped_term.end(), 0.0);
            std::vector<double> retained_term(static_cast<size_t>(head_dim), 0.0);
            for (int64_t i = 0; i < hi; ++i) {
                const double w = weights[static_cast<size_t>(i)] / denom;
                const float* vh = v.row(i) + off;
                head_v_max = std::max(head_v_max, row_norm(vh, head_dim));
                if (keep[static_cast<size_t>(i)]) {
                    retained_mass += w;
                    for (int c = 0; c < head_dim; ++c) retained_term[static_cast<size_t>(c)] += w * vh[c];
                } else {
                    dropped_mass += w;
                    for (int c = 0; c < head_dim; ++c) dropped_term[static_cast<size_t>(c)] += w * vh[c];
                }
            }
            double removed = 0.0;
            for (double x : dropped_term) removed += x * x;
            removed = std::sqrt(removed);
            mean_acc += removed;
            mean_count += 1;
            // Per-row form of the bound: the removed term is at most the
            // row's own dropped mass times the largest value norm it saw.
            if (removed > dropped_mass * head_v_max + kBoundSlack) per_row_ok = false;
            // Renormalized forward difference for the diagnostic. With nothing
            // dropped in the visible prefix the two readouts coincide exactly.
            for (int c = 0; c < head_dim; ++c) {
                if (dropped_mass == 0.0) {
                    renorm_diff[static_cast<size_t>(off + c)] = 0.0;
                    continue;
                }
                const double dense_out = retained_term[static_cast<size_t>(c)] + dropped_term[static_cast<size_t>(c)];
                const double renorm_out =
                    retained_mass > 0.0 ? retained_term[static_cast<size_t>(c)] / retained_mass : 0.0;
                renorm_diff[static_cast<size_t>(off + c)] = dense_out - renorm_out;
            }
        }
        for (double x : renorm_diff) renorm_sq += x * x;
        rep.measured_max_perturbation = std::max(rep.measured_max_perturbation, std::sqrt(renorm_sq));
    }

    rep.measured_mean_perturbation = mean_count > 0 ? mean_acc / static_cast<double>(mean_count) : 0.0;
    rep.within_bound =
        per_row_ok && rep.measured_mean_perturbation <= rep.bound + kBoundSlack;
    return rep;
}

double estimate_sublayer_lipschitz(const Model& model, int layer, const Matrix& base_states,
                                   std::span<const int64_t> positions, int probes, uint64_t seed) {
    const CounterRng rng(seed, hash_combine(0x4c697073ULL, static_cast<uint64_t>(layer)));
    PagedKVCache scratch_a(model.num_layers(), model.config().hidden_dim);
    const Matrix base_out = forward_sublayer(model, layer, base_states, scratch_a, positions);
    double worst = 0.0;
    uint64_t counter = 0;
    for (int p = 0; p < probes; ++p) {
        Matrix delta(base_states.rows, base_states.cols);
        for (size_t i = 0; i < delta.data.size(); ++i) delta.data[i] = rng.normal(counter++, 1.0);
        const double norm = frobenius(delta);
        Matrix perturbed = base_states;
        for (size_t i = 0; i < delta.data.size(); ++i) {
            delta.data[i] = static_cast<float>(delta.data[i] / norm);
            perturbed.data[i] += delta.data[i];
        }
        PagedKVCache scratch_b(model.num_layers(), model.config().hidden_dim);
        const Matrix out = forward_sublayer(model, layer, perturbed, scratch_b, positions);
        Matrix diff(base_out.rows, base_out.cols);
        for (size_t i = 0; i < diff.data.size(); ++i) diff.data[i] = out.data[i] - base_out.data[i];
        worst = std::max(worst, frobenius(diff) / frobenius(delta));
    }
    return worst;
}

ErrorBoundReport measure_drop_error(const Model& model, const Matrix& prompt,
                                    const ScoreConfig& score_config, int drop_layer,
                                    bool extend_through_block, int lipschitz_probes,
                                    uint64_t probe_seed) {
    if (model.layer_kind(drop_layer) != SublayerKind::FullAttention) {
        throw ConfigError("measure_drop_error: drop layer must be full attention");
    }
    const ModelConfig& cfg = model.config();
    std::vector<int64_t> positions(static_cast<size_t>(prompt.rows));
    for (int64_t i = 0; i < prompt.rows; ++i) positions[static_cast<size_t>(i)] = i;

    // Dense forward up to the drop layer's input.
    PagedKVCache cache(model.num_layers(), cfg.hidden_dim);
    Matrix states = prompt;
    for (int l = 0; l < drop_layer; ++l) {
        states = forward_sublayer(model, l, states, cache, positions);
    }

    const AttnProjections proj = project_qkv(model, drop_layer, states, positions);
    const ImportanceScores scores = score_tokens(proj.q, proj.k, cfg.num_heads, score_config);
    const Selection sel = top_p_select(scores.block_scores, score_config, prompt.rows);

    // Token-basis retained mass: the per-token scores are the actual window
    // averaged softmax masses, so this is exactly the quantity the mean
    // perturbation theorem needs.
    double total_mass = 0.0;
    double retained_mass = 0.0;
    for (int64_t i = 0; i < prompt.rows; ++i) {
        total_mass += scores.token_scores[static_cast<size_t>(i)];
        if (sel.keep_mask[static_cast<size_t>(i)]) {
            retained_mass += scores.token_scores[static_cast<size_t>(i)];
        }
    }
    const double covered_token = total_mass > 0.0 ? retained_mass / total_mass : 1.0;

    ErrorBoundReport report;
    // Measure the retained query-window rows: the rows the window-averaged
    // scores describe and the ones that feed next-token prediction.
    const int64_t window_begin = prompt.rows - scores.effective_n;
    std::vector<int64_t> measured_rows;
    for (int64_t i : sel.retained_indices) {
        if (i >= window_begin) measured_rows.push_back(i);
    }
    const Matrix q_measured = gather_rows(proj.q, measured_rows);
    report.drop = measure_readout_drop_error(q_measured, measured_rows, proj.k, proj.v,
                                             positions, sel.keep_mask, cfg.num_heads,
                                             covered_token);

    if (extend_through_block) {
        const int pattern = cfg.pattern_length();
        const int block_end = (drop_layer / pattern + 1) * pattern - 1;

        // Dense branch: full rows through the rest of the block. Dropped
        // branch: retained rows only, its own cache.
        Matrix dense_states = forward_sublayer(model, drop_layer, states, cache, positions);
        PagedKVCache dropped_cache(model.num_layers(), cfg.hidden_dim);
        Matrix dropped_states = gather_rows(states, sel.retained_indices);
        std::vector<int64_t> retained_pos = sel.retained_indices; // logical == row index here
        dropped_states =
            forward_sublayer(model, drop_layer, dropped_states, dropped_cache, retained_pos);

        BlockErrorReport block;
        for (int l = drop_layer + 1; l <= block_end; ++l) {
            block.sublayer_lipschitz.push_back(estimate_sublayer_lipschitz(
                model, l, dense_states, positions, lipschitz_probes,
                hash_combine(probe_seed, static_cast<uint64_t>(l))));
            dense_states = forward_sublayer(model, l, dense_states, cache, positions);
            dropped_states = forward_sublayer(model, l, dropped_states, dropped_cache, retained_pos);
        }
        for (double lm : block.sublayer_lipschitz) block.lipschitz_product *= lm;

        std::vector<float> diff(static_cast<size_t>(cfg.hidden_dim));
        for (size_t r = 0; r < sel.retained_indices.size(); ++r) {
            const float* a = dense_states.row(sel.retained_indices[r]);
            const float* b = dropped_states.row(static_cast<int64_t>(r));
            for (int c = 0; c < cfg.hidden_dim; ++c) diff[static_cast<size_t>(c)] = a[c] - b[c];
            block.end_of_block_error =
                std::max(block.end_of_block_error, row_norm(diff.data(), cfg.hidden_dim));
        }
        block.product_bound = (1.0 - covered_token) * report.drop.v_max * block.lipschitz_product;
        report.block = std::move(block);
    }
    return report;
}

} // namespace uniprefill
