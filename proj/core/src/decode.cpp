// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/decode.hpp"

#include "uniprefill/errors.hpp"

#include <cmath>
#include <cstring>

namespace uniprefill {

namespace {

Matrix decode_softmax_attention(const Model& model, int layer, const Matrix& row,
                                int64_t position, PagedKVCache& cache, RequestId request,
                                const DropHistory& history, bool windowed,
                                std::vector<SeqUsedRecord>* seqused_log) {
    const ModelConfig& cfg = model.config();
    const int d = cfg.hidden_dim;
    const AttnProjections proj = project_qkv(model, layer, row, std::span<const int64_t>(&position, 1));
    cache.write(layer, request, position, proj.k.row(0), proj.v.row(0));

    // Visible set: retained prompt positions in force at this layer plus all
    // appended decode positions, the current token included.
    const std::vector<int64_t>* retained = retained_positions_before(history, layer);
    const int64_t window_lo = windowed ? position - cfg.window_size + 1 : -1;
    std::vector<int64_t> visible;
    if (retained != nullptr) {
        for (int64_t p : *retained) {
            if (p >= window_lo) visible.push_back(p);
        }
    } else {
        for (int64_t p = std::max<int64_t>(0, window_lo); p < history.original_length; ++p) {
            visible.push_back(p);
        }
    }
    for (int64_t p = std::max(history.original_length, window_lo); p <= position; ++p) {
        visible.push_back(p);
    }

    if (seqused_log != nullptr) {
        seqused_log->push_back(SeqUsedRecord{
            layer, request, history.decode_appended + 1,
            (retained ? static_cast<int64_t>(retained->size()) : history.original_length) +
                history.decode_appended + 1});
    }

    Matrix k(static_cast<int64_t>(visible.size()), d);
    Matrix v(static_cast<int64_t>(visible.size()), d);
    for (size_t i = 0; i < visible.size(); ++i) {
        std::memcpy(k.row(static_cast<int64_t>(i)), cache.read_key(layer, request, visible[i]),
                    sizeof(float) * static_cast<size_t>(d));
        std::memcpy(v.row(static_cast<int64_t>(i)), cache.read_value(layer, request, visible[i]),
                    sizeof(float) * static_cast<size_t>(d));
    }
    const Matrix readout = attention_readout(proj.q, std::span<const int64_t>(&position, 1), k, v,
                                             visible, cfg.num_heads, std::nullopt);
    const Sublayer& weights = model.sublayer(layer);
    Matrix out(1, d);
    matvec(weights.attn.wo.data(), readout.row(0), d, d, out.row(0));
    for (int c = 0; c < d; ++c) out.row(0)[c] += row.row(0)[c];
    return out;
}

Matrix decode_linear_attention(const Model& model, int layer, const Matrix& row,
                               int64_t position, PagedKVCache& cache, RequestId request) {
    const ModelConfig& cfg = model.config();
    const int d = cfg.hidden_dim;
    const int dh = cfg.head_dim;
    const AttnProjections proj = project_qkv(model, layer, row, std::span<const int64_t>(&position, 1));
    Matrix& state = cache.linear_state(layer, request, cfg.num_heads, dh);
    std::vector<float> readout(static_cast<size_t>(d));
    for (int h = 0; h < cfg.num_heads; ++h) {
        const int64_t off = static_cast<int64_t>(h) * dh;
        const float* kh = proj.k.row(0) + off;
        const float* vh = proj.v.row(0) + off;
        const float* qh = proj.q.row(0) + off;
        for (int a = 0; a < dh; ++a) {
            float* srow = state.row(off + a);
            const float ka = kh[a];
            for (int b = 0; b < dh; ++b) srow[b] += ka * vh[b];
        }
        for (int b = 0; b < dh; ++b) {
            double acc = 0.0;
            for (int a = 0; a < dh; ++a) acc += static_cast<double>(qh[a]) * state.row(off + a)[b];
            readout[static_cast<size_t>(off + b)] = static_cast<float>(acc);
        }
    }
    const Sublayer& weights = model.sublayer(layer);
    Matrix out(1, d);
    matvec(weights.attn.wo.data(), readout.data(), d, d, out.row(0));
    for (int c = 0; c < d; ++c) out.row(0)[c] += row.row(0)[c];
    return out;
}

} // namespace

Matrix decode_layer_step(const Model& model, int layer, const Matrix& row, int64_t position,
                         PagedKVCache& cache, RequestId request, const DropHistory& history,
                         std::vector<SeqUsedRecord>* seqused_log) {
    if (row.rows != 1 || row.cols != model.config().hidden_dim) {
        throw ContractViolation("decode_layer_step: expected a single hidden row");
    }
    switch (model.layer_kind(layer)) {
    case SublayerKind::FullAttention:
        return decode_softmax_attention(model, layer, row, position, cache, request, history,
                                        false, seqused_log);
    case SublayerKind::SlidingWindowAttention:
        return decode_softmax_attention(model, layer, row, position, cache, request, history,
                                        true, seqused_log);
    case SublayerKind::LinearAttention:
        return decode_linear_attention(model, layer, row, position, cache, request);
    case SublayerKind::FFN: {
        // Position-independent; the cache is not touched on this path.
        const int64_t pos = position;
        return forward_sublayer(model, layer, row, cache, std::span<const int64_t>(&pos, 1),
                                request);
    }
    }
    throw ContractViolation("decode_layer_step: unknown sublayer kind");
}

Matrix decode_one_token(const Model& model, const Matrix& row, int64_t position,
                        PagedKVCache& cache, RequestId request, const DropHistory& history,
                        std::vector<SeqUsedRecord>* seqused_log) {
    Matrix h = row;
    for (int l = 0; l < model.num_layers(); ++l) {
        h = decode_layer_step(model, l, h, position, cache, request, history, seqused_log);
    }
    return h;
}

std::vector<int32_t> greedy_decode(const Model& model, const float* last_prompt_hidden,
                                   PagedKVCache& cache, RequestId request, DropHistory& history,
                                   int64_t num_tokens,
                                   std::vector<std::vector<float>>* logits_trace,
                                   std::vector<SeqUsedRecord>* seqused_log) {
    std::vector<int32_t> tokens;
    if (num_tokens <= 0) return tokens;
    if (logits_trace != nullptr) logits_trace->push_back(model.logits(last_prompt_hidden));
    int32_t t = model.argmax_token(last_prompt_hidden);
    tokens.push_back(t);
    while (static_cast<int64_t>(tokens.size()) < num_tokens) {
        const int64_t position = history.original_length + history.decode_appended;
        const Matrix input = model.embed(std::span<const int32_t>(&t, 1));
        const Matrix h =
            decode_one_token(model, input, position, cache, request, history, seqused_log);
        history.decode_appended += 1;
        if (logits_trace != nullptr) logits_trace->push_back(model.logits(h.row(0)));
        t = model.argmax_token(h.row(0));
        tokens.push_back(t);
    }
    return tokens;
}

} // namespace uniprefill
