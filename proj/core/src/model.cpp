// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/model.hpp"

#include "uniprefill/errors.hpp"
#include "uniprefill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace uniprefill {

namespace {

// Weight stream tags. A tensor's values depend only on (seed, tag, layer),
// never on construction order.
enum WeightRole : uint64_t {
    kRoleWq = 1,
    kRoleWk,
    kRoleWv,
    kRoleWo,
    kRoleFfnIn,
    kRoleFfnOut,
    kRoleEmbedding,
    kRoleLmHead,
};

constexpr double kInitStddev = 0.02;
constexpr float kLayerNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

std::vector<float> make_weight(uint64_t seed, uint64_t role, uint64_t layer, int64_t count,
                               double stddev = kInitStddev) {
    CounterRng rng(seed, hash_combine(role, layer));
    std::vector<float> w(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) w[static_cast<size_t>(i)] = rng.normal(i, stddev);
    return w;
}

LayerNormParams make_norm(int dim) {
    LayerNormParams n;
    n.gamma.assign(static_cast<size_t>(dim), 1.0f);
    n.beta.assign(static_cast<size_t>(dim), 0.0f);
    return n;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

} // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const int d = config_.hidden_dim;
    const int layers = config_.total_layers();
    sublayers_.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        Sublayer& s = sublayers_[static_cast<size_t>(l)];
        s.kind = config_.layer_pattern[static_cast<size_t>(l % config_.pattern_length())];
        s.norm = make_norm(d);
        if (s.kind == SublayerKind::FFN) {
            s.ffn.w_in = make_weight(config_.seed, kRoleFfnIn, static_cast<uint64_t>(l),
                                     static_cast<int64_t>(config_.ffn_dim) * d);
            s.ffn.w_out = make_weight(config_.seed, kRoleFfnOut, static_cast<uint64_t>(l),
                                      static_cast<int64_t>(d) * config_.ffn_dim);
        } else {
            // q/k/o carry a 1/sqrt(d) init: at 0.02 everywhere the softmax is
            // indistinguishable from uniform at these widths (no input can
            // concentrate it) and attention outputs are too faint to matter
            // in the residual stream. v stays small so the per-token value
            // norms, and with them the drop perturbation scale, stay small.
            const double wide_stddev = 1.0 / std::sqrt(static_cast<double>(d));
            s.attn.wq = make_weight(config_.seed, kRoleWq, static_cast<uint64_t>(l),
                                    static_cast<int64_t>(d) * d, wide_stddev);
            s.attn.wk = make_weight(config_.seed, kRoleWk, static_cast<uint64_t>(l),
                                    static_cast<int64_t>(d) * d, wide_stddev);
            s.attn.wv = make_weight(config_.seed, kRoleWv, static_cast<uint64_t>(l),
                                    static_cast<int64_t>(d) * d);
            s.attn.wo = make_weight(config_.seed, kRoleWo, static_cast<uint64_t>(l),
                                    static_cast<int64_t>(d) * d, wide_stddev);
        }
    }
    embedding_ = Matrix(config_.vocab_size, d);
    embedding_.data = make_weight(config_.seed, kRoleEmbedding, 0,
                                  static_cast<int64_t>(config_.vocab_size) * d);
    lm_head_ = Matrix(config_.vocab_size, d);
    lm_head_.data = make_weight(config_.seed, kRoleLmHead, 0,
                                static_cast<int64_t>(config_.vocab_size) * d);
}

SublayerKind Model::layer_kind(int layer) const {
    return config_.layer_pattern[static_cast<size_t>(layer % config_.pattern_length())];
}

std::vector<int> Model::full_attention_layers() const {
    std::vector<int> out;
    for (int l = 0; l < num_layers(); ++l) {
        if (layer_kind(l) == SublayerKind::FullAttention) out.push_back(l);
    }
    return out;
}

uint64_t Model::weight_checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto fold = [&h](const std::vector<float>& w) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(w.data());
        for (size_t i = 0; i < w.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const Sublayer& s : sublayers_) {
        fold(s.attn.wq);
        fold(s.attn.wk);
        fold(s.attn.wv);
        fold(s.attn.wo);
        fold(s.ffn.w_in);
        fold(s.ffn.w_out);
    }
    fold(embedding_.data);
    fold(lm_head_.data);
    return h;
}

Matrix Model::embed(std::span<const int32_t> token_ids) const {
    Matrix out(static_cast<int64_t>(token_ids.size()), config_.hidden_dim);
    for (size_t i = 0; i < token_ids.size(); ++i) {
        const int32_t t = token_ids[i];
        if (t < 0 || t >= config_.vocab_size) throw ContractViolation("embed: token id out of range");
        std::memcpy(out.row(static_cast<int64_t>(i)), embedding_.row(t),
                    sizeof(float) * static_cast<size_t>(config_.hidden_dim));
    }
    return out;
}

std::vector<float> Model::logits(const float* hidden) const {
    std::vector<float> out(static_cast<size_t>(config_.vocab_size));
    matvec(lm_head_.data.data(), hidden, config_.vocab_size, config_.hidden_dim, out.data());
    return out;
}

int32_t Model::argmax_token(const float* hidden) const {
    const std::vector<float> l = logits(hidden);
    int32_t best = 0;
    for (int32_t i = 1; i < config_.vocab_size; ++i) {
        if (l[static_cast<size_t>(i)] > l[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

Model build_model(const ModelConfig& config) { return Model(config); }

void apply_rope_inplace(float* row, int num_heads, int head_dim, int64_t position) {
    const int half = head_dim / 2;
    for (int h = 0; h < num_heads; ++h) {
        float* head = row + static_cast<int64_t>(h) * head_dim;
        for (int i = 0; i < half; ++i) {
            const double theta = std::pow(kRopeBase, -2.0 * i / head_dim);
            const double angle = static_cast<double>(position) * theta;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double x0 = head[2 * i];
            const double x1 = head[2 * i + 1];
            head[2 * i] = static_cast<float>(x0 * c - x1 * s);
            head[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
        }
    }
}

void layer_norm_row(const float* x, const LayerNormParams& norm, int dim, float* out) {
    double mean = 0.0;
    for (int i = 0; i < dim; ++i) mean += x[i];
    mean /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= dim;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int i = 0; i < dim; ++i) {
        out[i] = static_cast<float>((x[i] - mean) * inv * norm.gamma[static_cast<size_t>(i)] +
                                    norm.beta[static_cast<size_t>(i)]);
    }
}

void matvec(const float* w, const float* x, int out_dim, int in_dim, float* y) {
    for (int o = 0; o < out_dim; ++o) {
        y[o] = static_cast<float>(dot_f32(w + static_cast<int64_t>(o) * in_dim, x, in_dim));
    }
}

AttnProjections project_qkv(const Model& model, int layer, const Matrix& states,
                            std::span<const int64_t> positions) {
    const ModelConfig& cfg = model.config();
    const int d = cfg.hidden_dim;
    if (states.rows != static_cast<int64_t>(positions.size())) {
        throw ContractViolation("project_qkv: states row count must equal positions length");
    }
    const Sublayer& s = model.sublayer(layer);
    AttnProjections p{Matrix(states.rows, d), Matrix(states.rows, d), Matrix(states.rows, d)};
    std::vector<float> normed(static_cast<size_t>(d));
    for (int64_t i = 0; i < states.rows; ++i) {
        layer_norm_row(states.row(i), s.norm, d, normed.data());
        matvec(s.attn.wq.data(), normed.data(), d, d, p.q.row(i));
        matvec(s.attn.wk.data(), normed.data(), d, d, p.k.row(i));
        matvec(s.attn.wv.data(), normed.data(), d, d, p.v.row(i));
        apply_rope_inplace(p.q.row(i), cfg.num_heads, cfg.head_dim, positions[static_cast<size_t>(i)]);
        apply_rope_inplace(p.k.row(i), cfg.num_heads, cfg.head_dim, positions[static_cast<size_t>(i)]);
    }
    return p;
}

Matrix attention_readout(const Matrix& q, std::span<const int64_t> q_pos,
                         const Matrix& k, const Matrix& v, std::span<const int64_t> kv_pos,
                         int num_heads, std::optional<int64_t> window) {
    if (q.rows != static_cast<int64_t>(q_pos.size()) ||
        k.rows != static_cast<int64_t>(kv_pos.size()) || k.rows != v.rows || q.cols != k.cols) {
        throw ContractViolation("attention_readout: shape mismatch");
    }
    const int head_dim = static_cast<int>(q.cols) / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Matrix out(q.rows, q.cols);
    std::vector<double> logit_scratch(static_cast<size_t>(k.rows));

    for (int64_t j = 0; j < q.rows; ++j) {
        const int64_t qp = q_pos[static_cast<size_t>(j)];
        // Visible key range by logical position: (qp - window, qp].
        const auto hi_it = std::upper_bound(kv_pos.begin(), kv_pos.end(), qp);
        int64_t hi = hi_it - kv_pos.begin();
        int64_t lo = 0;
        if (window.has_value()) {
            const auto lo_it = std::lower_bound(kv_pos.begin(), kv_pos.end(), qp - *window + 1);
            lo = lo_it - kv_pos.begin();
        }
        if (lo >= hi) throw ContractViolation("attention_readout: query row has no visible key");
        for (int h = 0; h < num_heads; ++h) {
            const int64_t off = static_cast<int64_t>(h) * head_dim;
            const float* qh = q.row(j) + off;
            double max_logit = -1e300;
            for (int64_t i = lo; i < hi; ++i) {
                const double logit = dot_f32(qh, k.row(i) + off, head_dim) * scale;
                logit_scratch[static_cast<size_t>(i)] = logit;
                if (logit > max_logit) max_logit = logit;
            }
            double denom = 0.0;
            for (int64_t i = lo; i < hi; ++i) {
                logit_scratch[static_cast<size_t>(i)] = std::exp(logit_scratch[static_cast<size_t>(i)] - max_logit);
                denom += logit_scratch[static_cast<size_t>(i)];
            }
            float* oh = out.row(j) + off;
            for (int c = 0; c < head_dim; ++c) {
                double acc = 0.0;
                for (int64_t i = lo; i < hi; ++i) {
                    acc += logit_scratch[static_cast<size_t>(i)] * v.row(i)[off + c];
                }
                oh[c] = static_cast<float>(acc / denom);
            }
        }
    }
    return out;
}

namespace {

Matrix forward_softmax_attention(const Model& model, int layer, const Matrix& states,
                                 PagedKVCache& kv, std::span<const int64_t> positions,
                                 RequestId request, std::optional<int64_t> window) {
    const ModelConfig& cfg = model.config();
    const AttnProjections p = project_qkv(model, layer, states, positions);
    for (int64_t i = 0; i < states.rows; ++i) {
        kv.write(layer, request, positions[static_cast<size_t>(i)], p.k.row(i), p.v.row(i));
    }
    const Matrix readout =
        attention_readout(p.q, positions, p.k, p.v, positions, cfg.num_heads, window);
    const Sublayer& s = model.sublayer(layer);
    Matrix out(states.rows, cfg.hidden_dim);
    for (int64_t i = 0; i < states.rows; ++i) {
        float* y = out.row(i);
        matvec(s.attn.wo.data(), readout.row(i), cfg.hidden_dim, cfg.hidden_dim, y);
        const float* x = states.row(i);
        for (int c = 0; c < cfg.hidden_dim; ++c) y[c] += x[c];
    }
    return out;
}

Matrix forward_linear_attention(const Model& model, int layer, const Matrix& states,
                                PagedKVCache& kv, std::span<const int64_t> positions,
                                RequestId request) {
    const ModelConfig& cfg = model.config();
    const int dh = cfg.head_dim;
    const AttnProjections p = project_qkv(model, layer, states, positions);
    Matrix& state = kv.linear_state(layer, request, cfg.num_heads, dh);
    const Sublayer& s = model.sublayer(layer);
    Matrix out(states.rows, cfg.hidden_dim);
    std::vector<float> readout(static_cast<size_t>(cfg.hidden_dim));
    for (int64_t i = 0; i < states.rows; ++i) {
        for (int h = 0; h < cfg.num_heads; ++h) {
            const int64_t off = static_cast<int64_t>(h) * dh;
            const float* kh = p.k.row(i) + off;
            const float* vh = p.v.row(i) + off;
            const float* qh = p.q.row(i) + off;
            // S += k v^T, then o = q^T S, both per head.
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
        float* y = out.row(i);
        matvec(s.attn.wo.data(), readout.data(), cfg.hidden_dim, cfg.hidden_dim, y);
        const float* x = states.row(i);
        for (int c = 0; c < cfg.hidden_dim; ++c) y[c] += x[c];
    }
    return out;
}

Matrix forward_ffn(const Model& model, int layer, const Matrix& states) {
    const ModelConfig& cfg = model.config();
    const Sublayer& s = model.sublayer(layer);
    Matrix out(states.rows, cfg.hidden_dim);
    std::vector<float> normed(static_cast<size_t>(cfg.hidden_dim));
    std::vector<float> mid(static_cast<size_t>(cfg.ffn_dim));
    for (int64_t i = 0; i < states.rows; ++i) {
        layer_norm_row(states.row(i), s.norm, cfg.hidden_dim, normed.data());
        matvec(s.ffn.w_in.data(), normed.data(), cfg.ffn_dim, cfg.hidden_dim, mid.data());
        for (int c = 0; c < cfg.ffn_dim; ++c) {
            mid[static_cast<size_t>(c)] = static_cast<float>(silu(mid[static_cast<size_t>(c)]));
        }
        float* y = out.row(i);
        matvec(s.ffn.w_out.data(), mid.data(), cfg.hidden_dim, cfg.ffn_dim, y);
        const float* x = states.row(i);
        for (int c = 0; c < cfg.hidden_dim; ++c) y[c] += x[c];
    }
    return out;
}

} // namespace

Matrix forward_sublayer(const Model& model, int layer, const Matrix& states,
                        PagedKVCache& kv, std::span<const int64_t> positions,
                        RequestId request) {
    if (layer < 0 || layer >= model.num_layers()) {
        throw ContractViolation("forward_sublayer: layer index out of range");
    }
    if (states.rows != static_cast<int64_t>(positions.size())) {
        throw ContractViolation("forward_sublayer: states row count must equal positions length");
    }
    switch (model.layer_kind(layer)) {
    case SublayerKind::FullAttention:
        return forward_softmax_attention(model, layer, states, kv, positions, request, std::nullopt);
    case SublayerKind::SlidingWindowAttention:
        return forward_softmax_attention(model, layer, states, kv, positions, request,
                                         model.config().window_size);
    case SublayerKind::LinearAttention:
        return forward_linear_attention(model, layer, states, kv, positions, request);
    case SublayerKind::FFN:
        return forward_ffn(model, layer, states);
    }
    throw ContractViolation("forward_sublayer: unknown sublayer kind");
}

DensePrefillResult dense_prefill(const Model& model, const Matrix& tokens,
                                 int kv_block_size, RequestId request) {
    if (tokens.rows < 1) throw ContractViolation("dense_prefill: tokens must be non-empty");
    if (tokens.cols != model.config().hidden_dim) {
        throw ContractViolation("dense_prefill: token width must equal hidden_dim");
    }
    PagedKVCache cache(model.num_layers(), model.config().hidden_dim, kv_block_size);
    std::vector<int64_t> positions(static_cast<size_t>(tokens.rows));
    for (int64_t i = 0; i < tokens.rows; ++i) positions[static_cast<size_t>(i)] = i;
    Matrix states = tokens;
    for (int l = 0; l < model.num_layers(); ++l) {
        states = forward_sublayer(model, l, states, cache, positions, request);
    }
    return DensePrefillResult{std::move(states), std::move(cache)};
}

} // namespace uniprefill
