// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "uniprefill/config.hpp"
#include "uniprefill/kvcache.hpp"
#include "uniprefill/tensor.hpp"

namespace uniprefill {

struct LayerNormParams {
    std::vector<float> gamma;
    std::vector<float> beta;
};

/// q/k/v/o projections, each hidden_dim x hidden_dim row-major (out x in).
struct AttentionWeights {
    std::vector<float> wq, wk, wv, wo;
};

struct FfnWeights {
    std::vector<float> w_in;  // ffn_dim x hidden_dim
    std::vector<float> w_out; // hidden_dim x ffn_dim
};

struct Sublayer {
    SublayerKind kind = SublayerKind::FFN;
    LayerNormParams norm;
    AttentionWeights attn;
    FfnWeights ffn;
};

/// Immutable toy hybrid transformer. Weights are fully determined by
/// config.seed; safe to share across threads after construction.
class Model {
public:
    explicit Model(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    int num_layers() const { return config_.total_layers(); }
    SublayerKind layer_kind(int layer) const;
    bool is_block_boundary_after(int layer) const {
        return (layer + 1) % config_.pattern_length() == 0;
    }
    std::vector<int> full_attention_layers() const;

    const Sublayer& sublayer(int layer) const { return sublayers_[layer]; }
    const Matrix& embedding_table() const { return embedding_; }
    const Matrix& lm_head() const { return lm_head_; }

    /// FNV-1a over all weight bytes; equal seeds give equal checksums.
    uint64_t weight_checksum() const;

    /// Embed token ids as prompt rows.
    Matrix embed(std::span<const int32_t> token_ids) const;

    std::vector<float> logits(const float* hidden) const;
    int32_t argmax_token(const float* hidden) const;

private:
    ModelConfig config_;
    std::vector<Sublayer> sublayers_;
    Matrix embedding_;
    Matrix lm_head_;
};

Model build_model(const ModelConfig& config);

/// Rotate q/k head pairs in place by the token's logical position.
void apply_rope_inplace(float* row, int num_heads, int head_dim, int64_t position);

/// Pre-norm layer normalization of one row (eps 1e-5), double accumulation.
void layer_norm_row(const float* x, const LayerNormParams& norm, int dim, float* out);

/// y = W x for row-major W (out_dim x in_dim).
void matvec(const float* w, const float* x, int out_dim, int in_dim, float* y);

/// q/k/v of an attention sublayer for the given rows: pre-norm, projection,
/// rotary applied to q and k at the rows' logical positions. Matrices are
/// rows x hidden with head h occupying columns [h*head_dim, (h+1)*head_dim).
struct AttnProjections {
    Matrix q, k, v;
};
AttnProjections project_qkv(const Model& model, int layer, const Matrix& states,
                            std::span<const int64_t> positions);

/// Causal softmax attention readout (value aggregation, pre-Wo).
/// Query row j attends keys with kv_pos <= q_pos[j], and when `window` is set
/// additionally kv_pos > q_pos[j] - window. kv_pos must be strictly
/// increasing. Throws ContractViolation when a query sees no key.
Matrix attention_readout(const Matrix& q, std::span<const int64_t> q_pos,
                         const Matrix& k, const Matrix& v, std::span<const int64_t> kv_pos,
                         int num_heads, std::optional<int64_t> window);

/// One sublayer over the given rows. Attention kinds write K/V through the
/// cache at the slots dictated by positions; linear attention folds the rows
/// into the per-request recurrent state; FFN is position-independent.
/// Returns transformed states of identical shape (residual included).
Matrix forward_sublayer(const Model& model, int layer, const Matrix& states,
                        PagedKVCache& kv, std::span<const int64_t> positions,
                        RequestId request = 0);

struct DensePrefillResult {
    Matrix states;
    PagedKVCache cache;
};

/// Reference path: every layer over all tokens, no dropping. Returns final
/// hidden states and the fully populated cache.
DensePrefillResult dense_prefill(const Model& model, const Matrix& tokens,
                                 int kv_block_size = 16, RequestId request = 0);

} // namespace uniprefill
