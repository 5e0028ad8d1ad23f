// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <vector>

#include "uniprefill/drop_history.hpp"
#include "uniprefill/kvcache.hpp"
#include "uniprefill/model.hpp"

namespace uniprefill {

/// Effective KV length the engine actually exposed to a decode attention
/// layer, recorded when auditing is on.
struct SeqUsedRecord {
    int layer = 0;
    RequestId request = 0;
    int64_t step_index = 0; // decode_appended count including the current token
    int64_t seqused = 0;
};

/// One sublayer of a single decode token at logical position `position`.
/// Attention layers write the token's K/V, then attend over the retained
/// prompt positions in force at this layer (per the drop history) plus all
/// appended decode tokens, window-limited for sliding-window layers. Returns
/// the transformed 1 x hidden row.
Matrix decode_layer_step(const Model& model, int layer, const Matrix& row, int64_t position,
                         PagedKVCache& cache, RequestId request, const DropHistory& history,
                         std::vector<SeqUsedRecord>* seqused_log = nullptr);

/// All layers for one decode token. Does not touch history.decode_appended;
/// the caller advances it after the step.
Matrix decode_one_token(const Model& model, const Matrix& row, int64_t position,
                        PagedKVCache& cache, RequestId request, const DropHistory& history,
                        std::vector<SeqUsedRecord>* seqused_log = nullptr);

/// Greedy continuation after a prefill: the first token comes from the final
/// prompt hidden state, each further token from one decode pass. Returns
/// `num_tokens` token ids and optionally the logits of each emitted token.
std::vector<int32_t> greedy_decode(const Model& model, const float* last_prompt_hidden,
                                   PagedKVCache& cache, RequestId request, DropHistory& history,
                                   int64_t num_tokens,
                                   std::vector<std::vector<float>>* logits_trace = nullptr,
                                   std::vector<SeqUsedRecord>* seqused_log = nullptr);

} // namespace uniprefill
