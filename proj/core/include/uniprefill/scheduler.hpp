// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <vector>

#include "uniprefill/decode.hpp"
#include "uniprefill/propagation.hpp"

namespace uniprefill {

enum class Phase { Prefill, Decode, Finished };

const char* to_string(Phase phase);

/// Per-layer attention metadata of a packed batch, snapshotted as the forward
/// walks the layers. After every drop patch:
///   sum(seq_lens) == num_actual_tokens == query_start_loc.back().
struct LayerMeta {
    int layer = 0;
    std::vector<int64_t> query_start_loc;
    std::vector<int64_t> seq_lens;
    int64_t num_actual_tokens = 0;
};

/// Variable-length concatenated token states with request boundary offsets.
struct PackedBatch {
    Matrix tokens;
    std::vector<int64_t> cu_seqlens; // length R+1, cu_seqlens[0] == 0
    std::vector<RequestId> request_ids;
    std::vector<Phase> phases;
    std::vector<LayerMeta> layer_meta;

    int64_t num_requests() const { return static_cast<int64_t>(request_ids.size()); }
    int64_t segment_length(int64_t s) const {
        return cu_seqlens[static_cast<size_t>(s + 1)] - cu_seqlens[static_cast<size_t>(s)];
    }
    /// Throws ContractViolation on inconsistent offsets.
    void validate() const;
};

/// Apply per-request drop selections at one layer: physically compact the
/// selected prefill segments' token rows so downstream layers read contiguous
/// memory, and recompute the boundary offsets. Decode segments are never
/// dropped. selections[s] is empty for untouched segments.
void patch_metadata(PackedBatch& batch, const std::vector<std::optional<Selection>>& selections,
                    int layer);

struct RequestSpec {
    Matrix prompt;
    int64_t max_new_tokens = 16;
    int64_t arrival_step = 0;
};

struct RequestState {
    RequestId id = -1;
    Phase phase = Phase::Prefill;
    int64_t prompt_length = 0;
    int64_t arrival_step = 0;
    int64_t max_new_tokens = 0;
    DropHistory history;
    FlopsLedger ledger;
    std::vector<int32_t> generated;
    int64_t first_token_step = -1;
    int64_t finished_step = -1;
    double eligible_ms = -1.0;
    double first_token_ms = -1.0;
    double finished_ms = -1.0;
    std::vector<std::vector<float>> logits_trace; // populated when record_logits is on
};

enum class EngineMode { Dense, UniPrefill };

const char* to_string(EngineMode mode);
EngineMode engine_mode_from_string(const std::string& name);

struct EngineOptions {
    EngineMode mode = EngineMode::UniPrefill;
    ScoreConfig score;
    int tp_degree = 1;
    int64_t token_budget = 8192;
    int kv_block_size = 16;
    bool audit = false;
    bool record_logits = false;
    std::optional<std::vector<int>> drop_layers;
    bool allow_readmission = true;
};

struct StepEvent {
    RequestId id = -1;
    int64_t step = 0;
    int32_t token = -1;
    Phase phase = Phase::Prefill;
};

/// Continuous-batching engine: one logical scheduler thread owns all request
/// state; submissions are handed over through a queue and admitted FCFS under
/// a per-step token budget, decodes before new prefills.
class Engine {
public:
    Engine(Model model, EngineOptions options);

    /// Thread-safe. The request becomes schedulable once the engine step
    /// counter reaches spec.arrival_step.
    RequestId submit(RequestSpec spec);

    /// Run one scheduler step. Returns false when there is nothing left to
    /// do (no running, pending, or queued requests).
    bool step(std::vector<StepEvent>* events = nullptr);

    /// Steps until every submitted request finished.
    std::vector<StepEvent> run_to_completion();

    int64_t current_step() const { return step_; }
    bool all_finished() const;

    const Model& model() const { return model_; }
    const EngineOptions& options() const { return options_; }
    const RequestState& request(RequestId id) const;
    std::vector<RequestId> request_ids() const;
    PagedKVCache& cache() { return cache_; }
    const PagedKVCache& cache() const { return cache_; }
    const std::vector<SeqUsedRecord>& seqused_log() const { return seqused_log_; }
    const std::vector<LayerMeta>& last_step_layer_meta() const { return last_layer_meta_; }

private:
    struct Runtime {
        RequestState state;
        std::optional<TokenStream> stream; // prefill in flight
        std::set<int64_t> banned;          // no-readmission ablation
        int32_t last_token = -1;
        Matrix prompt;                     // retained until prefill runs
    };

    bool drop_here(int layer) const;
    void run_batch(const std::vector<RequestId>& segment_requests,
                   std::vector<StepEvent>* events);
    double now_ms() const;

    Model model_;
    EngineOptions options_;
    PagedKVCache cache_;
    std::set<int> drop_layers_;

    mutable std::mutex submit_mutex_;
    std::deque<std::pair<RequestId, RequestSpec>> submit_queue_;

    std::map<RequestId, Runtime> requests_;
    std::vector<RequestId> pending_;  // submitted, not yet prefilled (FCFS order)
    std::vector<RequestId> running_;  // decode phase (FCFS order)
    RequestId next_id_ = 0;
    int64_t step_ = 0;
    std::vector<SeqUsedRecord> seqused_log_;
    std::vector<LayerMeta> last_layer_meta_;
};

} // namespace uniprefill
