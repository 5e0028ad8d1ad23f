// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/scheduler.hpp"

#include "uniprefill/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>

namespace uniprefill {

const char* to_string(Phase phase) {
    switch (phase) {
    case Phase::Prefill: return "prefill";
    case Phase::Decode: return "decode";
    case Phase::Finished: return "finished";
    }
    return "?";
}

const char* to_string(EngineMode mode) {
    return mode == EngineMode::Dense ? "dense" : "uniprefill";
}

EngineMode engine_mode_from_string(const std::string& name) {
    if (name == "dense") return EngineMode::Dense;
    if (name == "uniprefill") return EngineMode::UniPrefill;
    throw ConfigError("unknown engine mode: " + name + " (expected dense|uniprefill)");
}

void PackedBatch::validate() const {
    if (cu_seqlens.empty() || cu_seqlens[0] != 0) {
        throw ContractViolation("PackedBatch: cu_seqlens must start at 0");
    }
    if (cu_seqlens.size() != request_ids.size() + 1 || phases.size() != request_ids.size()) {
        throw ContractViolation("PackedBatch: offsets disagree with request count");
    }
    for (size_t i = 1; i < cu_seqlens.size(); ++i) {
        if (cu_seqlens[i] <= cu_seqlens[i - 1]) {
            throw ContractViolation("PackedBatch: cu_seqlens must be strictly increasing");
        }
    }
    if (cu_seqlens.back() != tokens.rows) {
        throw ContractViolation("PackedBatch: cu_seqlens must end at the total token count");
    }
}

void patch_metadata(PackedBatch& batch, const std::vector<std::optional<Selection>>& selections,
                    int layer) {
    (void)layer;
    if (selections.size() != static_cast<size_t>(batch.num_requests())) {
        throw ContractViolation("patch_metadata: one selection slot per request required");
    }
    batch.validate();
    int64_t new_total = 0;
    for (int64_t s = 0; s < batch.num_requests(); ++s) {
        if (selections[static_cast<size_t>(s)].has_value()) {
            if (batch.phases[static_cast<size_t>(s)] != Phase::Prefill) {
                throw ContractViolation("patch_metadata: drops apply only to prefill segments");
            }
            const Selection& sel = *selections[static_cast<size_t>(s)];
            if (sel.num_tokens() != batch.segment_length(s)) {
                throw ContractViolation("patch_metadata: selection length disagrees with segment");
            }
            new_total += sel.retained_count();
        } else {
            new_total += batch.segment_length(s);
        }
    }

    Matrix compacted(new_total, batch.tokens.cols);
    std::vector<int64_t> new_cu{0};
    int64_t out = 0;
    for (int64_t s = 0; s < batch.num_requests(); ++s) {
        const int64_t begin = batch.cu_seqlens[static_cast<size_t>(s)];
        const int64_t len = batch.segment_length(s);
        const auto& sel = selections[static_cast<size_t>(s)];
        for (int64_t i = 0; i < len; ++i) {
            if (sel.has_value() && !sel->keep_mask[static_cast<size_t>(i)]) continue;
            std::memcpy(compacted.row(out), batch.tokens.row(begin + i),
                        sizeof(float) * static_cast<size_t>(batch.tokens.cols));
            ++out;
        }
        new_cu.push_back(out);
    }
    batch.tokens = std::move(compacted);
    batch.cu_seqlens = std::move(new_cu);
}

Engine::Engine(Model model, EngineOptions options)
    : model_(std::move(model)), options_(std::move(options)),
      cache_(model_.num_layers(), model_.config().hidden_dim, options_.kv_block_size) {
    options_.score.validate();
    if (options_.token_budget < 1) throw ConfigError("token_budget must be positive");
    if (options_.tp_degree < 1) throw ConfigError("tp_degree must be positive");
    if (options_.tp_degree > 1 && model_.config().num_heads % options_.tp_degree != 0) {
        throw ConfigError("num_heads must be divisible by tp_degree");
    }
    drop_layers_ = options_.mode == EngineMode::UniPrefill
                       ? resolve_drop_layers(model_, options_.drop_layers)
                       : std::set<int>{};
    cache_.set_audit_enabled(options_.audit);
}

double Engine::now_ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

RequestId Engine::submit(RequestSpec spec) {
    if (spec.prompt.rows < 1) throw ContractViolation("submit: prompt must be non-empty");
    if (spec.prompt.cols != model_.config().hidden_dim) {
        throw ContractViolation("submit: prompt width must equal hidden_dim");
    }
    if (spec.max_new_tokens < 1) throw ContractViolation("submit: max_new_tokens must be >= 1");
    std::lock_guard<std::mutex> lock(submit_mutex_);
    const RequestId id = next_id_++;
    submit_queue_.emplace_back(id, std::move(spec));
    return id;
}

bool Engine::drop_here(int layer) const { return drop_layers_.count(layer) > 0; }

const RequestState& Engine::request(RequestId id) const {
    auto it = requests_.find(id);
    if (it == requests_.end()) throw ContractViolation("unknown request id");
    return it->second.state;
}

std::vector<RequestId> Engine::request_ids() const {
    std::vector<RequestId> ids;
    ids.reserve(requests_.size());
    for (const auto& [id, rt] : requests_) ids.push_back(id);
    return ids;
}

bool Engine::all_finished() const {
    {
        std::lock_guard<std::mutex> lock(submit_mutex_);
        if (!submit_queue_.empty()) return false;
    }
    if (!pending_.empty() || !running_.empty()) return false;
    return true;
}

bool Engine::step(std::vector<StepEvent>* events) {
    // Queued handoff: pull new submissions into scheduler-owned state.
    {
        std::lock_guard<std::mutex> lock(submit_mutex_);
        while (!submit_queue_.empty()) {
            auto [id, spec] = std::move(submit_queue_.front());
            submit_queue_.pop_front();
            Runtime rt;
            rt.state.id = id;
            rt.state.prompt_length = spec.prompt.rows;
            rt.state.arrival_step = spec.arrival_step;
            rt.state.max_new_tokens = spec.max_new_tokens;
            rt.prompt = std::move(spec.prompt);
            requests_.emplace(id, std::move(rt));
            pending_.push_back(id);
        }
    }
    if (pending_.empty() && running_.empty()) return false;

    const double now = now_ms();
    for (RequestId id : pending_) {
        Runtime& rt = requests_.at(id);
        if (rt.state.arrival_step <= step_ && rt.state.eligible_ms < 0) {
            rt.state.eligible_ms = now;
        }
    }

    // Decodes always join the step; new prefills are admitted FCFS by
    // (arrival_step, id) under the remaining token budget. A prompt larger
    // than the whole budget runs alone.
    std::vector<RequestId> segments(running_.begin(), running_.end());
    int64_t budget = options_.token_budget - static_cast<int64_t>(segments.size());

    std::vector<RequestId> arrived;
    for (RequestId id : pending_) {
        if (requests_.at(id).state.arrival_step <= step_) arrived.push_back(id);
    }
    std::stable_sort(arrived.begin(), arrived.end(), [this](RequestId a, RequestId b) {
        return requests_.at(a).state.arrival_step < requests_.at(b).state.arrival_step;
    });
    std::vector<RequestId> admitted;
    for (RequestId id : arrived) {
        const int64_t len = requests_.at(id).state.prompt_length;
        if (len <= budget) {
            admitted.push_back(id);
            budget -= len;
        } else if (segments.empty() && admitted.empty()) {
            admitted.push_back(id); // oversize request processed alone
            break;
        } else {
            break; // FCFS: do not skip ahead of a request that does not fit
        }
    }
    for (RequestId id : admitted) {
        segments.push_back(id);
        pending_.erase(std::find(pending_.begin(), pending_.end(), id));
    }

    if (segments.empty()) {
        // Nothing arrived yet; burn an idle tick so future arrivals come due.
        step_ += 1;
        return true;
    }

    run_batch(segments, events);
    step_ += 1;
    return true;
}

void Engine::run_batch(const std::vector<RequestId>& segment_requests,
                       std::vector<StepEvent>* events) {
    const int d = model_.config().hidden_dim;
    const int64_t num_segments = static_cast<int64_t>(segment_requests.size());

    PackedBatch batch;
    batch.request_ids = segment_requests;
    batch.cu_seqlens = {0};
    std::vector<int64_t> decode_positions(static_cast<size_t>(num_segments), -1);

    for (int64_t s = 0; s < num_segments; ++s) {
        Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
        batch.phases.push_back(rt.state.phase);
        if (rt.state.phase == Phase::Prefill) {
            rt.stream = TokenStream::from_prompt(rt.prompt);
            rt.state.history.original_length = rt.prompt.rows;
            rt.banned.clear();
            batch.cu_seqlens.push_back(batch.cu_seqlens.back() + rt.prompt.rows);
        } else {
            decode_positions[static_cast<size_t>(s)] =
                rt.state.history.original_length + rt.state.history.decode_appended;
            batch.cu_seqlens.push_back(batch.cu_seqlens.back() + 1);
        }
    }
    batch.tokens = Matrix(batch.cu_seqlens.back(), d);
    std::vector<Matrix> decode_rows(static_cast<size_t>(num_segments));
    for (int64_t s = 0; s < num_segments; ++s) {
        Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
        const int64_t begin = batch.cu_seqlens[static_cast<size_t>(s)];
        if (rt.state.phase == Phase::Prefill) {
            std::memcpy(batch.tokens.row(begin), rt.prompt.data.data(),
                        sizeof(float) * rt.prompt.data.size());
        } else {
            decode_rows[static_cast<size_t>(s)] =
                model_.embed(std::span<const int32_t>(&rt.last_token, 1));
            std::memcpy(batch.tokens.row(begin), decode_rows[static_cast<size_t>(s)].row(0),
                        sizeof(float) * static_cast<size_t>(d));
        }
    }

    auto rebuild_batch = [&]() {
        std::vector<int64_t> cu{0};
        for (int64_t s = 0; s < num_segments; ++s) {
            Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
            cu.push_back(cu.back() + (batch.phases[static_cast<size_t>(s)] == Phase::Prefill
                                          ? rt.stream->active_count()
                                          : 1));
        }
        Matrix tokens(cu.back(), d);
        for (int64_t s = 0; s < num_segments; ++s) {
            Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
            const int64_t begin = cu[static_cast<size_t>(s)];
            if (batch.phases[static_cast<size_t>(s)] == Phase::Prefill) {
                std::memcpy(tokens.row(begin), rt.stream->active_states.data.data(),
                            sizeof(float) * rt.stream->active_states.data.size());
            } else {
                std::memcpy(tokens.row(begin), decode_rows[static_cast<size_t>(s)].row(0),
                            sizeof(float) * static_cast<size_t>(d));
            }
        }
        batch.cu_seqlens = std::move(cu);
        batch.tokens = std::move(tokens);
    };

    const int num_layers = model_.num_layers();
    for (int l = 0; l < num_layers; ++l) {
        LayerMeta meta;
        meta.layer = l;
        meta.query_start_loc = batch.cu_seqlens;
        for (int64_t s = 0; s < num_segments; ++s) meta.seq_lens.push_back(batch.segment_length(s));
        meta.num_actual_tokens = batch.cu_seqlens.back();
        batch.layer_meta.push_back(std::move(meta));

        std::vector<std::optional<Selection>> selections(static_cast<size_t>(num_segments));
        const bool drop = drop_here(l);
        for (int64_t s = 0; s < num_segments; ++s) {
            Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
            const RequestId rid = segment_requests[static_cast<size_t>(s)];
            if (batch.phases[static_cast<size_t>(s)] == Phase::Prefill) {
                const int64_t entry_rows = rt.stream->active_count();
                LayerStepResult step_result = prefill_layer_step(
                    model_, l, rt.stream->active_states, rt.stream->logical_positions, cache_,
                    rid, options_.score, drop, options_.tp_degree,
                    options_.allow_readmission ? nullptr : &rt.banned);
                rt.state.ledger.add_layer(l, model_.layer_kind(l), entry_rows, model_.config());
                if (step_result.selection.has_value()) {
                    const Selection& sel = *step_result.selection;
                    rt.state.ledger.add_scoring(step_result.scoring_flops);
                    rt.state.ledger.add_drop(DropRecord{
                        l, entry_rows, sel.retained_count(),
                        static_cast<double>(sel.retained_count()) / static_cast<double>(entry_rows),
                        sel.covered_mass});
                    if (!options_.allow_readmission) {
                        for (int64_t i = 0; i < entry_rows; ++i) {
                            if (!sel.keep_mask[static_cast<size_t>(i)]) {
                                rt.banned.insert(
                                    rt.stream->logical_positions[static_cast<size_t>(i)]);
                            }
                        }
                    }
                    apply_drop(*rt.stream, sel, l, rt.state.history);
                    selections[static_cast<size_t>(s)] = std::move(step_result.selection);
                }
                rt.stream->active_states = std::move(step_result.new_states);
            } else {
                Matrix out = decode_layer_step(model_, l, decode_rows[static_cast<size_t>(s)],
                                               decode_positions[static_cast<size_t>(s)], cache_,
                                               rid, rt.state.history,
                                               options_.audit ? &seqused_log_ : nullptr);
                rt.state.ledger.add_layer(l, model_.layer_kind(l), 1, model_.config());
                decode_rows[static_cast<size_t>(s)] = std::move(out);
            }
        }

        patch_metadata(batch, selections, l);
        // Write transformed rows back into the packed representation.
        for (int64_t s = 0; s < num_segments; ++s) {
            Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
            const int64_t begin = batch.cu_seqlens[static_cast<size_t>(s)];
            if (batch.phases[static_cast<size_t>(s)] == Phase::Prefill) {
                if (rt.stream->active_count() != batch.segment_length(s)) {
                    throw AuditError("run_batch: packed segment diverged from its stream");
                }
                std::memcpy(batch.tokens.row(begin), rt.stream->active_states.data.data(),
                            sizeof(float) * rt.stream->active_states.data.size());
            } else {
                std::memcpy(batch.tokens.row(begin), decode_rows[static_cast<size_t>(s)].row(0),
                            sizeof(float) * static_cast<size_t>(d));
            }
        }

        if (model_.is_block_boundary_after(l)) {
            bool reconstituted = false;
            for (int64_t s = 0; s < num_segments; ++s) {
                Runtime& rt = requests_.at(segment_requests[static_cast<size_t>(s)]);
                if (batch.phases[static_cast<size_t>(s)] == Phase::Prefill &&
                    !rt.stream->parked_states.empty()) {
                    reconstitute(*rt.stream);
                    reconstituted = true;
                }
            }
            if (reconstituted) rebuild_batch();
        }
    }
    last_layer_meta_ = batch.layer_meta;

    // Surface results: prefill completions transition to decode, decode
    // segments advance one token.
    const double now = now_ms();
    for (int64_t s = 0; s < num_segments; ++s) {
        const RequestId rid = segment_requests[static_cast<size_t>(s)];
        Runtime& rt = requests_.at(rid);
        int32_t token = -1;
        if (batch.phases[static_cast<size_t>(s)] == Phase::Prefill) {
            const Matrix& final_states = rt.stream->active_states;
            const float* last = final_states.row(final_states.rows - 1);
            if (options_.record_logits) rt.state.logits_trace.push_back(model_.logits(last));
            token = model_.argmax_token(last);
            rt.state.first_token_step = step_;
            rt.state.first_token_ms = now;
            rt.state.phase = Phase::Decode;
            rt.stream.reset();
            rt.prompt = Matrix();
            running_.push_back(rid);
        } else {
            rt.state.history.decode_appended += 1;
            const float* hidden = decode_rows[static_cast<size_t>(s)].row(0);
            if (options_.record_logits) rt.state.logits_trace.push_back(model_.logits(hidden));
            token = model_.argmax_token(hidden);
        }
        rt.last_token = token;
        rt.state.generated.push_back(token);
        if (events != nullptr) {
            events->push_back(StepEvent{rid, step_, token,
                                        batch.phases[static_cast<size_t>(s)]});
        }
        if (static_cast<int64_t>(rt.state.generated.size()) >= rt.state.max_new_tokens) {
            rt.state.phase = Phase::Finished;
            rt.state.finished_step = step_;
            rt.state.finished_ms = now;
            running_.erase(std::find(running_.begin(), running_.end(), rid));
        }
    }
}

std::vector<StepEvent> Engine::run_to_completion() {
    std::vector<StepEvent> events;
    while (step(&events)) {
    }
    return events;
}

} // namespace uniprefill
