// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uniprefill/scheduler.hpp"
#include "uniprefill/tasks.hpp"

namespace uniprefill {

struct WorkloadEntry {
    int64_t arrival_step = 0;
    int64_t prompt_length = 0;
    int64_t max_new_tokens = 1;
    std::string content_kind = "random"; // random | low_entropy | needle
    std::vector<double> needle_depths;   // needle kind only
};

struct Workload {
    uint64_t seed = 0;
    std::vector<WorkloadEntry> entries;

    static Workload from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct WorkloadGenSpec {
    int num_requests = 4;
    std::string arrival = "immediate"; // immediate | poisson
    double poisson_rate = 0.5;         // mean arrivals per step
    std::vector<int64_t> prompt_lengths = {256};
    int64_t max_new_tokens = 8;
    std::string content_kind = "random";
    std::vector<double> needle_depths = {0.5};
    uint64_t seed = 0;
};

/// Deterministic workload from a seed: same spec, same bytes.
Workload gen_workload(const WorkloadGenSpec& spec);

/// Materialize one request's prompt rows. random: embedded random token ids.
/// low_entropy: constant filler with a few rows aligned to the tail query so
/// attention concentrates and top-p drops aggressively. needle: random filler
/// with aligned content rows at the requested depths.
Matrix materialize_prompt(const Model& model, const WorkloadEntry& entry, uint64_t workload_seed,
                          int request_index);

struct RunResult {
    nlohmann::ordered_json report;
    std::vector<StepEvent> events;
    bool flops_audit_ok = true;
};

struct RunOptions {
    bool flops_audit = false;
    std::string events_path; // JSON-lines sink, empty to skip
};

/// Drive a workload through the engine to completion and assemble the run
/// report (per-request TTFT and throughput, drop events, FLOPs totals, cache
/// stats). With flops_audit set, every accelerated request is cross-checked
/// against the drop-history formula; mismatches fail the run.
RunResult run_workload(Engine& engine, const Workload& workload, const RunOptions& options = {});

struct BenchGridSpec {
    std::vector<int64_t> context_lengths = {512, 1024, 2048, 4096, 8192};
    std::vector<int64_t> batch_sizes = {1, 4, 16};
    std::vector<std::string> modes = {"dense", "uniprefill"};
    int repetitions = 3;
    std::string content_kind = "low_entropy";
    uint64_t seed = 7;
    int64_t max_cell_tokens = 1 << 22; // skip guard: length*batch above this marks the cell
};

/// Throughput grid over (context length, batch size, mode) cells: each cell
/// runs `repetitions` times and reports the median wall-clock prefill
/// throughput, with dense as the 1.0x baseline.
nlohmann::ordered_json bench_grid(const Model& model, const ScoreConfig& score_config,
                                  const BenchGridSpec& spec, std::ostream* progress = nullptr);

/// Plain-text rendering of a run or bench report.
std::string render_table(const nlohmann::ordered_json& report);

/// Re-derive every aggregate from the per-request records; false on any
/// disagreement.
bool verify_report_integrity(const nlohmann::ordered_json& report);

} // namespace uniprefill
