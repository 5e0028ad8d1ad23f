// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uniprefill/model.hpp"
#include "uniprefill/propagation.hpp"

namespace uniprefill {

enum class TaskKind { NeedleRetrieval, MultiNeedle };

const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

/// Content rows that concentrate a layer's attention: one shared row for the
/// scoring-window positions and one row per key group, chosen by alternating
/// maximization of the window-averaged per-head q.k logit (rotation-aware, so
/// only position-stable frequency components carry the alignment).
struct AlignmentPlan {
    std::vector<float> window_content;              // hidden_dim floats
    std::vector<std::vector<float>> group_content;  // one per key group
    double worst_head_logit = 0.0;                  // min over heads of the mean logit
};

AlignmentPlan plan_alignment(const Model& model, int layer,
                             std::span<const int64_t> window_positions,
                             std::span<const std::vector<int64_t>> key_groups, uint64_t seed,
                             std::span<const std::vector<float>> content_dirs = {},
                             double content_mix = 0.0);

/// Overwrite the planned rows in a prompt.
void install_plan(Matrix& prompt, const AlignmentPlan& plan,
                  std::span<const int64_t> window_positions,
                  std::span<const std::vector<int64_t>> key_groups);

/// One calibrated retrieval task: a prompt of synthetic embedding rows with
/// planted needle rows, plus the greedy continuation the dense model produces
/// for it. Tasks failing the calibration filter (unstable margins, answers
/// not depending on the needle) are regenerated.
struct SyntheticTask {
    TaskKind kind = TaskKind::NeedleRetrieval;
    int64_t prompt_length = 0;
    std::vector<int64_t> needle_positions;
    std::vector<int32_t> expected_answer;
    Matrix prompt;
    double dense_min_margin = 0.0;
};

struct TaskGenConfig {
    TaskKind kind = TaskKind::NeedleRetrieval;
    int64_t prompt_length = 256;
    std::vector<double> needle_depths = {0.5};
    int answer_len = 4;
    int window_span = 16;           // rows given the aligned query content
    double margin_threshold = 0.0015; // min dense top1-top2 logit gap per step
    int max_attempts = 48;
    int count = 1;
};

/// Calibration-filtered task generation. Tasks whose dense answers are not
/// margin-stable or do not change when the needle content changes are
/// rejected and retried; throws ContractViolation when max_attempts is
/// exhausted for a config.
std::vector<SyntheticTask> generate_tasks(const Model& model,
                                          std::span<const TaskGenConfig> configs, uint64_t seed);

struct TaskModeResult {
    std::vector<bool> correct;          // aligned with the input span
    std::vector<bool> needles_retained; // every drop event kept all needles
    double accuracy = 0.0;
};

struct TaskSuiteReport {
    std::vector<std::string> modes;
    std::vector<TaskModeResult> per_mode;
};

/// Greedy-decode every task under each mode and compare token-for-token
/// against the calibrated expected answer. Modes are engine mode names
/// ("dense" / "uniprefill").
TaskSuiteReport run_task_suite(const Model& model, std::span<const SyntheticTask> tasks,
                               std::span<const std::string> modes,
                               const ScoreConfig& score_config,
                               const AcceleratedOptions& options = {});

} // namespace uniprefill
