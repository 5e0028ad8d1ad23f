// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/tasks.hpp"

#include "uniprefill/decode.hpp"
#include "uniprefill/errors.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace uniprefill {

const char* to_string(TaskKind kind) {
    return kind == TaskKind::NeedleRetrieval ? "needle_retrieval" : "multi_needle";
}

TaskKind task_kind_from_string(const std::string& name) {
    if (name == "needle_retrieval") return TaskKind::NeedleRetrieval;
    if (name == "multi_needle") return TaskKind::MultiNeedle;
    throw ConfigError("unknown task kind: " + name);
}

namespace {

void standardize(std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double& x : v) {
        x -= mean;
        var += x * x;
    }
    var /= static_cast<double>(v.size());
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (double& x : v) x *= inv;
}

/// Alternating maximizer of the mean per-head logit between a shared window
/// row and per-group key rows. Rotation means over position sets damp the
/// frequency components that would wash out across the span.
struct Aligner {
    const Model& model;
    const Sublayer& weights;
    int d, heads, head_dim;

    Aligner(const Model& m, int layer) : model(m), weights(m.sublayer(layer)) {
        if (weights.kind != SublayerKind::FullAttention &&
            weights.kind != SublayerKind::SlidingWindowAttention) {
            throw ConfigError("plan_alignment: layer must project q/k");
        }
        d = m.config().hidden_dim;
        heads = m.config().num_heads;
        head_dim = m.config().head_dim;
    }

    std::vector<double> mean_rotation(const std::vector<double>& v,
                                      std::span<const int64_t> positions, int sign) const {
        std::vector<double> out(v.size(), 0.0);
        for (int64_t p : positions) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < head_dim / 2; ++i) {
                    const double theta =
                        std::pow(10000.0, -2.0 * i / head_dim) * sign * static_cast<double>(p);
                    const double c = std::cos(theta);
                    const double s = std::sin(theta);
                    const size_t i0 = static_cast<size_t>(h * head_dim + 2 * i);
                    out[i0] += v[i0] * c - v[i0 + 1] * s;
                    out[i0 + 1] += v[i0] * s + v[i0 + 1] * c;
                }
            }
        }
        for (double& x : out) x /= static_cast<double>(positions.size());
        return out;
    }

    std::vector<double> mat(const std::vector<float>& w, const std::vector<double>& v) const {
        std::vector<double> out(static_cast<size_t>(d), 0.0);
        for (int r = 0; r < d; ++r) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) acc += static_cast<double>(w[static_cast<size_t>(r * d + c)]) * v[static_cast<size_t>(c)];
            out[static_cast<size_t>(r)] = acc;
        }
        return out;
    }

    std::vector<double> mat_t(const std::vector<float>& w, const std::vector<double>& v) const {
        std::vector<double> out(static_cast<size_t>(d), 0.0);
        for (int r = 0; r < d; ++r) {
            for (int c = 0; c < d; ++c) out[static_cast<size_t>(c)] += static_cast<double>(w[static_cast<size_t>(r * d + c)]) * v[static_cast<size_t>(r)];
        }
        return out;
    }

    double optimize(std::span<const int64_t> window_positions,
                    std::span<const std::vector<int64_t>> key_groups, uint64_t seed,
                    std::vector<double>& zq, std::vector<std::vector<double>>& zks) const {
        const CounterRng rng(seed, 0x616c69676eULL);
        zq.resize(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) zq[static_cast<size_t>(i)] = rng.normal(static_cast<uint64_t>(i), 1.0);
        standardize(zq);
        zks.assign(key_groups.size(), std::vector<double>(static_cast<size_t>(d), 0.0));
        std::vector<double> head_weight(static_cast<size_t>(heads), 1.0);
        double worst = 0.0;
        for (int iter = 0; iter < 12; ++iter) {
            const std::vector<double> u = mean_rotation(mat(weights.attn.wq, zq), window_positions, +1);
            std::vector<double> u_weighted = u;
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < head_dim; ++i) u_weighted[static_cast<size_t>(h * head_dim + i)] *= head_weight[static_cast<size_t>(h)];
            }
            std::vector<double> q_grad(static_cast<size_t>(d), 0.0);
            std::vector<double> head_logit(static_cast<size_t>(heads), 0.0);
            for (size_t g = 0; g < key_groups.size(); ++g) {
                zks[g] = mat_t(weights.attn.wk, mean_rotation(u_weighted, key_groups[g], -1));
                standardize(zks[g]);
                const std::vector<double> kv = mean_rotation(mat(weights.attn.wk, zks[g]), key_groups[g], +1);
                for (int h = 0; h < heads; ++h) {
                    double lg = 0.0;
                    for (int i = 0; i < head_dim; ++i) {
                        lg += u[static_cast<size_t>(h * head_dim + i)] * kv[static_cast<size_t>(h * head_dim + i)];
                    }
                    head_logit[static_cast<size_t>(h)] +=
                        lg / std::sqrt(static_cast<double>(head_dim)) / static_cast<double>(key_groups.size());
                }
                std::vector<double> kv_weighted = kv;
                for (int h = 0; h < heads; ++h) {
                    for (int i = 0; i < head_dim; ++i) kv_weighted[static_cast<size_t>(h * head_dim + i)] *= head_weight[static_cast<size_t>(h)];
                }
                const std::vector<double> gq = mat_t(weights.attn.wq, mean_rotation(kv_weighted, window_positions, -1));
                for (int i = 0; i < d; ++i) q_grad[static_cast<size_t>(i)] += gq[static_cast<size_t>(i)];
            }
            zq = q_grad;
            standardize(zq);
            worst = std::numeric_limits<double>::infinity();
            for (int h = 0; h < heads; ++h) {
                worst = std::min(worst, head_logit[static_cast<size_t>(h)]);
                head_weight[static_cast<size_t>(h)] =
                    0.5 * head_weight[static_cast<size_t>(h)] + 0.5 / std::max(head_logit[static_cast<size_t>(h)], 0.5);
            }
        }
        return worst;
    }
};

// Pre-norm layer normalization is scale-invariant, so planted rows can sit at
// a small amplitude without touching the planned q/k alignment. Keeping them
// small stops the constructed rows from dominating the residual stream, so
// the attention readout (where the needle content lives) stays a material
// fraction of the final hidden state.
constexpr double kPlantedRowScale = 0.125;

std::vector<float> to_float(const std::vector<double>& v) {
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(kPlantedRowScale * v[i]);
    return out;
}

} // namespace

AlignmentPlan plan_alignment(const Model& model, int layer,
                             std::span<const int64_t> window_positions,
                             std::span<const std::vector<int64_t>> key_groups, uint64_t seed,
                             std::span<const std::vector<float>> content_dirs,
                             double content_mix) {
    if (window_positions.empty() || key_groups.empty()) {
        throw ContractViolation("plan_alignment: need window positions and key groups");
    }
    if (!content_dirs.empty() && content_dirs.size() != key_groups.size()) {
        throw ContractViolation("plan_alignment: one content direction per group expected");
    }
    const Aligner aligner(model, layer);
    std::vector<double> zq;
    std::vector<std::vector<double>> zks;
    AlignmentPlan plan;
    plan.worst_head_logit = aligner.optimize(window_positions, key_groups, seed, zq, zks);
    plan.window_content = to_float(zq);
    for (size_t g = 0; g < zks.size(); ++g) {
        if (!content_dirs.empty() && !content_dirs[g].empty()) {
            if (content_dirs[g].size() != static_cast<size_t>(model.config().hidden_dim)) {
                throw ContractViolation("plan_alignment: content direction width mismatch");
            }
            // Mix relative to the carrier's norm (sqrt(d) after standardizing)
            // so content_mix is a real blend ratio, not a vanishing nudge.
            double carrier = 0.0;
            for (double x : zks[g]) carrier += x * x;
            carrier = std::sqrt(carrier);
            for (size_t i = 0; i < zks[g].size(); ++i) {
                zks[g][i] += content_mix * carrier * static_cast<double>(content_dirs[g][i]);
            }
            standardize(zks[g]);
        }
        plan.group_content.push_back(to_float(zks[g]));
    }
    return plan;
}

void install_plan(Matrix& prompt, const AlignmentPlan& plan,
                  std::span<const int64_t> window_positions,
                  std::span<const std::vector<int64_t>> key_groups) {
    const size_t width = static_cast<size_t>(prompt.cols);
    if (plan.window_content.size() != width || plan.group_content.size() != key_groups.size()) {
        throw ContractViolation("install_plan: plan does not match the prompt");
    }
    for (size_t g = 0; g < key_groups.size(); ++g) {
        for (int64_t p : key_groups[g]) {
            std::memcpy(prompt.row(p), plan.group_content[g].data(), sizeof(float) * width);
        }
    }
    for (int64_t p : window_positions) {
        std::memcpy(prompt.row(p), plan.window_content.data(), sizeof(float) * width);
    }
}

namespace {

struct DenseRun {
    std::vector<int32_t> answer;
    double min_margin = 0.0;
};

DenseRun dense_answer(const Model& model, const Matrix& prompt, int answer_len) {
    DensePrefillResult pre = dense_prefill(model, prompt);
    DropHistory history;
    history.original_length = prompt.rows;
    std::vector<std::vector<float>> logits;
    DenseRun run;
    run.answer = greedy_decode(model, pre.states.row(pre.states.rows - 1), pre.cache, 0, history,
                               answer_len, &logits);
    run.min_margin = std::numeric_limits<double>::infinity();
    for (const std::vector<float>& l : logits) {
        float top1 = -std::numeric_limits<float>::infinity();
        float top2 = -std::numeric_limits<float>::infinity();
        for (float x : l) {
            if (x > top1) {
                top2 = top1;
                top1 = x;
            } else if (x > top2) {
                top2 = x;
            }
        }
        run.min_margin = std::min(run.min_margin, static_cast<double>(top1 - top2));
    }
    return run;
}

std::vector<float> unit_direction(uint64_t seed, uint64_t stream, int d) {
    const CounterRng rng(seed, stream);
    std::vector<float> dir(static_cast<size_t>(d));
    double norm = 0.0;
    for (int i = 0; i < d; ++i) {
        dir[static_cast<size_t>(i)] = rng.normal(static_cast<uint64_t>(i), 1.0);
        norm += static_cast<double>(dir[static_cast<size_t>(i)]) * dir[static_cast<size_t>(i)];
    }
    norm = std::sqrt(norm);
    for (float& x : dir) x = static_cast<float>(x / norm);
    return dir;
}

Matrix build_task_prompt(const Model& model, const TaskGenConfig& cfg,
                         const std::vector<int64_t>& needle_positions, bool with_needles,
                         uint64_t attempt_seed) {
    const ModelConfig& mc = model.config();
    const CounterRng rng(attempt_seed, 0x7461736bULL);
    std::vector<int32_t> filler(static_cast<size_t>(cfg.prompt_length));
    for (int64_t i = 0; i < cfg.prompt_length; ++i) {
        filler[static_cast<size_t>(i)] = static_cast<int32_t>(
            rng.bits(static_cast<uint64_t>(i)) % static_cast<uint64_t>(mc.vocab_size));
    }
    Matrix prompt = model.embed(filler);

    std::vector<int64_t> window;
    for (int64_t i = cfg.prompt_length - cfg.window_span; i < cfg.prompt_length; ++i) {
        window.push_back(i);
    }
    std::vector<std::vector<int64_t>> groups;
    std::vector<std::vector<float>> contents;
    for (size_t k = 0; k < needle_positions.size(); ++k) {
        groups.push_back({needle_positions[k]});
        contents.push_back(unit_direction(attempt_seed, hash_combine(1, k), mc.hidden_dim));
    }
    const AlignmentPlan plan =
        plan_alignment(model, 0, window, groups, hash_combine(attempt_seed, 0x706cULL), contents,
                       /*content_mix=*/0.8);
    if (with_needles) {
        install_plan(prompt, plan, window, groups);
    } else {
        // Ablation probe: the scoring window keeps its content, the needle
        // rows stay plain filler.
        for (int64_t p : window) {
            std::memcpy(prompt.row(p), plan.window_content.data(),
                        sizeof(float) * static_cast<size_t>(mc.hidden_dim));
        }
    }
    return prompt;
}

} // namespace

std::vector<SyntheticTask> generate_tasks(const Model& model,
                                          std::span<const TaskGenConfig> configs, uint64_t seed) {
    std::vector<SyntheticTask> tasks;
    for (size_t ci = 0; ci < configs.size(); ++ci) {
        const TaskGenConfig& cfg = configs[ci];
        if (cfg.prompt_length < 2 * cfg.window_span) {
            throw ConfigError("task prompt_length too short for its window span");
        }
        for (int inst = 0; inst < cfg.count; ++inst) {
            std::vector<int64_t> needle_positions;
            for (double depth : cfg.needle_depths) {
                int64_t pos = static_cast<int64_t>(
                    std::llround(depth * static_cast<double>(cfg.prompt_length - 1)));
                pos = std::clamp<int64_t>(pos, 0, cfg.prompt_length - cfg.window_span - 1);
                needle_positions.push_back(pos);
            }
            std::sort(needle_positions.begin(), needle_positions.end());
            needle_positions.erase(std::unique(needle_positions.begin(), needle_positions.end()),
                                   needle_positions.end());

            bool accepted = false;
            for (int attempt = 0; attempt < cfg.max_attempts && !accepted; ++attempt) {
                const uint64_t attempt_seed = hash_combine(
                    seed, hash_combine(ci * 1009 + static_cast<uint64_t>(inst),
                                       static_cast<uint64_t>(attempt)));
                const Matrix prompt =
                    build_task_prompt(model, cfg, needle_positions, true, attempt_seed);
                const DenseRun base = dense_answer(model, prompt, cfg.answer_len);
                if (base.min_margin < cfg.margin_threshold) continue;

                // Needle-dependence probe: ablating the needle rows must
                // change the dense answer, otherwise the task would measure
                // nothing about retrieval.
                const Matrix ablated =
                    build_task_prompt(model, cfg, needle_positions, false, attempt_seed);
                const DenseRun probe = dense_answer(model, ablated, cfg.answer_len);
                if (probe.answer == base.answer) continue;

                SyntheticTask task;
                task.kind = cfg.kind;
                task.prompt_length = cfg.prompt_length;
                task.needle_positions = needle_positions;
                task.expected_answer = base.answer;
                task.prompt = prompt;
                task.dense_min_margin = base.min_margin;
                tasks.push_back(std::move(task));
                accepted = true;
            }
            if (!accepted) {
                throw ContractViolation("generate_tasks: calibration filter exhausted attempts");
            }
        }
    }
    return tasks;
}

TaskSuiteReport run_task_suite(const Model& model, std::span<const SyntheticTask> tasks,
                               std::span<const std::string> modes,
                               const ScoreConfig& score_config,
                               const AcceleratedOptions& options) {
    TaskSuiteReport report;
    for (const std::string& mode_name : modes) {
        const EngineMode mode = engine_mode_from_string(mode_name);
        TaskModeResult result;
        int64_t correct_count = 0;
        for (const SyntheticTask& task : tasks) {
            std::vector<int32_t> answer;
            bool needles_kept = true;
            if (mode == EngineMode::Dense) {
                DensePrefillResult pre = dense_prefill(model, task.prompt);
                DropHistory history;
                history.original_length = task.prompt.rows;
                answer = greedy_decode(model, pre.states.row(pre.states.rows - 1), pre.cache, 0,
                                       history, static_cast<int64_t>(task.expected_answer.size()));
            } else {
                PrefillResult pre = accelerated_prefill(model, task.prompt, score_config, options);
                for (const DropEvent& e : pre.history.events) {
                    for (int64_t pos : task.needle_positions) {
                        if (!std::binary_search(e.retained_positions.begin(),
                                                e.retained_positions.end(), pos)) {
                            needles_kept = false;
                        }
                    }
                }
                answer = greedy_decode(model, pre.final_states.row(pre.final_states.rows - 1),
                                       pre.cache, 0, pre.history,
                                       static_cast<int64_t>(task.expected_answer.size()));
            }
            const bool ok = answer == task.expected_answer;
            correct_count += ok ? 1 : 0;
            result.correct.push_back(ok);
            result.needles_retained.push_back(needles_kept);
        }
        result.accuracy = tasks.empty()
                              ? 1.0
                              : static_cast<double>(correct_count) / static_cast<double>(tasks.size());
        report.modes.push_back(mode_name);
        report.per_mode.push_back(std::move(result));
    }
    return report;
}

} // namespace uniprefill
