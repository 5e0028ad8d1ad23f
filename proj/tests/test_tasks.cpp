// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/importance.hpp"
#include "uniprefill/rng.hpp"
#include "uniprefill/tasks.hpp"

#include <algorithm>
#include <cstring>

using namespace uniprefill;

namespace {

ModelConfig task_config(uint64_t seed) {
    ModelConfig c;
    c.num_blocks = 2;
    c.sublayers_per_block = 2;
    c.layer_pattern = {SublayerKind::FullAttention, SublayerKind::SlidingWindowAttention,
                       SublayerKind::FFN};
    c.hidden_dim = 32;
    c.head_dim = 8;
    c.num_heads = 4;
    c.window_size = 16;
    c.ffn_dim = 64;
    c.vocab_size = 128;
    c.seed = seed;
    return c;
}

ScoreConfig task_score(float p = 0.9f) {
    ScoreConfig s;
    s.query_window_n = 8;
    s.block_size_g = 8;
    s.sink_count_a = 8;
    s.top_p = p;
    return s;
}

Matrix random_tokens(const Model& model, int64_t n, uint64_t seed) {
    const CounterRng rng(seed, 0x74736bULL);
    std::vector<int32_t> ids(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        ids[static_cast<size_t>(i)] = static_cast<int32_t>(
            rng.bits(static_cast<uint64_t>(i)) %
            static_cast<uint64_t>(model.config().vocab_size));
    }
    return model.embed(ids);
}

} // namespace

TEST_CASE("an aligned row dominates the importance scores at its layer") {
    const Model model = build_model(task_config(1));
    const int64_t n = 96;
    Matrix prompt = random_tokens(model, n, 2);
    const int64_t needle_pos = 43;
    std::vector<int64_t> window;
    for (int64_t i = n - 8; i < n; ++i) window.push_back(i);
    const std::vector<std::vector<int64_t>> groups{{needle_pos}};
    const AlignmentPlan plan = plan_alignment(model, 0, window, groups, 99);
    install_plan(prompt, plan, window, groups);

    // Score at layer 0 the way the drop pipeline would.
    std::vector<int64_t> pos(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = i;
    const AttnProjections proj = project_qkv(model, 0, prompt, pos);
    const ImportanceScores scores =
        score_tokens(proj.q, proj.k, model.config().num_heads, task_score());
    const int64_t needle_block = needle_pos / 8;
    int64_t best_block = 0;
    for (size_t g = 1; g < scores.block_scores.size(); ++g) {
        if (scores.block_scores[g] > scores.block_scores[static_cast<size_t>(best_block)]) {
            best_block = static_cast<int64_t>(g);
        }
    }
    CHECK(best_block == needle_block);
}

TEST_CASE("generated tasks are calibrated: dense accuracy is total") {
    const Model model = build_model(task_config(2));
    std::vector<TaskGenConfig> gen(1);
    gen[0].kind = TaskKind::NeedleRetrieval;
    gen[0].prompt_length = 96;
    gen[0].needle_depths = {0.45};
    gen[0].answer_len = 3;
    gen[0].count = 3;
    const std::vector<SyntheticTask> tasks = generate_tasks(model, gen, 7);
    REQUIRE(tasks.size() == 3);
    for (const SyntheticTask& t : tasks) {
        CHECK(t.dense_min_margin >= gen[0].margin_threshold);
        CHECK(t.expected_answer.size() == 3);
    }
    const std::vector<std::string> modes{"dense"};
    const TaskSuiteReport rep = run_task_suite(model, tasks, modes, task_score());
    CHECK(rep.per_mode[0].accuracy == 1.0);
}

TEST_CASE("p=1 acceleration reproduces dense answers token for token") {
    const Model model = build_model(task_config(3));
    std::vector<TaskGenConfig> gen(1);
    gen[0].prompt_length = 96;
    gen[0].needle_depths = {0.6};
    gen[0].answer_len = 4;
    gen[0].count = 2;
    const std::vector<SyntheticTask> tasks = generate_tasks(model, gen, 11);
    const std::vector<std::string> modes{"dense", "uniprefill"};
    const TaskSuiteReport rep = run_task_suite(model, tasks, modes, task_score(1.0f));
    CHECK(rep.per_mode[0].accuracy == 1.0);
    CHECK(rep.per_mode[1].accuracy == 1.0);
}

TEST_CASE("a needle inside the sink region is always retained") {
    const Model model = build_model(task_config(4));
    std::vector<TaskGenConfig> gen(1);
    gen[0].prompt_length = 96;
    gen[0].needle_depths = {0.03}; // lands below sink_count_a = 8? 0.03*95 ~ 3
    gen[0].answer_len = 3;
    gen[0].count = 2;
    const std::vector<SyntheticTask> tasks = generate_tasks(model, gen, 13);
    for (const SyntheticTask& t : tasks) {
        REQUIRE(t.needle_positions.size() == 1);
        CHECK(t.needle_positions[0] < 8);
    }
    const std::vector<std::string> modes{"uniprefill"};
    const TaskSuiteReport rep = run_task_suite(model, tasks, modes, task_score(0.99f));
    for (size_t i = 0; i < tasks.size(); ++i) {
        CHECK(rep.per_mode[0].needles_retained[i]);
        CHECK(rep.per_mode[0].correct[i]);
    }
}

TEST_CASE("needle retention tracks answer preservation at p=0.99") {
    const Model model = build_model(task_config(5));
    std::vector<TaskGenConfig> gen(2);
    gen[0].kind = TaskKind::NeedleRetrieval;
    gen[0].prompt_length = 128;
    gen[0].needle_depths = {0.5};
    gen[0].answer_len = 3;
    gen[0].count = 2;
    gen[1].kind = TaskKind::MultiNeedle;
    gen[1].prompt_length = 128;
    gen[1].needle_depths = {0.3, 0.65};
    gen[1].answer_len = 3;
    gen[1].count = 2;
    const std::vector<SyntheticTask> tasks = generate_tasks(model, gen, 17);
    const std::vector<std::string> modes{"uniprefill"};
    const TaskSuiteReport rep = run_task_suite(model, tasks, modes, task_score(0.99f));
    for (size_t i = 0; i < tasks.size(); ++i) {
        if (rep.per_mode[0].needles_retained[i]) {
            CHECK(rep.per_mode[0].correct[i]);
        }
    }
}

TEST_CASE("task kinds round trip through their names") {
    CHECK(task_kind_from_string("needle_retrieval") == TaskKind::NeedleRetrieval);
    CHECK(task_kind_from_string("multi_needle") == TaskKind::MultiNeedle);
    CHECK(std::string(to_string(TaskKind::MultiNeedle)) == "multi_needle");
}
