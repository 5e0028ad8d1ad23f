// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "uniprefill/report.hpp"

using namespace uniprefill;

namespace {

ModelConfig report_config(uint64_t seed) {
    ModelConfig c;
    c.num_blocks = 2;
    c.sublayers_per_block = 2;
    c.layer_pattern = {SublayerKind::FullAttention, SublayerKind::LinearAttention,
                       SublayerKind::FFN};
    c.hidden_dim = 32;
    c.head_dim = 8;
    c.num_heads = 4;
    c.window_size = 8;
    c.ffn_dim = 48;
    c.vocab_size = 64;
    c.seed = seed;
    return c;
}

ScoreConfig report_score() {
    ScoreConfig s;
    s.query_window_n = 8;
    s.block_size_g = 8;
    s.sink_count_a = 8;
    s.top_p = 0.9f;
    return s;
}

} // namespace

TEST_CASE("gen_workload is byte-identical for a fixed seed") {
    WorkloadGenSpec spec;
    spec.num_requests = 4;
    spec.arrival = "poisson";
    spec.poisson_rate = 0.5;
    spec.prompt_lengths = {64, 96};
    spec.seed = 9;
    const std::string a = gen_workload(spec).to_json().dump(2);
    const std::string b = gen_workload(spec).to_json().dump(2);
    CHECK(a == b);

    spec.seed = 10;
    CHECK(gen_workload(spec).to_json().dump(2) != a);

    // Arrival steps are reproducible and non-decreasing.
    spec.seed = 9;
    const Workload w = gen_workload(spec);
    int64_t prev = 0;
    for (const WorkloadEntry& e : w.entries) {
        CHECK(e.arrival_step >= prev);
        prev = e.arrival_step;
    }
}

TEST_CASE("workload json round trips") {
    WorkloadGenSpec spec;
    spec.num_requests = 3;
    spec.content_kind = "needle";
    spec.needle_depths = {0.25, 0.75};
    const Workload w = gen_workload(spec);
    const Workload back = Workload::from_json(nlohmann::json::parse(w.to_json().dump()));
    CHECK(back.to_json() == w.to_json());
}

TEST_CASE("needle materialization plants rows exactly at the requested depths") {
    const Model model = build_model(report_config(1));
    WorkloadEntry entry;
    entry.prompt_length = 64;
    entry.content_kind = "needle";
    entry.needle_depths = {0.5};
    const Matrix with_needle = materialize_prompt(model, entry, 3, 0);
    WorkloadEntry plain = entry;
    plain.content_kind = "random";
    const Matrix without = materialize_prompt(model, plain, 3, 0);
    REQUIRE(with_needle.rows == without.rows);
    // The construction rewrites the needle row and the tail scoring window.
    const int64_t needle_pos = 32; // round(0.5 * 63) = 32
    const int64_t window_begin = 64 - 8;
    for (int64_t i = 0; i < with_needle.rows; ++i) {
        bool differs = false;
        for (int c = 0; c < 32; ++c) differs = differs || with_needle.at(i, c) != without.at(i, c);
        if (i == needle_pos || i >= window_begin) {
            CHECK(differs);
        } else {
            CHECK(!differs);
        }
    }
}

TEST_CASE("run_workload emits an integral report with drop events") {
    const Model model = build_model(report_config(2));
    EngineOptions opts;
    opts.mode = EngineMode::UniPrefill;
    opts.score = report_score();
    Engine engine(model, opts);

    WorkloadGenSpec spec;
    spec.num_requests = 3;
    spec.prompt_lengths = {64, 96};
    spec.max_new_tokens = 4;
    spec.content_kind = "low_entropy";
    spec.seed = 5;
    const Workload w = gen_workload(spec);
    RunOptions ropts;
    ropts.flops_audit = true;
    const RunResult result = run_workload(engine, w, ropts);

    CHECK(result.flops_audit_ok);
    CHECK(verify_report_integrity(result.report));
    CHECK(result.report.at("requests").size() == 3);
    for (const auto& r : result.report.at("requests")) {
        CHECK(r.at("ttft_steps").get<int64_t>() >= 1);
        CHECK(r.at("tokens_per_s").get<double>() > 0.0);
    }
    CHECK(!result.events.empty());
    CHECK(!render_table(result.report).empty());

    // Low-entropy content actually concentrates attention and drops tokens.
    CHECK(result.report.at("aggregate").at("mean_retention_ratio").get<double>() < 0.95);
}

TEST_CASE("run reports are deterministic in token counts across runs") {
    const Model model = build_model(report_config(3));
    WorkloadGenSpec spec;
    spec.num_requests = 2;
    spec.prompt_lengths = {64};
    spec.max_new_tokens = 3;
    spec.seed = 6;
    const Workload w = gen_workload(spec);

    auto flops_of = [&]() {
        EngineOptions opts;
        opts.mode = EngineMode::UniPrefill;
        opts.score = report_score();
        Engine engine(model, opts);
        const RunResult r = run_workload(engine, w, {});
        return r.report.at("flops").at("total").get<uint64_t>();
    };
    CHECK(flops_of() == flops_of());
}

TEST_CASE("a single dense cell benchmarks at exactly 1.0x of itself") {
    const Model model = build_model(report_config(4));
    BenchGridSpec spec;
    spec.context_lengths = {64};
    spec.batch_sizes = {1};
    spec.modes = {"dense"};
    spec.repetitions = 1;
    const nlohmann::ordered_json report = bench_grid(model, report_score(), spec);
    CHECK(verify_report_integrity(report));
    const auto& cell = report.at("grid").at(0);
    CHECK(cell.at("speedup_vs_dense").get<double>() == 1.0);
    CHECK(cell.at("tokens_per_s").get<double>() > 0.0);
    CHECK(!render_table(report).empty());
}

TEST_CASE("oversized cells are skipped, not crashed") {
    const Model model = build_model(report_config(5));
    BenchGridSpec spec;
    spec.context_lengths = {64, 1 << 20};
    spec.batch_sizes = {1};
    spec.modes = {"dense"};
    spec.repetitions = 1;
    spec.max_cell_tokens = 1 << 10;
    const nlohmann::ordered_json report = bench_grid(model, report_score(), spec);
    bool skipped = false;
    for (const auto& cell : report.at("grid")) {
        if (cell.contains("skipped")) skipped = true;
    }
    CHECK(skipped);
}

TEST_CASE("report integrity detects tampering") {
    const Model model = build_model(report_config(6));
    EngineOptions opts;
    opts.mode = EngineMode::Dense;
    opts.score = report_score();
    Engine engine(model, opts);
    WorkloadGenSpec spec;
    spec.num_requests = 2;
    spec.prompt_lengths = {48};
    spec.max_new_tokens = 2;
    const Workload w = gen_workload(spec);
    RunResult result = run_workload(engine, w, {});
    REQUIRE(verify_report_integrity(result.report));
    result.report["aggregate"]["total_tokens"] = 1;
    CHECK(!verify_report_integrity(result.report));
}
