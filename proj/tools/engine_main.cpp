// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "uniprefill/error_bound.hpp"
#include "uniprefill/errors.hpp"
#include "uniprefill/report.hpp"

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw uniprefill::ConfigError("cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw uniprefill::ConfigError("cannot write " + path);
    out << text;
}

} // namespace

int main(int argc, char** argv) {
    using namespace uniprefill;
    CLI::App app{"desk-scale token-dropping prefill engine"};
    app.require_subcommand(1);

    // run
    auto* run_cmd = app.add_subcommand("run", "run a workload and emit a JSON report");
    std::string model_path, workload_path, score_path, mode_name = "uniprefill", report_path;
    std::string events_path;
    int tp = 1;
    int64_t token_budget = 8192;
    int kv_block_size = 16;
    bool flops_audit = false;
    run_cmd->add_option("--model-config", model_path)->required();
    run_cmd->add_option("--workload", workload_path)->required();
    run_cmd->add_option("--score-config", score_path)->required();
    run_cmd->add_option("--mode", mode_name)->check(CLI::IsMember({"dense", "uniprefill"}));
    run_cmd->add_option("--report", report_path)->required();
    run_cmd->add_option("--events", events_path);
    run_cmd->add_option("--tp", tp);
    run_cmd->add_option("--token-budget", token_budget);
    run_cmd->add_option("--kv-block-size", kv_block_size);
    run_cmd->add_flag("--flops-audit", flops_audit);

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "throughput grid over lengths and batch sizes");
    std::string bench_model_path, bench_score_path, bench_report_path;
    std::vector<int64_t> lengths{512, 1024, 2048, 4096, 8192};
    std::vector<int64_t> batches{1, 4, 16};
    std::vector<std::string> bench_modes{"dense", "uniprefill"};
    std::string bench_content = "low_entropy";
    int reps = 3;
    uint64_t bench_seed = 7;
    bench_cmd->add_option("--model-config", bench_model_path)->required();
    bench_cmd->add_option("--score-config", bench_score_path)->required();
    bench_cmd->add_option("--report", bench_report_path)->required();
    bench_cmd->add_option("--lengths", lengths)->delimiter(',');
    bench_cmd->add_option("--batches", batches)->delimiter(',');
    bench_cmd->add_option("--modes", bench_modes)->delimiter(',');
    bench_cmd->add_option("--content", bench_content);
    bench_cmd->add_option("--reps", reps);
    bench_cmd->add_option("--seed", bench_seed);

    // tasks
    auto* tasks_cmd = app.add_subcommand("tasks", "synthetic retrieval accuracy per mode");
    std::string suite_path, tasks_report_path;
    std::vector<std::string> task_modes{"dense", "uniprefill"};
    tasks_cmd->add_option("--suite", suite_path)->required();
    tasks_cmd->add_option("--modes", task_modes)->delimiter(',');
    tasks_cmd->add_option("--report", tasks_report_path)->required();

    // gen-workload
    auto* gen_cmd = app.add_subcommand("gen-workload", "deterministic workload file from a seed");
    std::string gen_out, arrival = "immediate", gen_content = "random";
    int num_requests = 4;
    double rate = 0.5;
    std::vector<int64_t> gen_lengths{256};
    int64_t max_new = 8;
    std::vector<double> needle_depths{0.5};
    uint64_t gen_seed = 0;
    gen_cmd->add_option("--out", gen_out)->required();
    gen_cmd->add_option("--num-requests", num_requests);
    gen_cmd->add_option("--arrival", arrival)->check(CLI::IsMember({"immediate", "poisson"}));
    gen_cmd->add_option("--rate", rate);
    gen_cmd->add_option("--lengths", gen_lengths)->delimiter(',');
    gen_cmd->add_option("--max-new", max_new);
    gen_cmd->add_option("--content", gen_content);
    gen_cmd->add_option("--needle-depths", needle_depths)->delimiter(',');
    gen_cmd->add_option("--seed", gen_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            const Model model = build_model(ModelConfig::from_json(load_json(model_path)));
            const ScoreConfig score = ScoreConfig::from_json(load_json(score_path));
            const Workload workload = Workload::from_json(load_json(workload_path));
            EngineOptions opts;
            opts.mode = engine_mode_from_string(mode_name);
            opts.score = score;
            opts.tp_degree = tp;
            opts.token_budget = token_budget;
            opts.kv_block_size = kv_block_size;
            Engine engine(model, opts);
            RunOptions ropts;
            ropts.flops_audit = flops_audit;
            ropts.events_path = events_path;
            const RunResult result = run_workload(engine, workload, ropts);
            write_text(report_path, result.report.dump(2) + "\n");
            std::cout << render_table(result.report);
            if (!verify_report_integrity(result.report)) {
                std::cerr << "report integrity audit failed\n";
                return 2;
            }
            if (flops_audit && !result.flops_audit_ok) {
                std::cerr << "flops audit failed: measured savings disagree with the drop history\n";
                return 2;
            }
            return 0;
        }
        if (*bench_cmd) {
            const Model model = build_model(ModelConfig::from_json(load_json(bench_model_path)));
            const ScoreConfig score = ScoreConfig::from_json(load_json(bench_score_path));
            BenchGridSpec spec;
            spec.context_lengths = lengths;
            spec.batch_sizes = batches;
            spec.modes = bench_modes;
            spec.repetitions = reps;
            spec.content_kind = bench_content;
            spec.seed = bench_seed;
            const nlohmann::ordered_json report = bench_grid(model, score, spec, &std::cerr);
            write_text(bench_report_path, report.dump(2) + "\n");
            std::cout << render_table(report);
            if (!verify_report_integrity(report)) {
                std::cerr << "report integrity audit failed\n";
                return 2;
            }
            return 0;
        }
        if (*tasks_cmd) {
            const nlohmann::json suite = load_json(suite_path);
            const Model model = build_model(ModelConfig::from_json(suite.at("model_config")));
            const ScoreConfig score = ScoreConfig::from_json(suite.at("score_config"));
            const uint64_t seed = suite.value("seed", 0ULL);
            std::vector<TaskGenConfig> gen_configs;
            for (const auto& t : suite.at("tasks")) {
                TaskGenConfig cfg;
                cfg.kind = task_kind_from_string(t.at("kind").get<std::string>());
                cfg.prompt_length = t.at("prompt_length").get<int64_t>();
                if (t.contains("needle_depths")) {
                    cfg.needle_depths = t.at("needle_depths").get<std::vector<double>>();
                }
                cfg.answer_len = t.value("answer_len", cfg.answer_len);
                cfg.margin_threshold = t.value("margin_threshold", cfg.margin_threshold);
                cfg.count = t.value("count", cfg.count);
                gen_configs.push_back(std::move(cfg));
            }
            const std::vector<SyntheticTask> tasks = generate_tasks(model, gen_configs, seed);
            const TaskSuiteReport suite_report =
                run_task_suite(model, tasks, task_modes, score);

            nlohmann::ordered_json report;
            report["num_tasks"] = tasks.size();
            auto by_mode = nlohmann::ordered_json::array();
            for (size_t m = 0; m < suite_report.modes.size(); ++m) {
                nlohmann::ordered_json jm;
                jm["mode"] = suite_report.modes[m];
                jm["accuracy"] = suite_report.per_mode[m].accuracy;
                auto per_task = nlohmann::ordered_json::array();
                for (size_t t = 0; t < tasks.size(); ++t) {
                    nlohmann::ordered_json jt;
                    jt["kind"] = to_string(tasks[t].kind);
                    jt["prompt_length"] = tasks[t].prompt_length;
                    jt["correct"] = static_cast<bool>(suite_report.per_mode[m].correct[t]);
                    jt["needles_retained"] =
                        static_cast<bool>(suite_report.per_mode[m].needles_retained[t]);
                    per_task.push_back(std::move(jt));
                }
                jm["tasks"] = std::move(per_task);
                by_mode.push_back(std::move(jm));
            }
            report["modes"] = std::move(by_mode);
            write_text(tasks_report_path, report.dump(2) + "\n");
            for (size_t m = 0; m < suite_report.modes.size(); ++m) {
                std::cout << suite_report.modes[m] << " accuracy "
                          << suite_report.per_mode[m].accuracy << "\n";
            }
            return 0;
        }
        if (*gen_cmd) {
            WorkloadGenSpec spec;
            spec.num_requests = num_requests;
            spec.arrival = arrival;
            spec.poisson_rate = rate;
            spec.prompt_lengths = gen_lengths;
            spec.max_new_tokens = max_new;
            spec.content_kind = gen_content;
            spec.needle_depths = needle_depths;
            spec.seed = gen_seed;
            const Workload w = gen_workload(spec);
            write_text(gen_out, w.to_json().dump(2) + "\n");
            return 0;
        }
    } catch (const AuditError& e) {
        std::cerr << "audit failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
