// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/report.hpp"

#include "uniprefill/errors.hpp"
#include "uniprefill/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>

namespace uniprefill {

Workload Workload::from_json(const nlohmann::json& j) {
    Workload w;
    try {
        // Accept either a bare list of entries or {seed, entries}.
        const nlohmann::json& entries = j.is_array() ? j : j.at("entries");
        w.seed = j.is_array() ? 0 : j.value("seed", 0ULL);
        for (const auto& e : entries) {
            WorkloadEntry entry;
            entry.arrival_step = e.at("arrival_step").get<int64_t>();
            entry.prompt_length = e.at("prompt_length").get<int64_t>();
            entry.max_new_tokens = e.at("max_new_tokens").get<int64_t>();
            entry.content_kind = e.at("content_kind").get<std::string>();
            if (e.contains("needle_depths")) {
                entry.needle_depths = e.at("needle_depths").get<std::vector<double>>();
            }
            w.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("bad workload document: ") + ex.what());
    }
    return w;
}

nlohmann::ordered_json Workload::to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    auto arr = nlohmann::ordered_json::array();
    for (const WorkloadEntry& e : entries) {
        nlohmann::ordered_json je;
        je["arrival_step"] = e.arrival_step;
        je["prompt_length"] = e.prompt_length;
        je["max_new_tokens"] = e.max_new_tokens;
        je["content_kind"] = e.content_kind;
        if (!e.needle_depths.empty()) je["needle_depths"] = e.needle_depths;
        arr.push_back(std::move(je));
    }
    j["entries"] = std::move(arr);
    return j;
}

Workload gen_workload(const WorkloadGenSpec& spec) {
    if (spec.num_requests < 1) throw ConfigError("gen_workload: num_requests must be positive");
    if (spec.prompt_lengths.empty()) throw ConfigError("gen_workload: prompt_lengths empty");
    const CounterRng rng(spec.seed, 0x776f726bULL);
    Workload w;
    w.seed = spec.seed;
    int64_t step = 0;
    for (int i = 0; i < spec.num_requests; ++i) {
        WorkloadEntry e;
        if (spec.arrival == "poisson") {
            const double u = rng.uniform(static_cast<uint64_t>(i));
            const double gap = -std::log(u) / std::max(spec.poisson_rate, 1e-9);
            step += static_cast<int64_t>(std::llround(gap));
        } else if (spec.arrival != "immediate") {
            throw ConfigError("gen_workload: arrival must be immediate|poisson");
        }
        e.arrival_step = step;
        e.prompt_length = spec.prompt_lengths[static_cast<size_t>(i) % spec.prompt_lengths.size()];
        e.max_new_tokens = spec.max_new_tokens;
        e.content_kind = spec.content_kind;
        if (spec.content_kind == "needle") e.needle_depths = spec.needle_depths;
        w.entries.push_back(std::move(e));
    }
    return w;
}

Matrix materialize_prompt(const Model& model, const WorkloadEntry& entry, uint64_t workload_seed,
                          int request_index) {
    const ModelConfig& cfg = model.config();
    const int64_t n = entry.prompt_length;
    if (n < 2) throw ConfigError("materialize_prompt: prompt_length must be >= 2");
    const CounterRng rng(workload_seed, hash_combine(0x70726f6dULL, static_cast<uint64_t>(request_index)));

    auto random_ids = [&](bool constant) {
        std::vector<int32_t> ids(static_cast<size_t>(n));
        const int32_t fixed =
            static_cast<int32_t>(rng.bits(0) % static_cast<uint64_t>(cfg.vocab_size));
        for (int64_t i = 0; i < n; ++i) {
            ids[static_cast<size_t>(i)] =
                constant ? fixed
                         : static_cast<int32_t>(rng.bits(static_cast<uint64_t>(i) + 1) %
                                                static_cast<uint64_t>(cfg.vocab_size));
        }
        return ids;
    };

    if (entry.content_kind == "random") {
        return model.embed(random_ids(false));
    }
    if (entry.content_kind == "low_entropy") {
        // Constant filler with contiguous attractor groups covering an eighth
        // of the rows, all keyed to the tail query content: attention
        // concentrates there and top-p retains little of the filler.
        Matrix prompt = model.embed(random_ids(true));
        const int64_t window_span = std::min<int64_t>(64, std::max<int64_t>(4, n / 4));
        const int64_t group_len = std::min<int64_t>(64, std::max<int64_t>(4, n / 16));
        const int64_t num_groups = std::max<int64_t>(1, n / 8 / group_len);
        std::vector<int64_t> window;
        for (int64_t i = n - window_span; i < n; ++i) window.push_back(i);
        std::vector<std::vector<int64_t>> groups;
        for (int64_t g = 0; g < num_groups; ++g) {
            const int64_t start = n / 8 + g * (5 * n / 8) / num_groups;
            std::vector<int64_t> group;
            for (int64_t i = 0; i < group_len; ++i) group.push_back(start + i);
            groups.push_back(std::move(group));
        }
        const AlignmentPlan plan = plan_alignment(
            model, 0, window, groups, hash_combine(workload_seed, static_cast<uint64_t>(request_index)));
        install_plan(prompt, plan, window, groups);
        return prompt;
    }
    if (entry.content_kind == "needle") {
        Matrix prompt = model.embed(random_ids(false));
        const int64_t window_span = std::min<int64_t>(16, std::max<int64_t>(2, n / 8));
        const std::vector<double> depths =
            entry.needle_depths.empty() ? std::vector<double>{0.5} : entry.needle_depths;
        std::vector<int64_t> window;
        for (int64_t i = n - window_span; i < n; ++i) window.push_back(i);
        std::vector<std::vector<int64_t>> groups;
        std::vector<std::vector<float>> contents;
        for (size_t k = 0; k < depths.size(); ++k) {
            int64_t pos = static_cast<int64_t>(std::llround(depths[k] * static_cast<double>(n - 1)));
            pos = std::clamp<int64_t>(pos, 0, n - window_span - 1);
            groups.push_back({pos});
            std::vector<float> content(static_cast<size_t>(cfg.hidden_dim));
            for (int i = 0; i < cfg.hidden_dim; ++i) {
                content[static_cast<size_t>(i)] = rng.normal(9000 + k * 100 + static_cast<uint64_t>(i), 1.0);
            }
            contents.push_back(std::move(content));
        }
        const AlignmentPlan plan =
            plan_alignment(model, 0, window, groups,
                           hash_combine(workload_seed, 0x6e646cULL + static_cast<uint64_t>(request_index)),
                           contents, 0.5);
        install_plan(prompt, plan, window, groups);
        return prompt;
    }
    throw ConfigError("materialize_prompt: unknown content_kind " + entry.content_kind);
}

namespace {

nlohmann::ordered_json request_record(const RequestState& state, double t0_ms) {
    nlohmann::ordered_json r;
    r["id"] = state.id;
    r["arrival_step"] = state.arrival_step;
    r["prompt_length"] = state.prompt_length;
    r["max_new_tokens"] = state.max_new_tokens;
    r["generated"] = state.generated.size();
    r["ttft_steps"] = state.first_token_step - state.arrival_step + 1;
    r["ttft_ms"] = state.first_token_ms - state.eligible_ms;
    r["eligible_ms"] = state.eligible_ms - t0_ms;
    r["finished_ms"] = state.finished_ms - t0_ms;
    const double span_s = std::max(1e-9, (state.finished_ms - state.eligible_ms) / 1000.0);
    r["tokens_per_s"] =
        static_cast<double>(state.prompt_length + static_cast<int64_t>(state.generated.size())) /
        span_s;
    auto drops = nlohmann::ordered_json::array();
    for (const DropRecord& d : state.ledger.drops()) {
        nlohmann::ordered_json jd;
        jd["layer"] = d.layer;
        jd["tokens_before"] = d.tokens_before;
        jd["tokens_after"] = d.tokens_after;
        jd["retention_ratio"] = d.retention_ratio;
        jd["covered_mass"] = d.covered_mass;
        drops.push_back(std::move(jd));
    }
    r["drop_events"] = std::move(drops);
    r["flops_total"] = state.ledger.total();
    r["flops_scoring_overhead"] = state.ledger.scoring_overhead();
    return r;
}

} // namespace

RunResult run_workload(Engine& engine, const Workload& workload, const RunOptions& options) {
    std::vector<RequestId> ids;
    for (size_t i = 0; i < workload.entries.size(); ++i) {
        const WorkloadEntry& e = workload.entries[i];
        RequestSpec spec;
        spec.prompt = materialize_prompt(engine.model(), e, workload.seed, static_cast<int>(i));
        spec.max_new_tokens = e.max_new_tokens;
        spec.arrival_step = e.arrival_step;
        ids.push_back(engine.submit(std::move(spec)));
    }

    RunResult result;
    result.events = engine.run_to_completion();

    if (!options.events_path.empty()) {
        std::ofstream out(options.events_path);
        for (const StepEvent& ev : result.events) {
            nlohmann::ordered_json j;
            j["request"] = ev.id;
            j["step"] = ev.step;
            j["token"] = ev.token;
            j["phase"] = to_string(ev.phase);
            out << j.dump() << "\n";
        }
    }

    double t0 = 1e300;
    double t_end = 0.0;
    for (RequestId id : ids) {
        const RequestState& st = engine.request(id);
        t0 = std::min(t0, st.eligible_ms);
        t_end = std::max(t_end, st.finished_ms);
    }

    nlohmann::ordered_json report;
    nlohmann::ordered_json engine_echo;
    engine_echo["mode"] = to_string(engine.options().mode);
    engine_echo["tp_degree"] = engine.options().tp_degree;
    engine_echo["token_budget"] = engine.options().token_budget;
    engine_echo["kv_block_size"] = engine.options().kv_block_size;
    engine_echo["score_config"] = engine.options().score.to_json();
    engine_echo["model_config"] = engine.model().config().to_json();
    report["engine"] = std::move(engine_echo);
    report["workload"] = workload.to_json();

    auto requests = nlohmann::ordered_json::array();
    uint64_t flops_total = 0;
    uint64_t scoring_total = 0;
    int64_t token_total = 0;
    double retention_sum = 0.0;
    int64_t retention_count = 0;
    for (RequestId id : ids) {
        const RequestState& st = engine.request(id);
        requests.push_back(request_record(st, t0));
        flops_total += st.ledger.total();
        scoring_total += st.ledger.scoring_overhead();
        token_total += st.prompt_length + static_cast<int64_t>(st.generated.size());
        for (const DropRecord& d : st.ledger.drops()) {
            retention_sum += d.retention_ratio;
            retention_count += 1;
        }
    }
    report["requests"] = std::move(requests);

    nlohmann::ordered_json agg;
    agg["num_requests"] = ids.size();
    agg["total_tokens"] = token_total;
    agg["wall_ms"] = t_end - t0;
    agg["throughput_tokens_per_s"] =
        static_cast<double>(token_total) / std::max(1e-9, (t_end - t0) / 1000.0);
    agg["mean_retention_ratio"] =
        retention_count > 0 ? retention_sum / static_cast<double>(retention_count) : 1.0;
    agg["engine_steps"] = engine.current_step();
    report["aggregate"] = std::move(agg);

    nlohmann::ordered_json flops;
    flops["total"] = flops_total;
    flops["scoring_overhead"] = scoring_total;
    report["flops"] = std::move(flops);

    const CacheStats stats = engine.cache().stats();
    nlohmann::ordered_json cache;
    cache["pages_allocated"] = stats.pages_allocated;
    cache["page_size"] = stats.page_size;
    cache["slots_written"] = stats.slots_written;
    nlohmann::ordered_json per_layer = nlohmann::ordered_json::object();
    for (const auto& [layer, pages] : stats.pages_per_layer) {
        nlohmann::ordered_json jl;
        jl["pages"] = pages;
        const auto written = stats.written_per_layer.find(layer);
        const int64_t slots = written != stats.written_per_layer.end() ? written->second : 0;
        jl["slots_written"] = slots;
        jl["occupancy"] =
            pages > 0 ? static_cast<double>(slots) / static_cast<double>(pages * stats.page_size)
                      : 0.0;
        per_layer[std::to_string(layer)] = std::move(jl);
    }
    cache["per_layer"] = std::move(per_layer);
    report["cache"] = std::move(cache);

    if (options.flops_audit) {
        auto audit = nlohmann::ordered_json::array();
        bool all_ok = true;
        for (RequestId id : ids) {
            const RequestState& st = engine.request(id);
            FlopsLedger dense_ref;
            for (int l = 0; l < engine.model().num_layers(); ++l) {
                dense_ref.add_layer(l, engine.model().layer_kind(l), st.prompt_length,
                                    engine.model().config());
            }
            // Decode layers are excluded from the prefill cross-check.
            FlopsLedger prefill_only;
            int layer_count = 0;
            for (const LayerFlopsEntry& e : st.ledger.entries()) {
                if (layer_count >= engine.model().num_layers()) break;
                prefill_only.add_layer(e.layer, e.kind, e.tokens, engine.model().config());
                ++layer_count;
            }
            for (const DropRecord& d : st.ledger.drops()) prefill_only.add_drop(d);
            const SavingsReport sr =
                validate_savings(dense_ref, prefill_only, engine.model().config());
            nlohmann::ordered_json ja;
            ja["request"] = id;
            ja["measured_delta"] = sr.measured_delta;
            ja["formula_delta"] = sr.formula_delta;
            ja["exact_match"] = sr.exact_match;
            audit.push_back(std::move(ja));
            all_ok = all_ok && sr.exact_match;
        }
        report["flops_audit"] = std::move(audit);
        result.flops_audit_ok = all_ok;
    }

    result.report = std::move(report);
    return result;
}

nlohmann::ordered_json bench_grid(const Model& model, const ScoreConfig& score_config,
                                  const BenchGridSpec& spec, std::ostream* progress) {
    nlohmann::ordered_json report;
    report["model_config"] = model.config().to_json();
    report["score_config"] = score_config.to_json();
    auto grid = nlohmann::ordered_json::array();

    std::map<std::pair<int64_t, int64_t>, double> dense_throughput;
    for (const std::string& mode_name : spec.modes) {
        const EngineMode mode = engine_mode_from_string(mode_name);
        for (int64_t length : spec.context_lengths) {
            for (int64_t batch : spec.batch_sizes) {
                nlohmann::ordered_json cell;
                cell["context_length"] = length;
                cell["batch_size"] = batch;
                cell["mode"] = mode_name;
                if (length * batch > spec.max_cell_tokens) {
                    cell["skipped"] = true;
                    grid.push_back(std::move(cell));
                    continue;
                }
                std::vector<double> reps;
                bool failed = false;
                for (int rep = 0; rep < spec.repetitions && !failed; ++rep) {
                    try {
                        EngineOptions opts;
                        opts.mode = mode;
                        opts.score = score_config;
                        opts.token_budget = std::max<int64_t>(8192, length * batch);
                        Engine engine(model, opts);
                        Workload w;
                        w.seed = hash_combine(spec.seed, static_cast<uint64_t>(rep));
                        for (int64_t b = 0; b < batch; ++b) {
                            WorkloadEntry e;
                            e.arrival_step = 0;
                            e.prompt_length = length;
                            e.max_new_tokens = 1;
                            e.content_kind = spec.content_kind;
                            w.entries.push_back(std::move(e));
                        }
                        std::vector<RequestSpec> specs;
                        for (size_t i = 0; i < w.entries.size(); ++i) {
                            RequestSpec rs;
                            rs.prompt = materialize_prompt(model, w.entries[i], w.seed,
                                                           static_cast<int>(i));
                            rs.max_new_tokens = 1;
                            specs.push_back(std::move(rs));
                        }
                        const auto start = std::chrono::steady_clock::now();
                        for (auto& rs : specs) engine.submit(std::move(rs));
                        engine.run_to_completion();
                        const double seconds =
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                                .count();
                        reps.push_back(static_cast<double>(length * batch) /
                                       std::max(seconds, 1e-9));
                    } catch (const std::bad_alloc&) {
                        failed = true;
                    }
                }
                if (failed || reps.empty()) {
                    cell["skipped"] = true;
                    grid.push_back(std::move(cell));
                    continue;
                }
                std::sort(reps.begin(), reps.end());
                const double median = reps[reps.size() / 2];
                cell["tokens_per_s"] = median;
                cell["reps"] = reps;
                if (mode == EngineMode::Dense) {
                    dense_throughput[{length, batch}] = median;
                }
                const auto base = dense_throughput.find({length, batch});
                if (base != dense_throughput.end() && base->second > 0.0) {
                    cell["speedup_vs_dense"] = median / base->second;
                }
                if (progress != nullptr) {
                    *progress << "cell mode=" << mode_name << " len=" << length
                              << " batch=" << batch << " tok/s=" << median << std::endl;
                }
                grid.push_back(std::move(cell));
            }
        }
    }
    report["grid"] = std::move(grid);
    return report;
}

std::string render_table(const nlohmann::ordered_json& report) {
    std::string out;
    char line[256];
    if (report.contains("grid")) {
        std::snprintf(line, sizeof(line), "%-12s %10s %8s %14s %10s\n", "mode", "length", "batch",
                      "tokens/s", "speedup");
        out += line;
        for (const auto& cell : report.at("grid")) {
            if (cell.contains("skipped")) {
                std::snprintf(line, sizeof(line), "%-12s %10lld %8lld %14s %10s\n",
                              cell.at("mode").get<std::string>().c_str(),
                              static_cast<long long>(cell.at("context_length").get<int64_t>()),
                              static_cast<long long>(cell.at("batch_size").get<int64_t>()),
                              "skipped", "-");
            } else {
                const double speedup = cell.contains("speedup_vs_dense")
                                           ? cell.at("speedup_vs_dense").get<double>()
                                           : 0.0;
                std::snprintf(line, sizeof(line), "%-12s %10lld %8lld %14.1f %9.2fx\n",
                              cell.at("mode").get<std::string>().c_str(),
                              static_cast<long long>(cell.at("context_length").get<int64_t>()),
                              static_cast<long long>(cell.at("batch_size").get<int64_t>()),
                              cell.at("tokens_per_s").get<double>(), speedup);
            }
            out += line;
        }
        return out;
    }
    if (report.contains("requests")) {
        std::snprintf(line, sizeof(line), "%6s %8s %8s %10s %12s %8s %16s\n", "req", "arrive",
                      "prompt", "ttft_steps", "ttft_ms", "drops", "tokens/s");
        out += line;
        for (const auto& r : report.at("requests")) {
            std::snprintf(line, sizeof(line), "%6lld %8lld %8lld %10lld %12.3f %8zu %16.1f\n",
                          static_cast<long long>(r.at("id").get<int64_t>()),
                          static_cast<long long>(r.at("arrival_step").get<int64_t>()),
                          static_cast<long long>(r.at("prompt_length").get<int64_t>()),
                          static_cast<long long>(r.at("ttft_steps").get<int64_t>()),
                          r.at("ttft_ms").get<double>(), r.at("drop_events").size(),
                          r.at("tokens_per_s").get<double>());
            out += line;
        }
        const auto& agg = report.at("aggregate");
        std::snprintf(line, sizeof(line), "aggregate: %lld tokens, %.1f tokens/s, %lld steps\n",
                      static_cast<long long>(agg.at("total_tokens").get<int64_t>()),
                      agg.at("throughput_tokens_per_s").get<double>(),
                      static_cast<long long>(agg.at("engine_steps").get<int64_t>()));
        out += line;
        return out;
    }
    return report.dump(2) + "\n";
}

bool verify_report_integrity(const nlohmann::ordered_json& report) {
    if (report.contains("requests")) {
        const auto& agg = report.at("aggregate");
        int64_t tokens = 0;
        for (const auto& r : report.at("requests")) {
            tokens += r.at("prompt_length").get<int64_t>() + r.at("generated").get<int64_t>();
        }
        if (tokens != agg.at("total_tokens").get<int64_t>()) return false;
        if (report.contains("flops")) {
            uint64_t flops = 0;
            for (const auto& r : report.at("requests")) {
                flops += r.at("flops_total").get<uint64_t>();
            }
            if (flops != report.at("flops").at("total").get<uint64_t>()) return false;
        }
        const double wall_s = std::max(1e-9, agg.at("wall_ms").get<double>() / 1000.0);
        const double expect = static_cast<double>(tokens) / wall_s;
        if (std::fabs(expect - agg.at("throughput_tokens_per_s").get<double>()) >
            1e-6 * std::max(1.0, expect)) {
            return false;
        }
        return true;
    }
    if (report.contains("grid")) {
        std::map<std::pair<int64_t, int64_t>, double> dense;
        for (const auto& cell : report.at("grid")) {
            if (cell.contains("skipped")) continue;
            if (cell.at("mode").get<std::string>() == "dense") {
                dense[{cell.at("context_length").get<int64_t>(),
                       cell.at("batch_size").get<int64_t>()}] =
                    cell.at("tokens_per_s").get<double>();
            }
        }
        for (const auto& cell : report.at("grid")) {
            if (cell.contains("skipped") || !cell.contains("speedup_vs_dense")) continue;
            const auto key = std::make_pair(cell.at("context_length").get<int64_t>(),
                                            cell.at("batch_size").get<int64_t>());
            if (dense.count(key) == 0) return false;
            const double expect = cell.at("tokens_per_s").get<double>() / dense[key];
            if (std::fabs(expect - cell.at("speedup_vs_dense").get<double>()) > 1e-9) return false;
        }
        return true;
    }
    return false;
}

} // namespace uniprefill
