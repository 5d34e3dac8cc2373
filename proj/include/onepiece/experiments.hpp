#pragma once
// Ablation presets and the experiment runner shared by the CLI and the
// acceptance suite. A run = (dataset, config overrides, training seed);
// independent runs may execute on a small thread pool since they share only
// the immutable dataset.

#include <atomic>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "onepiece/trainer.hpp"

namespace onepiece {

struct RunSpec {
    std::string name;
    std::map<std::string, std::string> overrides;
    std::uint64_t train_seed = 1;
};

struct RunResult {
    std::string name;
    std::uint64_t train_seed = 0;
    std::map<std::string, double> final_values;  // last evaluation day
    std::map<std::string, double> mean_values;   // mean over evaluation days
    std::vector<double> day_train_loss;
    std::vector<MetricsReport> reports;
};

inline Config apply_overrides(const Config& base, const std::map<std::string, std::string>& o) {
    Config c = base;
    for (const auto& [k, v] : o) c.set(k, v);
    return c;
}

inline RunResult run_experiment(const Dataset& ds, const Config& cfg, const std::string& name,
                                std::uint64_t train_seed) {
    RunResult out;
    out.name = name;
    out.train_seed = train_seed;
    OnePieceModel model;
    model.cfg = ModelConfig::from_config(cfg, ds.cfg.latent_dim);
    model.init(train_seed);
    TrainPlan plan = TrainPlan::from_config(cfg);
    plan.seed = train_seed;
    EvalConfig ec = EvalConfig::from_config(cfg);
    Optimizer opt(plan.opt);
    StreamResult res = streaming_protocol(model, opt, ds, plan, ec);
    for (const auto& st : res.day_stats) out.day_train_loss.push_back(st.mean_loss);
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& rep : res.reports) {
        for (const auto& [k, v] : rep.values) {
            sums[k] += v;
            counts[k] += 1;
        }
    }
    for (const auto& [k, v] : sums) out.mean_values[k] = v / counts[k];
    out.final_values = res.reports.back().values;
    out.reports = std::move(res.reports);
    return out;
}

// Runs the specs over `threads` workers. Results keep spec order; any
// worker exception is rethrown after all workers finish.
inline std::vector<RunResult> run_experiments(const Dataset& ds, const Config& base,
                                              const std::vector<RunSpec>& specs,
                                              int threads = 2) {
    std::vector<RunResult> results(specs.size());
    std::vector<std::string> errors(specs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= specs.size()) return;
            try {
                Config cfg = apply_overrides(base, specs[i].overrides);
                results[i] = run_experiment(ds, cfg, specs[i].name, specs[i].train_seed);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (!errors[i].empty()) {
            throw std::runtime_error("run '" + specs[i].name + "' failed: " + errors[i]);
        }
    }
    return results;
}

// ---------------------------------------------------------------------------
// Presets mirroring the ablation axes
// ---------------------------------------------------------------------------

inline std::vector<RunSpec> preset_runs(const std::string& preset, std::uint64_t seed) {
    std::vector<RunSpec> runs;
    auto add = [&](const std::string& name, std::map<std::string, std::string> o) {
        runs.push_back({name, std::move(o), seed});
    };
    if (preset == "retrieval-table3") {
        add("V1-causal", {{"train.mode", "retrieval"}, {"train.mask", "causal"},
                          {"train.steps", "0"}, {"train.tasks", "click_only"}});
        add("V2-bidirectional", {{"train.mode", "retrieval"}, {"train.steps", "0"},
                                 {"train.tasks", "click_only"}});
        add("V3-1step-click-last", {{"train.mode", "retrieval"}, {"train.steps", "1"},
                                    {"train.tasks", "click_only"}});
        add("V4-1step-multitask-last", {{"train.mode", "retrieval"}, {"train.steps", "1"},
                                        {"train.tasks", "last_step"}});
        add("V5-2step-multitask-last", {{"train.mode", "retrieval"}, {"train.steps", "2"},
                                        {"train.tasks", "last_step"}});
        add("V6-2step-progressive", {{"train.mode", "retrieval"}, {"train.steps", "2"},
                                     {"train.tasks", "progressive"}});
    } else if (preset == "ranking-table4") {
        add("V1-causal", {{"train.mode", "ranking"}, {"train.mask", "causal"},
                          {"train.steps", "0"}, {"train.tasks", "last_step"}});
        add("V2-cis-invisible", {{"train.mode", "ranking"}, {"train.cis", "invisible"},
                                 {"train.steps", "0"}, {"train.tasks", "last_step"}});
        add("V3-cis-visible", {{"train.mode", "ranking"}, {"train.steps", "0"},
                               {"train.tasks", "last_step"}});
        add("V4-1step-multitask-last", {{"train.mode", "ranking"}, {"train.steps", "1"},
                                        {"train.tasks", "last_step"}});
        add("V5-2step-multitask-last", {{"train.mode", "ranking"}, {"train.steps", "2"},
                                        {"train.tasks", "last_step"}});
        add("V6-3step-multitask-last", {{"train.mode", "ranking"}, {"train.steps", "3"},
                                        {"train.tasks", "last_step"}});
        add("V7-3step-progressive", {{"train.mode", "ranking"}, {"train.steps", "3"},
                                     {"train.tasks", "progressive"}});
    } else if (preset == "blocksize") {
        for (int m : {1, 4, 8, 12}) {
            add("M" + std::to_string(m),
                {{"train.mode", "ranking"}, {"train.steps", "3"},
                 {"train.tasks", "progressive"}, {"train.group_size", std::to_string(m)}});
        }
    } else if (preset == "pa-scaling") {
        add("PA-off", {{"train.mode", "retrieval"}, {"train.pa", "off"}});
        for (int len : {10, 20, 30}) {
            add("PA-" + std::to_string(len),
                {{"train.mode", "retrieval"}, {"train.pa", "on"},
                 {"train.pa_len", std::to_string(len)}});
        }
    } else {
        throw std::invalid_argument("unknown ablation preset: " + preset);
    }
    return runs;
}

inline void write_ablation_csv(const std::vector<RunResult>& results, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    std::set<std::string> keys;
    for (const auto& r : results) {
        for (const auto& [k, v] : r.final_values) keys.insert(k);
    }
    out << "variant,seed";
    for (const auto& k : keys) out << ",final_" << k << ",mean_" << k;
    out << "\n";
    for (const auto& r : results) {
        out << r.name << "," << r.train_seed;
        for (const auto& k : keys) {
            out << ",";
            auto it = r.final_values.find(k);
            if (it != r.final_values.end()) out << it->second;
            out << ",";
            auto it2 = r.mean_values.find(k);
            if (it2 != r.mean_values.end()) out << it2->second;
        }
        out << "\n";
    }
}

}  // namespace onepiece
