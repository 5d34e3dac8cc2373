// Experiment runner: world generation, streaming training, evaluation,
// ablation grids, and report merging.
//
//   onepiece gen    --out DIR [--config FILE] [--set k=v ...] [--seed N]
//   onepiece train  --out DIR [--data DIR] [--name NAME] ...
//   onepiece eval   --checkpoint FILE --data DIR --day N [--dump-attention N]
//   onepiece ablate --preset NAME --out DIR [--data DIR] ...
//   onepiece report --runs DIR --out DIR
//
// Exit code 0 on success; on failure a single machine-readable line
// "error: <message>" goes to stderr and the exit code is nonzero.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "onepiece/experiments.hpp"

namespace fs = std::filesystem;
using namespace onepiece;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out = "out";
    std::string data;
    long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "flat key=value config file");
    cmd->add_option("--set", c.overrides, "override, repeatable: --set train.lr=0.01");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--seed", c.seed, "world/run seed (overrides run.seed)");
}

Config load_config(const CommonOpts& c) {
    Config cfg;
    if (!c.config_path.empty()) cfg.load_file(c.config_path);
    for (const auto& o : c.overrides) cfg.apply_override(o);
    if (c.seed >= 0) cfg.set("run.seed", std::to_string(c.seed));
    return cfg;
}

std::string dataset_dir(const CommonOpts& c) {
    return c.data.empty() ? (fs::path(c.out) / "dataset").string() : c.data;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

int cmd_gen(const CommonOpts& c) {
    Config cfg = load_config(c);
    WorldConfig wc = WorldConfig::from_config(cfg, static_cast<std::uint64_t>(cfg.get_int("run.seed")));
    Dataset ds = generate_dataset(wc);
    std::string dir = (fs::path(c.out) / "dataset").string();
    write_dataset(ds, dir);
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "gen_config.txt", cfg.dump());
    long long sessions = 0;
    for (const auto& d : ds.days) sessions += static_cast<long long>(d.size());
    std::cout << "wrote " << dir << ": " << ds.days.size() << " days, " << sessions
              << " sessions, " << ds.items.size() << " items\n";
    return 0;
}

int cmd_train(const CommonOpts& c, const std::string& name_opt) {
    Config cfg = load_config(c);
    Dataset ds = read_dataset(dataset_dir(c));
    std::string name = name_opt.empty() ? cfg.get_str("train.mode") : name_opt;
    std::uint64_t train_seed = static_cast<std::uint64_t>(cfg.get_int("train.seed"));

    OnePieceModel model;
    model.cfg = ModelConfig::from_config(cfg, ds.cfg.latent_dim);
    model.init(train_seed);
    TrainPlan plan = TrainPlan::from_config(cfg);
    EvalConfig ec = EvalConfig::from_config(cfg);
    Optimizer opt(plan.opt);
    StreamResult res = streaming_protocol(model, opt, ds, plan, ec);

    fs::path run_dir = fs::path(c.out) / "runs" / name;
    fs::create_directories(run_dir);
    write_text(run_dir / "config.txt", cfg.dump());
    save_checkpoint(model, (run_dir / "checkpoint.bin").string(),
                    {{"name", name},
                     {"mode", cfg.get_str("train.mode")},
                     {"train_seed", std::to_string(train_seed)},
                     {"days_trained", std::to_string(res.day_stats.size())}});
    res.log.write_csv((run_dir / "train_log.csv").string());
    write_metrics_csv(res.reports, (run_dir / "metrics.csv").string());
    if (!res.reports.back().coverage_by_route.empty()) {
        write_coverage_csv(res.reports.back(), (run_dir / "coverage.csv").string());
    }
    for (const auto& rep : res.reports) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "metrics_day_%02d.json", rep.day);
        write_text(run_dir / buf, rep.to_json().dump(2) + "\n");
    }
    std::cout << "trained " << name << " over " << res.day_stats.size() << " days; final:";
    for (const auto& [k, v] : res.reports.back().values) std::cout << " " << k << "=" << v;
    std::cout << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& c, const std::string& checkpoint, int day, int dump_n) {
    Config cfg = load_config(c);
    Dataset ds = read_dataset(dataset_dir(c));
    OnePieceModel model = load_checkpoint(checkpoint);
    TrainPlan plan = TrainPlan::from_config(cfg);
    EvalConfig ec = EvalConfig::from_config(cfg);
    if (dump_n > 0) {
        fs::path dir = fs::path(c.out) / "attention";
        fs::create_directories(dir);
        ec.dump_attention_dir = dir.string();
        ec.dump_attention_count = dump_n;
    }
    MetricsReport rep = evaluate(model, ds, day, plan, ec);
    fs::create_directories(c.out);
    std::string json = rep.to_json().dump(2) + "\n";
    write_text(fs::path(c.out) / ("eval_day_" + std::to_string(day) + ".json"), json);
    std::cout << json;
    return 0;
}

int cmd_ablate(const CommonOpts& c, const std::string& preset) {
    Config cfg = load_config(c);
    Dataset ds = read_dataset(dataset_dir(c));
    std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("train.seed"));
    std::vector<RunSpec> specs = preset_runs(preset, seed);
    std::vector<RunResult> results = run_experiments(ds, cfg, specs, 2);
    fs::create_directories(c.out);
    std::string path = (fs::path(c.out) / ("ablate_" + preset + ".csv")).string();
    write_ablation_csv(results, path);
    std::cout << "wrote " << path << "\n";
    for (const auto& r : results) {
        std::cout << r.name << ":";
        for (const auto& [k, v] : r.final_values) std::cout << " " << k << "=" << v;
        std::cout << "\n";
    }
    return 0;
}

int cmd_report(const CommonOpts& c, const std::string& runs_dir) {
    nlohmann::ordered_json bundle = nlohmann::ordered_json::array();
    std::vector<MetricsReport> flat;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
        if (e.is_regular_file() && e.path().filename().string().rfind("metrics_day_", 0) == 0) {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no metrics_day_*.json under " + runs_dir);
    for (const auto& p : files) {
        std::ifstream in(p);
        nlohmann::json j = nlohmann::json::parse(in);
        nlohmann::ordered_json entry;
        entry["source"] = fs::relative(p, runs_dir).string();
        entry["report"] = j;
        bundle.push_back(entry);
        MetricsReport rep;
        rep.day = j.at("day");
        for (const auto& [k, v] : j.at("values").items()) rep.values[k] = v.get<double>();
        flat.push_back(rep);
    }
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "report.json", bundle.dump(2) + "\n");
    write_metrics_csv(flat, (fs::path(c.out) / "report.csv").string());
    std::cout << "merged " << files.size() << " reports into " << c.out << "/report.json\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"onepiece: retrieval/ranking experiments on a synthetic funnel world"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, ablate_o, report_o;
    std::string train_name, eval_checkpoint, ablate_preset, report_runs;
    int eval_day = 1, eval_dump = 0;

    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    add_common(gen, gen_o);

    CLI::App* train = app.add_subcommand("train", "streaming training + per-day evaluation");
    add_common(train, train_o);
    train->add_option("--data", train_o.data, "dataset directory (default <out>/dataset)");
    train->add_option("--name", train_name, "run name (default train.mode)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on one day");
    add_common(eval, eval_o);
    eval->add_option("--data", eval_o.data, "dataset directory");
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
    eval->add_option("--day", eval_day, "day index to evaluate");
    eval->add_option("--dump-attention", eval_dump, "dump attention for the first N requests");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation preset grid");
    add_common(ablate, ablate_o);
    ablate->add_option("--data", ablate_o.data, "dataset directory");
    ablate->add_option("--preset", ablate_preset,
                       "retrieval-table3 | ranking-table4 | blocksize | pa-scaling")
        ->required();

    CLI::App* report = app.add_subcommand("report", "merge per-run metrics into one bundle");
    add_common(report, report_o);
    report->add_option("--runs", report_runs, "directory holding run outputs")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(gen_o);
        if (train->parsed()) return cmd_train(train_o, train_name);
        if (eval->parsed()) return cmd_eval(eval_o, eval_checkpoint, eval_day, eval_dump);
        if (ablate->parsed()) return cmd_ablate(ablate_o, ablate_preset);
        if (report->parsed()) return cmd_report(report_o, report_runs);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
