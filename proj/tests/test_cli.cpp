#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string cli = ONEPIECE_CLI_PATH;

std::string tiny_world_flags() {
    return " --set world.users=16 --set world.items=100 --set world.queries=10"
           " --set world.categories=8 --set world.shops=8 --set world.latent_dim=8"
           " --set world.days=2 --set world.sessions_per_user_day=2"
           " --set world.exposure=6 --set world.pool=12 --set world.anchor_len=8";
}

std::string tiny_model_flags() {
    return " --set model.dim=8 --set model.feature_dim=4 --set model.max_pa=8"
           " --set model.vocab_items=128 --set train.pa_len=4 --set train.batch=4"
           " --set eval.recall_k=10,30 --set train.max_groups=1";
}

int run(const std::string& args) {
    return std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int count_lines(const fs::path& p) {
    std::ifstream in(p);
    int n = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) ++n;
    }
    return n;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("gen is deterministic: same seed, identical shard bytes") {
    TempDir a("onepiece_cli_gen_a"), b("onepiece_cli_gen_b");
    std::string flags = tiny_world_flags();
    REQUIRE(run("gen --out " + a.path.string() + " --seed 11" + flags) == 0);
    REQUIRE(run("gen --out " + b.path.string() + " --seed 11" + flags) == 0);
    for (const auto& e : fs::directory_iterator(a.path / "dataset")) {
        REQUIRE(slurp(e.path()) == slurp(b.path / "dataset" / e.path().filename()));
    }
    // different seed changes the shards
    TempDir c("onepiece_cli_gen_c");
    REQUIRE(run("gen --out " + c.path.string() + " --seed 12" + flags) == 0);
    REQUIRE(slurp(a.path / "dataset" / "sessions_day_00.jsonl") !=
            slurp(c.path / "dataset" / "sessions_day_00.jsonl"));
}

TEST_CASE("train writes checkpoint, logs, metrics; eval reloads them") {
    TempDir dir("onepiece_cli_train");
    std::string flags = tiny_world_flags() + tiny_model_flags();
    REQUIRE(run("gen --out " + dir.path.string() + " --seed 3" + flags) == 0);
    REQUIRE(run("train --out " + dir.path.string() + " --seed 3 --name demo" + flags) == 0);
    fs::path rd = dir.path / "runs" / "demo";
    REQUIRE(fs::exists(rd / "checkpoint.bin"));
    REQUIRE(fs::exists(rd / "train_log.csv"));
    REQUIRE(fs::exists(rd / "metrics.csv"));
    REQUIRE(fs::exists(rd / "metrics_day_01.json"));
    REQUIRE(fs::exists(rd / "coverage.csv"));
    REQUIRE(run("eval --out " + dir.path.string() + " --data " + (dir.path / "dataset").string() +
                " --checkpoint " + (rd / "checkpoint.bin").string() + " --day 1" + flags) == 0);
    REQUIRE(fs::exists(dir.path / "eval_day_1.json"));
    REQUIRE(run("report --runs " + (dir.path / "runs").string() + " --out " +
                (dir.path / "merged").string()) == 0);
    REQUIRE(fs::exists(dir.path / "merged" / "report.json"));
    REQUIRE(fs::exists(dir.path / "merged" / "report.csv"));
}

TEST_CASE("ablate presets emit one row per variant") {
    TempDir dir("onepiece_cli_ablate");
    std::string flags = tiny_world_flags() + tiny_model_flags();
    REQUIRE(run("gen --out " + dir.path.string() + " --seed 4" + flags) == 0);
    SECTION("ranking-table4 has V1..V7") {
        REQUIRE(run("ablate --preset ranking-table4 --out " + dir.path.string() + flags) == 0);
        fs::path csv = dir.path / "ablate_ranking-table4.csv";
        REQUIRE(fs::exists(csv));
        REQUIRE(count_lines(csv) == 8);  // header + 7 variants
        std::string text = slurp(csv);
        REQUIRE(text.find("V1-causal") != std::string::npos);
        REQUIRE(text.find("V7-3step-progressive") != std::string::npos);
    }
    SECTION("blocksize sweeps M in {1,4,8,12}") {
        REQUIRE(run("ablate --preset blocksize --out " + dir.path.string() + flags) == 0);
        fs::path csv = dir.path / "ablate_blocksize.csv";
        REQUIRE(count_lines(csv) == 5);
        std::string text = slurp(csv);
        for (const char* m : {"M1,", "M4,", "M8,", "M12,"}) {
            REQUIRE(text.find(m) != std::string::npos);
        }
    }
}

TEST_CASE("failure modes exit nonzero with a named error") {
    TempDir dir("onepiece_cli_err");
    // unknown key
    std::string out = dir.path.string() + "/err.txt";
    int rc = std::system((cli + " gen --out " + dir.path.string() +
                          " --set bogus.key=1 2> " + out + " >/dev/null").c_str());
    REQUIRE(rc != 0);
    REQUIRE(slurp(out).find("bogus.key") != std::string::npos);
    // missing dataset
    rc = std::system((cli + " train --out " + dir.path.string() + " 2> " + out + " >/dev/null").c_str());
    REQUIRE(rc != 0);
    REQUIRE(slurp(out).find("error:") != std::string::npos);
}
