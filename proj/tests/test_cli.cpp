#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "tsvit/encoder.hpp"
#include "tsvit/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(TSVIT_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "tsvit_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

size_t count_lines(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("analyze writes complexity and parameter summaries") {
    const fs::path dir = fresh_dir("analyze");
    REQUIRE(run("analyze --preset desk --mode dense --out " + dir.string()) == 0);
    CHECK(fs::exists(dir / "complexity.csv"));
    CHECK(fs::exists(dir / "params_summary.json"));
    CHECK(fs::exists(dir / "config_resolved.json"));

    const std::string csv = slurp(dir / "complexity.csv");
    CHECK(csv.rfind("block,params,flops,convention\n", 0) == 0);
    CHECK(csv.find("wmhsa,16384,") != std::string::npos);             // 4 * 64^2
    CHECK(csv.find("output_projection,32640,") != std::string::npos);  // 3 * 64 * 170
    CHECK(csv.back() == '\n');
}

TEST_CASE("analyze reports the PEFT budget for the large preset") {
    const fs::path dir = fresh_dir("analyze_eva");
    REQUIRE(run("analyze --preset eva02l --mode dynamic --rate 0.5 --out " + dir.string()) == 0);
    json summary = json::parse(slurp(dir / "params_summary.json"));
    CHECK(summary["trainable_params"].get<int64_t>() == 1647384);
    CHECK(summary["trainable_params"].get<int64_t>() + summary["frozen_params"].get<int64_t>() ==
          summary["total_params"].get<int64_t>());
}

TEST_CASE("unknown preset is a usage error and writes nothing") {
    const fs::path dir = fresh_dir("analyze_bad");
    CHECK(run("analyze --preset nosuch --out " + dir.string()) == 2);
    CHECK(fs::is_empty(dir));
}

TEST_CASE("analyze output is byte-for-byte reproducible") {
    const fs::path a = fresh_dir("repro_a");
    const fs::path b = fresh_dir("repro_b");
    REQUIRE(run("analyze --preset desk --mode dynamic --rate 0.3 --out " + a.string()) == 0);
    REQUIRE(run("analyze --preset desk --mode dynamic --rate 0.3 --out " + b.string()) == 0);
    CHECK(slurp(a / "complexity.csv") == slurp(b / "complexity.csv"));
    CHECK(slurp(a / "params_summary.json") == slurp(b / "params_summary.json"));
}

TEST_CASE("verify passes on the desk preset and is reproducible") {
    const fs::path a = fresh_dir("verify_a");
    const fs::path b = fresh_dir("verify_b");
    REQUIRE(run("verify --preset desk --seed 5 --out " + a.string()) == 0);
    REQUIRE(run("verify --preset desk --seed 5 --out " + b.string()) == 0);
    CHECK(fs::exists(a / "verify.json"));
    CHECK(slurp(a / "verify.json") == slurp(b / "verify.json"));
    json report = json::parse(slurp(a / "verify.json"));
    CHECK(report["pass"].get<bool>());
    for (const auto& prop : report["properties"]) CHECK(prop["pass"].get<bool>());
}

TEST_CASE("verify flags a corrupted checkpoint") {
    const fs::path dir = fresh_dir("verify_ckpt");
    const fs::path ckpt = dir / "model.ckpt";
    REQUIRE(run("finetune --preset desk --rate 0.5 --steps 2 --seed 3 --out " + ckpt.string()) == 0);

    // Valid checkpoint passes the integrity property.
    REQUIRE(run("verify --preset desk --seed 5 --ckpt " + ckpt.string() + " --out " + dir.string()) == 0);

    // Corrupt the magic.
    {
        std::fstream f(ckpt, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("NOGOOD", 6);
    }
    CHECK(run("verify --preset desk --seed 5 --ckpt " + ckpt.string() + " --out " + dir.string()) == 1);
    json report = json::parse(slurp(dir / "verify.json"));
    bool integrity_failed = false;
    for (const auto& prop : report["properties"])
        if (prop["name"] == "checkpoint_integrity" && !prop["pass"].get<bool>()) integrity_failed = true;
    CHECK(integrity_failed);
}

TEST_CASE("finetune is deterministic and honors the PEFT boundary") {
    const fs::path dir = fresh_dir("finetune");
    const std::string a = (dir / "a.ckpt").string();
    const std::string b = (dir / "b.ckpt").string();
    REQUIRE(run("finetune --preset desk --rate 0.3 --steps 3 --seed 11 --out " + a) == 0);
    REQUIRE(run("finetune --preset desk --rate 0.3 --steps 3 --seed 11 --out " + b) == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a + ".log.csv") == slurp(b + ".log.csv"));

    json resolved = json::parse(slurp(a + ".config.json"));
    CHECK(resolved["frozen_digest_before"] == resolved["frozen_digest_after"]);
}

TEST_CASE("finetune --steps 0 emits the untouched initialization") {
    const fs::path dir = fresh_dir("finetune_zero");
    const std::string out = (dir / "init.ckpt").string();
    REQUIRE(run("finetune --preset desk --rate 0.5 --steps 0 --seed 7 --out " + out) == 0);

    tsvit::EncoderConfig cfg = tsvit::EncoderConfig::preset("desk");
    cfg.mode = tsvit::EncoderMode::dynamic;
    cfg.rate = 0.5;
    cfg.seed = 7;
    tsvit::EncoderWeights reference = tsvit::init_encoder_weights(cfg);
    tsvit::EncoderWeights loaded = tsvit::init_encoder_weights(cfg);
    tsvit::load_checkpoint(out, cfg, loaded);
    CHECK(tsvit::weights_digest(loaded, false, false) == tsvit::weights_digest(reference, false, false));
}

TEST_CASE("diverging training aborts with a failure exit") {
    const fs::path dir = fresh_dir("finetune_nan");
    const std::string out = (dir / "x.ckpt").string();
    CHECK(run("finetune --preset desk --rate 0.3 --steps 20 --lr 1e200 --seed 13 --out " + out) == 1);
    CHECK(!fs::exists(out));  // no checkpoint from an aborted run
}

TEST_CASE("profile reports constant counts in dense mode") {
    const fs::path dir = fresh_dir("profile");
    REQUIRE(run("profile --preset desk --mode dense --samples 3 --seed 2 --out " + dir.string()) == 0);
    const std::string csv = slurp(dir / "activations.csv");
    CHECK(csv.rfind("layer,mean,min,max\n", 0) == 0);
    CHECK(count_lines(csv) == 5);  // header + 4 layers
    CHECK(csv.find("0,128.000000,128,128") != std::string::npos);
}

TEST_CASE("profile output is reproducible under a fixed seed") {
    const fs::path a = fresh_dir("profile_a");
    const fs::path b = fresh_dir("profile_b");
    const std::string args = "profile --preset desk --mode dynamic --rate 0.5 --samples 3 --seed 6 --out ";
    REQUIRE(run(args + a.string()) == 0);
    REQUIRE(run(args + b.string()) == 0);
    CHECK(slurp(a / "activations.csv") == slurp(b / "activations.csv"));
}

TEST_CASE("bench emits trials plus summary rows") {
    const fs::path dir = fresh_dir("bench");
    REQUIRE(run("bench --preset desk --mode dense --trials 5 --warmup 2 --seed 2 --out " + dir.string()) == 0);
    const std::string csv = slurp(dir / "latency.csv");
    CHECK(csv.rfind("trial,millis\n", 0) == 0);
    CHECK(count_lines(csv) == 1 + 5 + 3);  // header, 5 trials, median/iqr/fps
    CHECK(csv.find("median,") != std::string::npos);
    CHECK(csv.find("iqr,") != std::string::npos);
    CHECK(csv.find("fps,") != std::string::npos);
}

TEST_CASE("metrics computes NDS and ranks from a table") {
    const fs::path dir = fresh_dir("metrics");
    const fs::path input = dir / "table.csv";
    {
        std::ofstream out(input);
        out << "name,map,ate,ase,aoe,ave,aae,gflops\n";
        out << "base,0.507,0.560,0.257,0.259,0.255,0.196,9342\n";
        out << "ours,0.509,0.585,0.258,0.304,0.237,0.196,5759\n";
    }
    REQUIRE(run("metrics --input " + input.string() + " --out " + dir.string()) == 0);
    const std::string csv = slurp(dir / "metrics.csv");
    CHECK(csv.rfind("row,mAP,NDS,avg_rank\n", 0) == 0);
    CHECK(csv.find("ours,0.509000,0.596500,") != std::string::npos);
}

TEST_CASE("malformed metrics input exits with a usage error") {
    const fs::path dir = fresh_dir("metrics_bad");
    const fs::path input = dir / "bad.csv";
    {
        std::ofstream out(input);
        out << "name,map,ate,ase,aoe,ave,aae\n";
        out << "row,0.5,xyz,0.2,0.3,0.2,0.2\n";
    }
    CHECK(run("metrics --input " + input.string() + " --out " + dir.string()) == 2);
}

TEST_CASE("missing required seed is a usage error") {
    const fs::path dir = fresh_dir("seedless");
    CHECK(run("verify --preset desk --out " + dir.string()) == 2);
    CHECK(run("profile --preset desk --out " + dir.string()) == 2);
}

TEST_CASE("config file fills unset flags while explicit flags win") {
    const fs::path dir = fresh_dir("config_file");
    const fs::path cfg_path = dir / "run.json";
    {
        std::ofstream out(cfg_path);
        out << R"({"preset": "desk", "mode": "dynamic", "rate": 0.3})" << "\n";
    }
    REQUIRE(run("analyze --config " + cfg_path.string() + " --out " + dir.string()) == 0);
    json resolved = json::parse(slurp(dir / "config_resolved.json"));
    CHECK(resolved["encoder"]["mode"] == "dynamic");
    CHECK(resolved["encoder"]["rate"].get<double>() == doctest::Approx(0.3));

    REQUIRE(run("analyze --config " + cfg_path.string() + " --rate 0.1 --out " + dir.string()) == 0);
    resolved = json::parse(slurp(dir / "config_resolved.json"));
    CHECK(resolved["encoder"]["rate"].get<double>() == doctest::Approx(0.1));
}
