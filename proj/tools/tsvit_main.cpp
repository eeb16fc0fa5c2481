#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

#include "tsvit/commands.hpp"
#include "tsvit/errors.hpp"

namespace {

using nlohmann::json;

// Optional JSON config file: values fill in for flags the user did not set
// explicitly on the command line (flags win).
void apply_config_file(CLI::App* sub, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw tsvit::IoError("cannot open config file " + path);
    json j = json::parse(in, nullptr, true, true);
    for (auto it = j.begin(); it != j.end(); ++it) {
        CLI::Option* opt = sub->get_option_no_throw("--" + it.key());
        if (!opt || opt->count() > 0) continue;
        std::vector<std::string> values;
        if (it.value().is_array()) {
            for (const auto& v : it.value()) values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        } else if (it.value().is_string()) {
            values.push_back(it.value().get<std::string>());
        } else {
            values.push_back(it.value().dump());
        }
        opt->add_result(values);
        opt->run_callback();
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsvit: dynamic token-selection ViT encoder toolkit"};
    app.require_subcommand(1);

    tsvit::AnalyzeOptions analyze;
    std::string analyze_config;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "complexity and parameter accounting");
    analyze_cmd->add_option("--preset", analyze.preset, "desk | samb | eva02l");
    analyze_cmd->add_option("--mode", analyze.mode, "dense | baseline | dynamic");
    analyze_cmd->add_option("--ratios", analyze.ratios, "baseline keep ratios");
    analyze_cmd->add_option("--rate", analyze.rate, "dynamic activation rate r");
    analyze_cmd->add_option("--out", analyze.out_dir, "output directory");
    analyze_cmd->add_option("--config", analyze_config, "JSON config file");

    tsvit::VerifyOptions verify;
    std::string verify_config;
    CLI::App* verify_cmd = app.add_subcommand("verify", "run the property suite");
    verify_cmd->add_option("--preset", verify.preset, "desk | samb | eva02l");
    verify_cmd->add_option("--seed", verify.seed, "seed")->required();
    verify_cmd->add_option("--out", verify.out_dir, "output directory");
    verify_cmd->add_option("--ckpt", verify.checkpoint, "checkpoint to integrity-check");
    verify_cmd->add_option("--config", verify_config, "JSON config file");

    tsvit::FinetuneCliOptions finetune;
    std::string finetune_config;
    CLI::App* finetune_cmd = app.add_subcommand("finetune", "parameter-efficient fine-tuning");
    finetune_cmd->add_option("--preset", finetune.preset, "desk | samb | eva02l");
    finetune_cmd->add_option("--rate", finetune.rate, "target activation rate r");
    finetune_cmd->add_option("--steps", finetune.steps, "training steps");
    finetune_cmd->add_option("--lr", finetune.lr, "learning rate");
    finetune_cmd->add_option("--lambda", finetune.lambda_rate, "rate-loss weight");
    finetune_cmd->add_option("--seed", finetune.seed, "seed")->required();
    finetune_cmd->add_option("--data", finetune.data, "synthetic | image directory");
    finetune_cmd->add_option("--out", finetune.out, "checkpoint path");
    finetune_cmd->add_option("--config", finetune_config, "JSON config file");

    tsvit::ProfileOptions profile;
    std::string profile_config;
    CLI::App* profile_cmd = app.add_subcommand("profile", "per-layer activated-token profile");
    profile_cmd->add_option("--preset", profile.preset, "desk | samb | eva02l");
    profile_cmd->add_option("--mode", profile.mode, "dense | baseline | dynamic");
    profile_cmd->add_option("--ratios", profile.ratios, "baseline keep ratios");
    profile_cmd->add_option("--rate", profile.rate, "dynamic activation rate r");
    profile_cmd->add_option("--samples", profile.samples, "sample count");
    profile_cmd->add_option("--seed", profile.seed, "seed")->required();
    profile_cmd->add_option("--ckpt", profile.checkpoint, "checkpoint to load");
    profile_cmd->add_option("--out", profile.out_dir, "output directory");
    profile_cmd->add_option("--config", profile_config, "JSON config file");

    tsvit::BenchOptions bench;
    std::string bench_config;
    CLI::App* bench_cmd = app.add_subcommand("bench", "encoder latency benchmark");
    bench_cmd->add_option("--preset", bench.preset, "desk | samb | eva02l");
    bench_cmd->add_option("--mode", bench.mode, "dense | baseline | dynamic");
    bench_cmd->add_option("--rate", bench.rate, "dynamic activation rate r");
    bench_cmd->add_option("--trials", bench.trials, "timed trials (>= 5)");
    bench_cmd->add_option("--warmup", bench.warmup, "warmup runs (>= 2)");
    bench_cmd->add_option("--seed", bench.seed, "seed")->required();
    bench_cmd->add_option("--ckpt", bench.checkpoint, "checkpoint to load");
    bench_cmd->add_option("--out", bench.out_dir, "output directory");
    bench_cmd->add_option("--config", bench_config, "JSON config file");

    tsvit::MetricsOptions metrics;
    CLI::App* metrics_cmd = app.add_subcommand("metrics", "NDS and average-rank computation");
    metrics_cmd->add_option("--input", metrics.input, "detection table CSV")->required();
    metrics_cmd->add_option("--out", metrics.out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : tsvit::kExitUsage;
    }

    try {
        if (analyze_cmd->parsed()) {
            apply_config_file(analyze_cmd, analyze_config);
            return tsvit::cmd_analyze(analyze);
        }
        if (verify_cmd->parsed()) {
            apply_config_file(verify_cmd, verify_config);
            return tsvit::cmd_verify(verify);
        }
        if (finetune_cmd->parsed()) {
            apply_config_file(finetune_cmd, finetune_config);
            return tsvit::cmd_finetune(finetune);
        }
        if (profile_cmd->parsed()) {
            apply_config_file(profile_cmd, profile_config);
            return tsvit::cmd_profile(profile);
        }
        if (bench_cmd->parsed()) {
            apply_config_file(bench_cmd, bench_config);
            return tsvit::cmd_bench(bench);
        }
        if (metrics_cmd->parsed()) return tsvit::cmd_metrics(metrics);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return tsvit::kExitUsage;
    }
    return tsvit::kExitUsage;
}
