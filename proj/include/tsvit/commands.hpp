#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tsvit {

// Exit-code contract: 0 pass, 1 verification/training failure, 2 usage or
// parse error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct AnalyzeOptions {
    std::string preset = "desk";
    std::string mode = "dense";
    std::vector<double> ratios;
    double rate = 0.5;
    std::string out_dir = ".";
};

struct VerifyOptions {
    std::string preset = "desk";
    uint64_t seed = 1;
    std::string out_dir = ".";
    std::string checkpoint;  // optional integrity check target
};

struct FinetuneCliOptions {
    std::string preset = "desk";
    double rate = 0.5;
    int64_t steps = 500;
    double lr = 0.15;
    double lambda_rate = 2.0;
    uint64_t seed = 1;
    std::string data = "synthetic";
    std::string out = "model.ckpt";
};

struct ProfileOptions {
    std::string preset = "desk";
    std::string mode = "dense";
    std::vector<double> ratios;
    double rate = 0.5;
    int64_t samples = 4;
    uint64_t seed = 1;
    std::string checkpoint;
    std::string out_dir = ".";
};

struct BenchOptions {
    std::string preset = "desk";
    std::string mode = "dense";
    double rate = 0.5;
    int64_t trials = 9;
    int64_t warmup = 2;
    uint64_t seed = 1;
    std::string checkpoint;
    std::string out_dir = ".";
};

struct MetricsOptions {
    std::string input;
    std::string out_dir = ".";
};

int cmd_analyze(const AnalyzeOptions& opts);
int cmd_verify(const VerifyOptions& opts);
int cmd_finetune(const FinetuneCliOptions& opts);
int cmd_profile(const ProfileOptions& opts);
int cmd_bench(const BenchOptions& opts);
int cmd_metrics(const MetricsOptions& opts);

}  // namespace tsvit
