#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsvit/encoder.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

// Counting convention declared in every report. Matmul work is 2 flops per
// multiply-accumulate; softmax costs 5 and layer norm 8 flops per element;
// pointwise activations cost 8 and products 1. Window attention in the
// dense and dynamic layers is pro-rated to the N unpadded tokens
// (per-token cost times N); the baseline layer counts its selected tokens
// as-is since K = E K' is the quantity of interest there.
extern const char* kFlopsConvention;

struct BlockCost {
    std::string block;
    int64_t params = 0;
    long long flops = 0;
};

struct ComplexityReport {
    std::string mode;
    std::vector<BlockCost> blocks;
    std::string convention = "";
    int64_t tokens_n = 0;      // N
    int64_t windows_e = 0;     // E
    int64_t per_window = 0;    // N'
    double proj_tokens = 0.0;  // G fed to the output projection

    BlockCost total() const;
    const BlockCost& block(const std::string& name) const;
};

struct LayerTokenCounts {
    double ratio = 1.0;   // baseline keep ratio
    double kbar = 0.0;    // dynamic mean selected count
};

// Per-block parameter and flop counts of one encoder layer.
ComplexityReport count_layer(const EncoderConfig& cfg, EncoderMode mode, const LayerTokenCounts& tokens);

struct EncoderComplexity {
    std::vector<ComplexityReport> layers;
    int64_t patch_embed_params = 0;
    long long patch_embed_flops = 0;
    int64_t total_params = 0;
    long long total_flops = 0;  // one view
};

// Whole-encoder accounting; `kbars`, when non-empty, supplies one dynamic
// mean K-bar per layer (defaults to rate * N).
EncoderComplexity count_encoder(const EncoderConfig& cfg, const std::vector<double>& kbars = {});

struct ActivationRow {
    int64_t layer = 0;
    double mean = 0.0;
    int64_t min = 0;
    int64_t max = 0;
};

// Per-layer activated-token statistics over a sample set; input is
// samples x layers counts.
std::vector<ActivationRow> profile_activations(const std::vector<std::vector<int64_t>>& counts);

struct LatencyStats {
    std::vector<double> millis;  // per trial
    double median = 0.0;
    double iqr = 0.0;
    double fps = 0.0;
};

// Median and IQR wall-clock of `fn` after warmup; trials >= 5, warmup >= 2.
LatencyStats latency_bench(const std::function<void()>& fn, int64_t trials, int64_t warmup);

// Detection-metric arithmetic.
double compute_map(const Tensor& ap);                       // mean over a [U x S] matrix
std::vector<double> compute_mtp(const Tensor& tp);          // row means of [W x S]
double compute_nds(double map, const std::vector<double>& mtp);  // 5 TP metrics, clipped at 1

// Fractional (mean) ranks per metric, averaged per row; `higher_better`
// gives the direction per metric column.
std::vector<double> average_rank(const std::vector<std::vector<double>>& rows,
                                 const std::vector<bool>& higher_better);

// CSV emitters. Plain decimal numbers, header row, newline-terminated.
void write_complexity_csv(const std::string& path, const ComplexityReport& report);
void write_activations_csv(const std::string& path, const std::vector<ActivationRow>& rows);
void write_latency_csv(const std::string& path, const LatencyStats& stats);

struct MetricsRow {
    std::string name;
    double map = 0.0;
    std::vector<double> mtp;            // ATE, ASE, AOE, AVE, AAE
    std::vector<double> extra;          // optional lower-is-better columns
};

struct MetricsTable {
    std::vector<std::string> extra_names;
    std::vector<MetricsRow> rows;
};

// Reads a detection table CSV (name,map,ate,ase,aoe,ave,aae[,extra...]).
// Throws ParameterError naming the offending line on malformed input.
MetricsTable read_metrics_csv(const std::string& path);

struct MetricsResult {
    std::vector<std::string> names;
    std::vector<double> map;
    std::vector<double> nds;
    std::vector<double> avg_rank;
};

// NDS per row plus the average rank across mAP, NDS, the TP errors and any
// extra columns.
MetricsResult compute_metrics(const MetricsTable& table);

void write_metrics_csv(const std::string& path, const MetricsResult& result);

std::string format_double(double v);

}  // namespace tsvit
