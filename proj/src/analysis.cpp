#include "tsvit/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tsvit/attention.hpp"
#include "tsvit/baseline_layer.hpp"
#include "tsvit/errors.hpp"
#include "tsvit/projection.hpp"

namespace tsvit {

const char* kFlopsConvention =
    "matmul=2mac;softmax=5/el;norm=8/el;act=8/el;mul=1/el;wmhsa-prorated-to-unpadded";

BlockCost ComplexityReport::total() const {
    BlockCost t;
    t.block = "total";
    for (const auto& b : blocks) {
        t.params += b.params;
        t.flops += b.flops;
    }
    return t;
}

const BlockCost& ComplexityReport::block(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.block == name) return b;
    throw ParameterError("no block named '" + name + "' in report");
}

namespace {

long long ll(double v) { return static_cast<long long>(std::llround(v)); }

}  // namespace

ComplexityReport count_layer(const EncoderConfig& cfg, EncoderMode mode, const LayerTokenCounts& tokens) {
    cfg.validate();
    const WindowGrid grid = cfg.grid();
    const int64_t d = cfg.dim, d_o = cfg.proj_hidden(), d_h = cfg.hidden_tc, a = cfg.heads;
    const int64_t n = grid.tokens(), np = grid.per_window, e = grid.windows;

    ComplexityReport rep;
    rep.mode = to_string(mode);
    rep.convention = kFlopsConvention;
    rep.tokens_n = n;
    rep.windows_e = e;
    rep.per_window = np;

    // Per-token attention cost over windows of N' tokens; the dense and
    // dynamic layers run attention over the full (padded) grid, charged to
    // the N real tokens.
    const long long wmhsa_per_token = 8 * d * d + 4 * np * d + 5 * a * np;

    switch (mode) {
        case EncoderMode::dense: {
            const double g = static_cast<double>(n);
            rep.proj_tokens = g;
            rep.blocks.push_back({"wmhsa", wmhsa_param_count(d), wmhsa_per_token * n});
            rep.blocks.push_back({"output_projection", projection_param_count(d), projection_flops(d, n)});
            rep.blocks.push_back({"layer_norms", 2 * d + 2 * d + 2 * d_o,
                                  ll(8.0 * d * n + 8.0 * d * g + 8.0 * d_o * g)});
            rep.blocks.push_back({"elementwise", 0, ll(8.0 * d_o * g + 1.0 * d_o * g + 2.0 * d * n)});
            break;
        }
        case EncoderMode::baseline: {
            const BaselineCount bc = baseline_selected_count(grid, tokens.ratio);
            const int64_t kp = bc.keep_per_window, k = bc.selected_total;
            rep.proj_tokens = static_cast<double>(k);
            rep.blocks.push_back({"token_scorer", kMotionQueryCount * kMotionQueryDim + kMotionQueryDim * d,
                                  2LL * kMotionQueryDim * d * n + 2LL * kMotionQueryCount * kMotionQueryDim * n});
            rep.blocks.push_back({"wmhsa", wmhsa_param_count(d), wmhsa_flops(d, a, e, kp)});
            rep.blocks.push_back({"output_projection", projection_param_count(d), projection_flops(d, k)});
            rep.blocks.push_back({"layer_norms", 2 * d + 2 * d + 2 * d_o,
                                  ll(8.0 * d * k * 2 + 8.0 * d_o * k)});
            rep.blocks.push_back({"elementwise", 0, ll(8.0 * d_o * k + 1.0 * d_o * k + 8.0 * n + 2.0 * d * k)});
            break;
        }
        case EncoderMode::dynamic: {
            const double kbar = tokens.kbar > 0.0 ? tokens.kbar : cfg.rate * static_cast<double>(n);
            rep.proj_tokens = kbar;
            rep.blocks.push_back({"wmhsa", wmhsa_param_count(d), wmhsa_per_token * n});
            rep.blocks.push_back({"token_selector", d + 1, 2LL * d * n});
            rep.blocks.push_back({"output_projection", projection_param_count(d),
                                  ll(2.0 * 3.0 * d * d_o * kbar)});
            rep.blocks.push_back({"token_compensator", 2 * d * d_h + d_h + 2 * d, 4LL * d * d_h * n});
            rep.blocks.push_back({"layer_norms", 2 * d + 2 * d + 2 * d_o,
                                  ll(8.0 * d * n + 8.0 * d * kbar + 8.0 * d_o * kbar + 8.0 * d * n)});
            rep.blocks.push_back({"elementwise", 0,
                                  ll(8.0 * d_o * kbar + 1.0 * d_o * kbar + 8.0 * n + 1.0 * d_h * n + 3.0 * d * n +
                                     1.0 * d * kbar)});
            break;
        }
    }
    return rep;
}

EncoderComplexity count_encoder(const EncoderConfig& cfg, const std::vector<double>& kbars) {
    cfg.validate();
    EncoderComplexity enc;
    SelectionRatioSchedule schedule{cfg.baseline_ratios};
    const int64_t n = cfg.tokens();
    for (int64_t i = 0; i < cfg.layers; ++i) {
        LayerTokenCounts tokens;
        if (cfg.mode == EncoderMode::baseline) tokens.ratio = schedule.ratio_for_layer(i, cfg.layers);
        if (cfg.mode == EncoderMode::dynamic)
            tokens.kbar = kbars.empty() ? cfg.rate * static_cast<double>(n) : kbars[static_cast<size_t>(i)];
        enc.layers.push_back(count_layer(cfg, cfg.mode, tokens));
    }
    enc.patch_embed_params = cfg.dim * 3 * cfg.patch * cfg.patch + cfg.dim;
    enc.patch_embed_flops = 2LL * 3 * cfg.patch * cfg.patch * cfg.dim * n;
    enc.total_params = enc.patch_embed_params;
    enc.total_flops = enc.patch_embed_flops;
    bool scorer_counted = false;
    for (const auto& layer : enc.layers) {
        for (const auto& b : layer.blocks) {
            // The motion-query scorer is shared across layers; count its
            // parameters once.
            if (b.block == "token_scorer" && scorer_counted) {
                enc.total_flops += b.flops;
                continue;
            }
            if (b.block == "token_scorer") scorer_counted = true;
            enc.total_params += b.params;
            enc.total_flops += b.flops;
        }
    }
    return enc;
}

std::vector<ActivationRow> profile_activations(const std::vector<std::vector<int64_t>>& counts) {
    if (counts.empty()) throw ParameterError("profile needs at least one sample");
    const size_t layers = counts.front().size();
    std::vector<ActivationRow> rows(layers);
    for (size_t l = 0; l < layers; ++l) {
        ActivationRow& row = rows[l];
        row.layer = static_cast<int64_t>(l);
        row.min = counts.front()[l];
        row.max = counts.front()[l];
        double sum = 0.0;
        for (const auto& sample : counts) {
            if (sample.size() != layers) throw DimensionError("profile sample layer count mismatch");
            sum += static_cast<double>(sample[l]);
            row.min = std::min(row.min, sample[l]);
            row.max = std::max(row.max, sample[l]);
        }
        row.mean = sum / static_cast<double>(counts.size());
    }
    return rows;
}

LatencyStats latency_bench(const std::function<void()>& fn, int64_t trials, int64_t warmup) {
    if (trials < 5) throw ParameterError("latency_bench needs at least 5 trials");
    if (warmup < 2) throw ParameterError("latency_bench needs at least 2 warmup runs");
    using clock = std::chrono::steady_clock;
    for (int64_t i = 0; i < warmup; ++i) fn();
    LatencyStats stats;
    stats.millis.reserve(static_cast<size_t>(trials));
    for (int64_t i = 0; i < trials; ++i) {
        const auto t0 = clock::now();
        fn();
        const auto t1 = clock::now();
        stats.millis.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::vector<double> sorted = stats.millis;
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&sorted](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    stats.median = quantile(0.5);
    stats.iqr = quantile(0.75) - quantile(0.25);
    stats.fps = stats.median > 0.0 ? 1000.0 / stats.median : 0.0;
    return stats;
}

double compute_map(const Tensor& ap) {
    if (ap.size() == 0) throw ParameterError("empty AP matrix");
    double acc = 0.0;
    for (int64_t i = 0; i < ap.size(); ++i) acc += ap.at(i);
    return acc / static_cast<double>(ap.size());
}

std::vector<double> compute_mtp(const Tensor& tp) {
    if (tp.ndim() != 2 || tp.size() == 0) throw ParameterError("mTP expects a non-empty [W x S] matrix");
    const int64_t w = tp.extent(0), s = tp.extent(1);
    std::vector<double> out(static_cast<size_t>(w), 0.0);
    for (int64_t i = 0; i < w; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < s; ++j) acc += tp.at(i, j);
        out[static_cast<size_t>(i)] = acc / static_cast<double>(s);
    }
    return out;
}

double compute_nds(double map, const std::vector<double>& mtp) {
    if (mtp.size() != 5) throw ParameterError("NDS expects exactly 5 TP error metrics");
    double acc = 0.5 * map;
    for (double v : mtp) acc += 0.1 * (1.0 - std::min(1.0, v));
    return acc;
}

std::vector<double> average_rank(const std::vector<std::vector<double>>& rows,
                                 const std::vector<bool>& higher_better) {
    if (rows.size() < 2) throw ParameterError("average rank needs at least two rows");
    const size_t metrics = higher_better.size();
    for (const auto& row : rows)
        if (row.size() != metrics) throw DimensionError("rank table row width mismatch");

    std::vector<double> avg(rows.size(), 0.0);
    std::vector<size_t> order(rows.size());
    for (size_t m = 0; m < metrics; ++m) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return higher_better[m] ? rows[a][m] > rows[b][m] : rows[a][m] < rows[b][m];
        });
        // Tied values share the mean of their rank span.
        size_t i = 0;
        while (i < order.size()) {
            size_t j = i;
            while (j + 1 < order.size() && rows[order[j + 1]][m] == rows[order[i]][m]) ++j;
            const double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
            for (size_t t = i; t <= j; ++t) avg[order[t]] += shared;
            i = j + 1;
        }
    }
    for (double& v : avg) v /= static_cast<double>(metrics);
    return avg;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void write_complexity_csv(const std::string& path, const ComplexityReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path);
    out << "block,params,flops,convention\n";
    for (const auto& b : report.blocks)
        out << b.block << "," << b.params << "," << b.flops << "," << report.convention << "\n";
    const BlockCost t = report.total();
    out << t.block << "," << t.params << "," << t.flops << "," << report.convention << "\n";
    if (!out) throw IoError("write failed: " + path);
}

void write_activations_csv(const std::string& path, const std::vector<ActivationRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path);
    out << "layer,mean,min,max\n";
    for (const auto& r : rows)
        out << r.layer << "," << format_double(r.mean) << "," << r.min << "," << r.max << "\n";
    if (!out) throw IoError("write failed: " + path);
}

void write_latency_csv(const std::string& path, const LatencyStats& stats) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path);
    out << "trial,millis\n";
    for (size_t i = 0; i < stats.millis.size(); ++i)
        out << (i + 1) << "," << format_double(stats.millis[i]) << "\n";
    out << "median," << format_double(stats.median) << "\n";
    out << "iqr," << format_double(stats.iqr) << "\n";
    out << "fps," << format_double(stats.fps) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

double parse_double(const std::string& s, int line_no) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParameterError("malformed CSV at line " + std::to_string(line_no) + ": bad number '" + s + "'");
    }
}

}  // namespace

MetricsTable read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    int line_no = 0;
    MetricsTable table;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (header.empty()) {
            header = fields;
            if (header.size() < 7 || header[0] != "name")
                throw ParameterError("malformed CSV at line 1: expected header name,map,ate,ase,aoe,ave,aae[,...]");
            for (size_t i = 7; i < header.size(); ++i) table.extra_names.push_back(header[i]);
            continue;
        }
        if (fields.size() != header.size())
            throw ParameterError("malformed CSV at line " + std::to_string(line_no) + ": expected " +
                                 std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
        MetricsRow row;
        row.name = fields[0];
        row.map = parse_double(fields[1], line_no);
        for (size_t i = 2; i < 7; ++i) row.mtp.push_back(parse_double(fields[i], line_no));
        for (size_t i = 7; i < fields.size(); ++i) row.extra.push_back(parse_double(fields[i], line_no));
        table.rows.push_back(std::move(row));
    }
    if (table.rows.empty()) throw ParameterError("metrics CSV has no data rows");
    return table;
}

MetricsResult compute_metrics(const MetricsTable& table) {
    MetricsResult result;
    std::vector<std::vector<double>> rank_rows;
    std::vector<bool> higher;
    for (const auto& row : table.rows) {
        const double nds = compute_nds(row.map, row.mtp);
        result.names.push_back(row.name);
        result.map.push_back(row.map);
        result.nds.push_back(nds);
        std::vector<double> metrics;
        metrics.push_back(row.map);
        metrics.push_back(nds);
        for (double v : row.mtp) metrics.push_back(v);
        for (double v : row.extra) metrics.push_back(v);
        rank_rows.push_back(std::move(metrics));
    }
    higher.assign(2, true);                              // mAP, NDS
    higher.insert(higher.end(), 5, false);               // TP errors
    higher.insert(higher.end(), table.extra_names.size(), false);  // size/flops/latency
    if (rank_rows.size() >= 2) {
        result.avg_rank = average_rank(rank_rows, higher);
    } else {
        result.avg_rank.assign(rank_rows.size(), 1.0);
    }
    return result;
}

void write_metrics_csv(const std::string& path, const MetricsResult& result) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path);
    out << "row,mAP,NDS,avg_rank\n";
    for (size_t i = 0; i < result.names.size(); ++i)
        out << result.names[i] << "," << format_double(result.map[i]) << "," << format_double(result.nds[i]) << ","
            << format_double(result.avg_rank[i]) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace tsvit
