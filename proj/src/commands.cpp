#include "tsvit/commands.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "tsvit/analysis.hpp"
#include "tsvit/errors.hpp"
#include "tsvit/training.hpp"

namespace tsvit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

EncoderMode parse_mode(const std::string& mode) {
    if (mode == "dense") return EncoderMode::dense;
    if (mode == "baseline") return EncoderMode::baseline;
    if (mode == "dynamic") return EncoderMode::dynamic;
    throw ConfigurationError("unknown mode '" + mode + "'");
}

EncoderConfig build_config(const std::string& preset, const std::string& mode, const std::vector<double>& ratios,
                           double rate, uint64_t seed) {
    EncoderConfig cfg = EncoderConfig::preset(preset);
    cfg.mode = parse_mode(mode);
    if (!ratios.empty()) cfg.baseline_ratios = ratios;
    cfg.rate = rate;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

json config_json(const EncoderConfig& cfg) {
    json j;
    j["mode"] = to_string(cfg.mode);
    j["layers"] = cfg.layers;
    j["dim"] = cfg.dim;
    j["heads"] = cfg.heads;
    j["window"] = cfg.window;
    j["patch"] = cfg.patch;
    j["hidden_tc"] = cfg.hidden_tc;
    j["image_h"] = cfg.image_h;
    j["image_w"] = cfg.image_w;
    j["views"] = cfg.views;
    j["baseline_ratios"] = cfg.baseline_ratios;
    j["rate"] = cfg.rate;
    j["theta"] = cfg.theta;
    j["gumbel_temperature"] = cfg.gumbel_temperature;
    j["double_residual"] = cfg.double_residual;
    j["eps"] = cfg.eps;
    j["seed"] = cfg.seed;
    j["digest"] = cfg.digest();
    return j;
}

// Every run records its fully-resolved configuration next to its outputs.
void write_resolved_config(const std::string& path, const std::string& command, const EncoderConfig& cfg,
                           const json& extra) {
    json j;
    j["command"] = command;
    j["encoder"] = config_json(cfg);
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path);
    out << j.dump(2) << "\n";
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir);
}

}  // namespace

int cmd_analyze(const AnalyzeOptions& opts) {
    EncoderConfig cfg = build_config(opts.preset, opts.mode, opts.ratios, opts.rate, 1);
    ensure_out_dir(opts.out_dir);

    LayerTokenCounts tokens;
    if (cfg.mode == EncoderMode::baseline) tokens.ratio = cfg.baseline_ratios.front();
    if (cfg.mode == EncoderMode::dynamic) tokens.kbar = cfg.rate * static_cast<double>(cfg.tokens());
    ComplexityReport layer = count_layer(cfg, cfg.mode, tokens);
    write_complexity_csv((fs::path(opts.out_dir) / "complexity.csv").string(), layer);

    EncoderComplexity enc = count_encoder(cfg);
    json summary;
    summary["per_layer"] = json::array();
    for (const auto& b : layer.blocks) summary["per_layer"].push_back({{"block", b.block}, {"params", b.params}, {"flops", b.flops}});
    summary["layer_total_params"] = layer.total().params;
    summary["layer_total_flops"] = layer.total().flops;
    summary["encoder_total_params"] = enc.total_params;
    summary["encoder_total_flops_one_view"] = enc.total_flops;
    summary["encoder_total_flops_all_views"] = enc.total_flops * cfg.views;
    summary["convention"] = layer.convention;
    if (cfg.mode == EncoderMode::dynamic) {
        ParamPartition part = peft_partition(cfg);
        summary["trainable_params"] = part.trainable_count();
        summary["frozen_params"] = part.frozen_count();
        summary["total_params"] = part.total_count();
    } else {
        ParamPartition part = enumerate_params(cfg);
        summary["total_params"] = part.total_count();
    }
    std::ofstream sum((fs::path(opts.out_dir) / "params_summary.json").string(), std::ios::trunc);
    if (!sum) throw IoError("cannot open params_summary.json");
    sum << summary.dump(2) << "\n";

    write_resolved_config((fs::path(opts.out_dir) / "config_resolved.json").string(), "analyze", cfg, json::object());
    std::cout << "analyze: wrote complexity.csv and params_summary.json to " << opts.out_dir << "\n";
    return kExitOk;
}

namespace {

struct PropertyResult {
    std::string name;
    bool pass = true;
    std::string detail;
};

double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

PropertyResult check_window_roundtrip(uint64_t seed) {
    PropertyResult res{"window_roundtrip", true, ""};
    Rng rng(Rng::mix(seed, 11));
    for (int it = 0; it < 200 && res.pass; ++it) {
        const int64_t d = 1 + static_cast<int64_t>(rng.next_u64() % 6);
        const int64_t ht = 1 + static_cast<int64_t>(rng.next_u64() % 9);
        const int64_t wt = 1 + static_cast<int64_t>(rng.next_u64() % 9);
        const int64_t f = 1 + static_cast<int64_t>(rng.next_u64() % 5);
        const WindowGrid grid = WindowGrid::make(d, ht, wt, f);
        Tensor x = Tensor::random_normal({d, grid.tokens()}, rng);
        Tensor back = window_unpartition(window_partition(x, grid), grid);
        for (int64_t i = 0; i < x.size(); ++i)
            if (x.at(i) != back.at(i)) {
                res.pass = false;
                res.detail = "round trip mismatch at case " + std::to_string(it);
                break;
            }
    }
    return res;
}

PropertyResult check_gather_reverse(uint64_t seed) {
    PropertyResult res{"gather_reverse_reconstruction", true, ""};
    Rng rng(Rng::mix(seed, 13));
    for (int it = 0; it < 200 && res.pass; ++it) {
        const int64_t d = 1 + static_cast<int64_t>(rng.next_u64() % 8);
        const int64_t n = 1 + static_cast<int64_t>(rng.next_u64() % 32);
        Tensor x = Tensor::random_normal({d, n}, rng);
        std::vector<uint8_t> binary(static_cast<size_t>(n));
        std::vector<double> soft(static_cast<size_t>(n));
        for (int64_t j = 0; j < n; ++j) {
            soft[static_cast<size_t>(j)] = rng.uniform01();
            binary[static_cast<size_t>(j)] = soft[static_cast<size_t>(j)] > 0.5 ? 1 : 0;
        }
        TokenMask mask = TokenMask::from_binary(binary, soft);
        Tensor restored = reverse_index(gather_selected(x, mask), mask);
        for (int64_t j = 0; j < n && res.pass; ++j)
            for (int64_t c = 0; c < d; ++c) {
                const double expect = binary[static_cast<size_t>(j)] ? x.at(c, j) : 0.0;
                if (restored.at(c, j) != expect) {
                    res.pass = false;
                    res.detail = "reconstruction mismatch at case " + std::to_string(it);
                    break;
                }
            }
    }
    return res;
}

PropertyResult check_sparse_dense(const EncoderConfig& base, uint64_t seed) {
    PropertyResult res{"sparse_dense_equivalence", true, ""};
    EncoderConfig cfg = base;
    cfg.mode = EncoderMode::dynamic;
    cfg.seed = Rng::mix(seed, 17);
    EncoderWeights w = init_encoder_weights(cfg);
    const WindowGrid grid = cfg.grid();
    const auto& lw = w.layers.front();
    RouterConfig rc;
    rc.theta = cfg.theta;
    rc.mode = RouterMode::inference;
    Rng rng(Rng::mix(seed, 19));
    double worst = 0.0;
    for (int it = 0; it < 25; ++it) {
        Tensor m_hat = Tensor::random_normal({cfg.dim, grid.tokens()}, rng);
        Tensor s = saliency_scores(m_hat, lw.selector);
        for (int64_t j = 0; j < grid.tokens(); ++j) s.at(0, j) += rng.normal(0.0, 2.0) - 2.0;
        RouterInferResult sparse = router_infer(m_hat, s, lw.pre_proj_norm, lw.proj, rc, cfg.eps);
        Tensor z({1, grid.tokens()});
        for (int64_t j = 0; j < grid.tokens(); ++j)
            z.at(0, j) = sparse.mask.binary[static_cast<size_t>(j)] ? 1.0 : 0.0;
        Tensor dense = router_apply_gates(m_hat, z, lw.pre_proj_norm, lw.proj, cfg.eps);
        for (int64_t i = 0; i < dense.size(); ++i) worst = std::max(worst, rel_err(sparse.output.at(i), dense.at(i)));
    }
    res.pass = worst < 1e-10;
    char buf[48];
    std::snprintf(buf, sizeof buf, "max rel err %.2e", worst);
    res.detail = buf;
    return res;
}

PropertyResult check_gradients(uint64_t seed) {
    PropertyResult res{"gradient_check", true, ""};
    EncoderConfig cfg;
    cfg.mode = EncoderMode::dynamic;
    cfg.layers = 1;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.window = 2;
    cfg.patch = 4;
    cfg.hidden_tc = 4;
    cfg.image_h = 8;
    cfg.image_w = 12;
    cfg.views = 1;
    cfg.seed = Rng::mix(seed, 23);
    EncoderWeights w = init_encoder_weights(cfg);
    Rng rng(Rng::mix(seed, 29));
    Tensor image = Tensor::random_normal({3, cfg.image_h, cfg.image_w}, rng);
    Tensor probe = Tensor::random_normal({cfg.dim, cfg.tokens()}, rng);
    const uint64_t noise_seed = Rng::mix(seed, 31);

    auto loss_fn = [&](const EncoderWeights& weights) {
        EncoderForwardResult out = encoder_forward(image, cfg, weights, RouterMode::finetune, noise_seed);
        double acc = 0.0;
        for (int64_t i = 0; i < out.z.size(); ++i) acc += out.z.at(i) * probe.at(i);
        return acc;
    };

    std::vector<DynamicLayerCache> caches;
    EncoderForwardResult out = encoder_forward(image, cfg, w, RouterMode::finetune, noise_seed, &caches);
    (void)out;
    EncoderLayerGradients grads = encoder_backward(cfg, w, caches, probe, nullptr, true);
    const auto& lg = grads.layers.front();

    struct Item {
        const char* name;
        Tensor* param;
        const Tensor* grad;
    };
    auto& layer = w.layers.front();
    const std::vector<Item> items = {
        {"selector.w", &layer.selector.w, &lg.d_sel_w},
        {"tc.w_up", &layer.tc.w_up, &lg.d_tc_w_up},
        {"attn.w_q", &layer.attn.w_q, &lg.attn.d_w_q},
        {"proj.w1", &layer.proj.w1, &lg.proj.d_w1},
        {"norm2.gamma", &layer.pre_proj_norm.gamma, &lg.d_ln2_gamma},
    };
    double worst = 0.0;
    for (const auto& item : items) {
        GradPair pair(*item.param, *item.grad);  // enforces matching shapes
        Tensor& param = *item.param;
        const int64_t samples = std::min<int64_t>(param.size(), 6);
        for (int64_t sidx = 0; sidx < samples; ++sidx) {
            const int64_t i = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(param.size()));
            const double orig = param.at(i);
            const double h = 1e-5;
            param.at(i) = orig + h;
            const double fp = loss_fn(w);
            param.at(i) = orig - h;
            const double fm = loss_fn(w);
            param.at(i) = orig;
            const double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst, rel_err(pair.grad.at(i), fd));
        }
    }
    res.pass = worst < 1e-4;
    char buf[48];
    std::snprintf(buf, sizeof buf, "max rel err %.2e", worst);
    res.detail = buf;
    return res;
}

PropertyResult check_peft_freeze(const EncoderConfig& base, uint64_t seed) {
    PropertyResult res{"peft_freeze", true, ""};
    EncoderConfig cfg = base;
    cfg.mode = EncoderMode::dynamic;
    cfg.rate = 0.3;
    cfg.seed = Rng::mix(seed, 37);
    EncoderWeights w = init_encoder_weights(cfg);
    const std::string frozen_before = weights_digest(w, false, true);
    const std::string trainable_before = weights_digest(w, true, false);
    FinetuneOptions opts;
    opts.steps = 5;
    opts.seed = Rng::mix(seed, 41);
    std::vector<Tensor> pool = synthetic_pool(cfg, opts.seed, 2);
    FinetuneLog log = peft_finetune(cfg, w, pool, opts);
    if (log.aborted) {
        res.pass = false;
        res.detail = log.abort_reason;
        return res;
    }
    const bool frozen_ok = weights_digest(w, false, true) == frozen_before;
    const bool trainable_moved = weights_digest(w, true, false) != trainable_before;
    res.pass = frozen_ok && trainable_moved;
    if (!frozen_ok) res.detail = "frozen weights changed";
    if (!trainable_moved) res.detail = "trainable weights did not change";
    return res;
}

PropertyResult check_determinism(const EncoderConfig& base, uint64_t seed) {
    PropertyResult res{"determinism", true, ""};
    EncoderConfig cfg = base;
    cfg.mode = EncoderMode::dynamic;
    cfg.seed = Rng::mix(seed, 43);
    EncoderWeights w = init_encoder_weights(cfg);
    Tensor image = synthetic_image(cfg, Rng::mix(seed, 47));
    EncoderForwardResult a = encoder_forward(image, cfg, w, RouterMode::inference, 7);
    EncoderForwardResult b = encoder_forward(image, cfg, w, RouterMode::inference, 7);
    if (content_hash(a.z) != content_hash(b.z)) {
        res.pass = false;
        res.detail = "repeated forward differs";
    }
    return res;
}

PropertyResult check_checkpoint_roundtrip(const EncoderConfig& base, uint64_t seed, const std::string& out_dir) {
    PropertyResult res{"checkpoint_roundtrip", true, ""};
    EncoderConfig cfg = base;
    cfg.mode = EncoderMode::dynamic;
    cfg.seed = Rng::mix(seed, 53);
    EncoderWeights w = init_encoder_weights(cfg);
    const fs::path p1 = fs::path(out_dir) / "verify_ckpt_a.bin";
    const fs::path p2 = fs::path(out_dir) / "verify_ckpt_b.bin";
    save_checkpoint(p1.string(), cfg, w);
    save_checkpoint(p2.string(), cfg, w);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    if (b1 != b2 || b1.empty()) {
        res.pass = false;
        res.detail = "checkpoint bytes not reproducible";
    }
    EncoderWeights loaded = init_encoder_weights(cfg);
    load_checkpoint(p1.string(), cfg, loaded);
    if (weights_digest(loaded, false, false) != weights_digest(w, false, false)) {
        res.pass = false;
        res.detail = "checkpoint round trip mismatch";
    }
    fs::remove(p1);
    fs::remove(p2);
    return res;
}

PropertyResult check_checkpoint_integrity(const std::string& path) {
    PropertyResult res{"checkpoint_integrity", true, ""};
    try {
        CheckpointData data = read_checkpoint(path);
        for (const auto& [name, tensor] : data.arrays)
            for (int64_t i = 0; i < tensor.size(); ++i)
                if (!std::isfinite(tensor.at(i))) throw IoError("non-finite value in array " + name);
    } catch (const std::exception& e) {
        res.pass = false;
        res.detail = e.what();
    }
    return res;
}

}  // namespace

int cmd_verify(const VerifyOptions& opts) {
    EncoderConfig base = EncoderConfig::preset(opts.preset);
    ensure_out_dir(opts.out_dir);

    std::vector<PropertyResult> results;
    results.push_back(check_window_roundtrip(opts.seed));
    results.push_back(check_gather_reverse(opts.seed));
    results.push_back(check_sparse_dense(base, opts.seed));
    results.push_back(check_gradients(opts.seed));
    results.push_back(check_peft_freeze(base, opts.seed));
    results.push_back(check_determinism(base, opts.seed));
    results.push_back(check_checkpoint_roundtrip(base, opts.seed, opts.out_dir));
    if (!opts.checkpoint.empty()) results.push_back(check_checkpoint_integrity(opts.checkpoint));

    bool all_pass = true;
    json j;
    j["preset"] = opts.preset;
    j["seed"] = opts.seed;
    j["properties"] = json::array();
    for (const auto& r : results) {
        all_pass = all_pass && r.pass;
        j["properties"].push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << (r.detail.empty() ? "" : " (" + r.detail + ")")
                  << "\n";
    }
    j["pass"] = all_pass;
    std::ofstream out((fs::path(opts.out_dir) / "verify.json").string(), std::ios::trunc);
    out << j.dump(2) << "\n";

    EncoderConfig cfg = base;
    cfg.seed = opts.seed;
    write_resolved_config((fs::path(opts.out_dir) / "config_resolved.json").string(), "verify", cfg, json::object());
    if (!all_pass) {
        for (const auto& r : results)
            if (!r.pass) std::cerr << "verification failed: " << r.name << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

namespace {

std::vector<Tensor> load_image_dir(const EncoderConfig& cfg, const std::string& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ParameterError("image directory is empty: " + dir);
    std::vector<Tensor> images;
    const int64_t want = 3 * cfg.image_h * cfg.image_w;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        Tensor img({3, cfg.image_h, cfg.image_w});
        in.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(want * 8));
        if (!in || in.gcount() != want * 8)
            throw ParameterError("image file " + f.string() + " is not a raw float64 array of 3xHxW");
        images.push_back(std::move(img));
    }
    return images;
}

}  // namespace

int cmd_finetune(const FinetuneCliOptions& opts) {
    EncoderConfig cfg = EncoderConfig::preset(opts.preset);
    cfg.mode = EncoderMode::dynamic;
    cfg.rate = opts.rate;
    cfg.seed = opts.seed;
    cfg.validate();

    FinetuneOptions fopts;
    fopts.steps = opts.steps;
    fopts.lr = opts.lr;
    fopts.lambda_rate = opts.lambda_rate;
    fopts.seed = opts.seed;

    std::vector<Tensor> pool;
    if (opts.data == "synthetic") {
        pool = synthetic_pool(cfg, Rng::mix(opts.seed, 0xda7a), fopts.pool_samples * cfg.views);
    } else {
        pool = load_image_dir(cfg, opts.data);
    }

    EncoderWeights weights = init_encoder_weights(cfg);
    const std::string frozen_before = weights_digest(weights, false, true);
    FinetuneLog log = peft_finetune(cfg, weights, pool, fopts);

    const fs::path out_path(opts.out);
    if (out_path.has_parent_path()) ensure_out_dir(out_path.parent_path().string());
    write_training_log_csv(opts.out + ".log.csv", cfg, log);
    json extra;
    extra["steps"] = opts.steps;
    extra["lr"] = opts.lr;
    extra["lambda"] = opts.lambda_rate;
    extra["data"] = opts.data;
    extra["frozen_digest_before"] = frozen_before;
    extra["frozen_digest_after"] = weights_digest(weights, false, true);
    write_resolved_config(opts.out + ".config.json", "finetune", cfg, extra);

    if (log.aborted) {
        std::cerr << "finetune aborted: " << log.abort_reason << "\n";
        return kExitFailure;
    }
    save_checkpoint(opts.out, cfg, weights);
    if (!log.rows.empty()) {
        const auto& last = log.rows.back();
        double mean_act = 0.0;
        for (double v : last.layer_mean_act) mean_act += v;
        mean_act /= static_cast<double>(last.layer_mean_act.empty() ? 1 : last.layer_mean_act.size());
        std::cout << "finetune: final loss " << format_double(last.loss) << ", mean activation "
                  << format_double(mean_act) << "\n";
    }
    return kExitOk;
}

int cmd_profile(const ProfileOptions& opts) {
    EncoderConfig cfg = build_config(opts.preset, opts.mode, opts.ratios, opts.rate, opts.seed);
    ensure_out_dir(opts.out_dir);
    EncoderWeights weights = init_encoder_weights(cfg);
    if (!opts.checkpoint.empty()) load_checkpoint(opts.checkpoint, cfg, weights);

    std::vector<std::vector<int64_t>> counts;
    for (int64_t i = 0; i < opts.samples; ++i) {
        Tensor image = synthetic_image(cfg, Rng::mix(opts.seed, 100 + static_cast<uint64_t>(i)));
        EncoderForwardResult out = encoder_forward(image, cfg, weights, RouterMode::inference,
                                                   Rng::mix(opts.seed, static_cast<uint64_t>(i)));
        counts.push_back(out.activated);
    }
    std::vector<ActivationRow> rows = profile_activations(counts);
    write_activations_csv((fs::path(opts.out_dir) / "activations.csv").string(), rows);

    bool non_increasing = true;
    for (size_t l = 1; l < rows.size(); ++l)
        if (rows[l].mean > rows[l - 1].mean + 1e-9) non_increasing = false;
    std::cout << "profile: wrote activations.csv (" << rows.size() << " layers); mean trend "
              << (non_increasing ? "non-increasing" : "not monotone") << "\n";

    write_resolved_config((fs::path(opts.out_dir) / "config_resolved.json").string(), "profile", cfg,
                          json{{"samples", opts.samples}});
    return kExitOk;
}

int cmd_bench(const BenchOptions& opts) {
    EncoderConfig cfg = build_config(opts.preset, opts.mode, {}, opts.rate, opts.seed);
    ensure_out_dir(opts.out_dir);
    EncoderWeights weights = init_encoder_weights(cfg);
    if (!opts.checkpoint.empty()) load_checkpoint(opts.checkpoint, cfg, weights);

    std::vector<Tensor> views;
    for (int64_t v = 0; v < cfg.views; ++v) views.push_back(synthetic_image(cfg, Rng::mix(opts.seed, static_cast<uint64_t>(v))));

    LatencyStats stats = latency_bench(
        [&]() {
            for (const auto& img : views)
                encoder_forward(img, cfg, weights, RouterMode::inference, opts.seed);
        },
        opts.trials, opts.warmup);
    write_latency_csv((fs::path(opts.out_dir) / "latency.csv").string(), stats);

    json extra;
    extra["trials"] = opts.trials;
    extra["warmup"] = opts.warmup;
    extra["tau_e_median_ms"] = stats.median;
    extra["tau_fpn_ms"] = "n/a";
    extra["tau_d_ms"] = "n/a";
    extra["fps"] = stats.fps;
    write_resolved_config((fs::path(opts.out_dir) / "config_resolved.json").string(), "bench", cfg, extra);
    std::cout << "bench: encoder median " << format_double(stats.median) << " ms over " << opts.trials
              << " trials (fpn/decoder stages not applicable)\n";
    return kExitOk;
}

int cmd_metrics(const MetricsOptions& opts) {
    ensure_out_dir(opts.out_dir);
    MetricsTable table = read_metrics_csv(opts.input);
    MetricsResult result = compute_metrics(table);
    write_metrics_csv((fs::path(opts.out_dir) / "metrics.csv").string(), result);

    json j;
    j["command"] = "metrics";
    j["input"] = opts.input;
    j["rows"] = result.names.size();
    std::ofstream out((fs::path(opts.out_dir) / "config_resolved.json").string(), std::ios::trunc);
    out << j.dump(2) << "\n";
    std::cout << "metrics: wrote metrics.csv (" << result.names.size() << " rows)\n";
    return kExitOk;
}

}  // namespace tsvit
