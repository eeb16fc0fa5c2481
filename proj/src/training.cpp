#include "tsvit/training.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "tsvit/errors.hpp"
#include "tsvit/kernels.hpp"

namespace tsvit {

Tensor synthetic_image(const EncoderConfig& cfg, uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x1a6e));
    const int64_t h = cfg.image_h, wdt = cfg.image_w;
    Tensor img({3, h, wdt});
    constexpr int kModes = 6;
    for (int64_t c = 0; c < 3; ++c) {
        double amp[kModes], fy[kModes], fx[kModes], phase[kModes];
        for (int m = 0; m < kModes; ++m) {
            amp[m] = rng.uniform(0.2, 1.0);
            fy[m] = rng.uniform(0.5, 3.0);
            fx[m] = rng.uniform(0.5, 3.0);
            phase[m] = rng.uniform(0.0, 2.0 * M_PI);
        }
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < wdt; ++x) {
                double v = 0.0;
                for (int m = 0; m < kModes; ++m)
                    v += amp[m] * std::sin(2.0 * M_PI * (fy[m] * static_cast<double>(y) / static_cast<double>(h) +
                                                         fx[m] * static_cast<double>(x) / static_cast<double>(wdt)) +
                                           phase[m]);
                img.at(c, y, x) = v + 0.1 * rng.normal();
            }
    }
    return img;
}

std::vector<Tensor> synthetic_pool(const EncoderConfig& cfg, uint64_t seed, int64_t count) {
    std::vector<Tensor> pool;
    pool.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) pool.push_back(synthetic_image(cfg, Rng::mix(seed, static_cast<uint64_t>(i))));
    return pool;
}

namespace {

struct Sgd {
    double lr;
    double momentum;
    std::map<std::string, Tensor> velocity;

    void step(const std::string& name, Tensor& param, const Tensor& grad) {
        auto [it, inserted] = velocity.try_emplace(name, Tensor(grad.shape()));
        Tensor& v = it->second;
        for (int64_t i = 0; i < param.size(); ++i) {
            v.at(i) = momentum * v.at(i) + grad.at(i);
            param.at(i) -= lr * v.at(i);
        }
    }
};

double squared_error_mean(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double diff = a.at(i) - b.at(i);
        acc += diff * diff;
    }
    return acc / static_cast<double>(a.size());
}

}  // namespace

FinetuneLog peft_finetune(const EncoderConfig& cfg, EncoderWeights& weights, const std::vector<Tensor>& pool,
                          const FinetuneOptions& opts) {
    if (cfg.mode != EncoderMode::dynamic) throw ModeError("fine-tuning requires dynamic mode");
    if (pool.empty()) throw ParameterError("fine-tuning needs at least one image");
    cfg.validate();

    const int64_t n = cfg.tokens();
    const int64_t d = cfg.dim;
    const EncoderConfig dense_cfg = restore_config(cfg);
    const EncoderWeights dense_weights = plug_and_play_restore(weights);

    // The teacher is frozen, so its outputs over the fixed pool are
    // precomputed once.
    std::vector<Tensor> teacher;
    teacher.reserve(pool.size());
    for (const auto& img : pool)
        teacher.push_back(encoder_forward(img, dense_cfg, dense_weights, RouterMode::inference, 0).z);

    Sgd sgd{opts.lr, opts.momentum, {}};
    FinetuneLog log;
    const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(opts.warmup_frac * static_cast<double>(opts.steps)));

    for (int64_t step = 0; step < opts.steps; ++step) {
        const size_t sample = static_cast<size_t>(step % static_cast<int64_t>(pool.size()));
        const double lambda = opts.lambda_rate * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));

        std::vector<DynamicLayerCache> caches;
        EncoderForwardResult out = encoder_forward(pool[sample], cfg, weights, RouterMode::finetune,
                                                   Rng::mix(opts.seed, static_cast<uint64_t>(step)), &caches);

        const double distill = squared_error_mean(out.z, teacher[sample]);
        double rate_term = 0.0;
        std::vector<Tensor> d_z_extra(static_cast<size_t>(cfg.layers));
        for (int64_t l = 0; l < cfg.layers; ++l) {
            const Tensor& z = caches[static_cast<size_t>(l)].z;
            double mean = 0.0;
            for (int64_t j = 0; j < n; ++j) mean += z.at(0, j);
            mean /= static_cast<double>(n);
            const double dev = mean - cfg.rate;
            rate_term += dev * dev;
            Tensor dz({1, n});
            const double g = lambda * 2.0 * dev / static_cast<double>(n);
            for (int64_t j = 0; j < n; ++j) dz.at(0, j) = g;
            d_z_extra[static_cast<size_t>(l)] = std::move(dz);
        }
        const double loss = distill + lambda * rate_term;

        TrainStepLog row;
        row.step = step;
        row.loss = loss;
        row.distill = distill;
        row.rate_term = rate_term;
        row.lambda = lambda;
        for (int64_t l = 0; l < cfg.layers; ++l) {
            const Tensor& s = caches[static_cast<size_t>(l)].s;
            double mean = 0.0;
            int64_t hard = 0;
            for (int64_t j = 0; j < n; ++j) {
                const double zj = sigmoid_scalar(s.at(0, j));
                mean += zj;
                if (zj > cfg.theta) ++hard;
            }
            row.layer_mean_act.push_back(mean / static_cast<double>(n));
            row.layer_hard_count.push_back(hard);
        }
        log.rows.push_back(row);

        if (!std::isfinite(loss)) {
            log.aborted = true;
            log.abort_reason = "non-finite loss at step " + std::to_string(step);
            return log;
        }

        // d distill / d z_s
        Tensor d_z(out.z.shape());
        const double scale = 2.0 / static_cast<double>(d * n);
        for (int64_t i = 0; i < d_z.size(); ++i) d_z.at(i) = scale * (out.z.at(i) - teacher[sample].at(i));

        EncoderLayerGradients grads = encoder_backward(cfg, weights, caches, d_z, &d_z_extra, false);

        for (int64_t l = 0; l < cfg.layers; ++l) {
            auto& layer = weights.layers[static_cast<size_t>(l)];
            auto& lg = grads.layers[static_cast<size_t>(l)];
            const std::string p = "layers." + std::to_string(l) + ".";
            sgd.step(p + "selector.w", layer.selector.w, lg.d_sel_w);
            sgd.step(p + "selector.b", layer.selector.b, lg.d_sel_b);
            sgd.step(p + "tc.w_down", layer.tc.w_down, lg.d_tc_w_down);
            sgd.step(p + "tc.b_down", layer.tc.b_down, lg.d_tc_b_down);
            sgd.step(p + "tc.w_up", layer.tc.w_up, lg.d_tc_w_up);
            sgd.step(p + "tc.norm.gamma", layer.tc.norm.gamma, lg.d_tc_gamma);
            sgd.step(p + "tc.norm.beta", layer.tc.norm.beta, lg.d_tc_beta);
        }
    }
    return log;
}

ActivationStats measure_activation(const EncoderConfig& cfg, const EncoderWeights& weights,
                                   const std::vector<Tensor>& images) {
    if (cfg.mode != EncoderMode::dynamic) throw ModeError("activation stats require dynamic mode");
    if (images.empty()) throw ParameterError("activation stats need at least one image");
    const int64_t n = cfg.tokens();
    ActivationStats stats;
    stats.soft_mean.assign(static_cast<size_t>(cfg.layers), 0.0);
    stats.hard_rate.assign(static_cast<size_t>(cfg.layers), 0.0);
    stats.kbar_mean.assign(static_cast<size_t>(cfg.layers), 0.0);

    for (const auto& img : images) {
        EncoderForwardResult out = encoder_forward(img, cfg, weights, RouterMode::inference, 0);
        for (int64_t l = 0; l < cfg.layers; ++l) {
            const TokenMask& mask = out.masks[static_cast<size_t>(l)];
            double soft = 0.0;
            for (double zj : mask.soft) soft += zj;
            stats.soft_mean[static_cast<size_t>(l)] += soft / static_cast<double>(n);
            stats.hard_rate[static_cast<size_t>(l)] +=
                static_cast<double>(mask.selected_count()) / static_cast<double>(n);
            stats.kbar_mean[static_cast<size_t>(l)] += static_cast<double>(mask.selected_count());
        }
    }
    const double inv = 1.0 / static_cast<double>(images.size());
    for (int64_t l = 0; l < cfg.layers; ++l) {
        stats.soft_mean[static_cast<size_t>(l)] *= inv;
        stats.hard_rate[static_cast<size_t>(l)] *= inv;
        stats.kbar_mean[static_cast<size_t>(l)] *= inv;
        stats.overall_soft_mean += stats.soft_mean[static_cast<size_t>(l)];
        stats.overall_hard_rate += stats.hard_rate[static_cast<size_t>(l)];
    }
    stats.overall_soft_mean /= static_cast<double>(cfg.layers);
    stats.overall_hard_rate /= static_cast<double>(cfg.layers);
    return stats;
}

std::string weights_digest(const EncoderWeights& w, bool trainable_only, bool frozen_only) {
    std::vector<std::pair<std::string, const Tensor*>> arrays;
    visit_weights(w, [&](const std::string& name, const Tensor& t) {
        const bool trainable = is_trainable_param(name);
        if (trainable_only && !trainable) return;
        if (frozen_only && trainable) return;
        arrays.emplace_back(name, &t);
    });
    std::sort(arrays.begin(), arrays.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw IoError("cannot create digest context");
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto& [name, tensor] : arrays) {
        EVP_DigestUpdate(ctx, name.data(), name.size());
        EVP_DigestUpdate(ctx, tensor->data(), static_cast<size_t>(tensor->size() * 8));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    EVP_DigestFinal_ex(ctx, md, &md_len);
    EVP_MD_CTX_free(ctx);

    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(md_len * 2);
    for (unsigned int i = 0; i < md_len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

void write_training_log_csv(const std::string& path, const EncoderConfig& cfg, const FinetuneLog& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open training log for writing: " + path);
    out << "step,loss,distill,rate_term,lambda";
    for (int64_t l = 0; l < cfg.layers; ++l) out << ",mean_act_l" << l;
    for (int64_t l = 0; l < cfg.layers; ++l) out << ",kbar_l" << l;
    out << "\n";
    char buf[64];
    for (const auto& row : log.rows) {
        out << row.step;
        for (double v : {row.loss, row.distill, row.rate_term, row.lambda}) {
            std::snprintf(buf, sizeof buf, ",%.9f", v);
            out << buf;
        }
        for (double v : row.layer_mean_act) {
            std::snprintf(buf, sizeof buf, ",%.9f", v);
            out << buf;
        }
        for (int64_t v : row.layer_hard_count) out << "," << v;
        out << "\n";
    }
    if (!out) throw IoError("training log write failed: " + path);
}

}  // namespace tsvit
