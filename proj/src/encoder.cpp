#include "tsvit/encoder.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "tsvit/errors.hpp"
#include "tsvit/kernels.hpp"

namespace tsvit {

const char* to_string(EncoderMode mode) {
    switch (mode) {
        case EncoderMode::dense: return "dense";
        case EncoderMode::baseline: return "baseline";
        case EncoderMode::dynamic: return "dynamic";
    }
    return "unknown";
}

EncoderConfig EncoderConfig::preset(const std::string& name) {
    EncoderConfig cfg;
    if (name == "desk") {
        cfg.layers = 4;
        cfg.dim = 64;
        cfg.heads = 4;
        cfg.window = 4;
        cfg.patch = 8;
        cfg.hidden_tc = 8;
        cfg.image_h = 64;
        cfg.image_w = 128;
        cfg.views = 2;
    } else if (name == "samb") {
        cfg.layers = 12;
        cfg.dim = 768;
        cfg.heads = 12;
        cfg.window = 14;
        cfg.patch = 16;
        cfg.hidden_tc = 32;
        cfg.image_h = 320;
        cfg.image_w = 800;
        cfg.views = 6;
    } else if (name == "eva02l") {
        cfg.layers = 24;
        cfg.dim = 1024;
        cfg.heads = 16;
        cfg.window = 16;
        cfg.patch = 16;
        cfg.hidden_tc = 32;
        cfg.image_h = 320;
        cfg.image_w = 800;
        cfg.views = 6;
    } else {
        throw ConfigurationError("unknown preset '" + name + "'");
    }
    return cfg;
}

void EncoderConfig::validate() const {
    if (layers < 0) throw ConfigurationError("negative layer count");
    if (dim < 1 || heads < 1 || dim % heads != 0) throw ConfigurationError("dim must be divisible by heads");
    if (patch < 1 || image_h % patch != 0 || image_w % patch != 0)
        throw ConfigurationError("image size must be divisible by the patch size");
    if (window < 1) throw ConfigurationError("window size must be positive");
    if (hidden_tc < 1) throw ConfigurationError("compensator hidden dim must be positive");
    if (views < 1) throw ConfigurationError("view count must be positive");
    if (!(theta > 0.0 && theta < 1.0)) throw ConfigurationError("theta must lie in (0, 1)");
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigurationError("rate must lie in [0, 1]");
    if (mode == EncoderMode::baseline) {
        if (baseline_ratios.empty()) throw ConfigurationError("baseline mode needs at least one ratio");
        for (double r : baseline_ratios)
            if (!(r > 0.0 && r <= 1.0)) throw ConfigurationError("baseline ratios must lie in (0, 1]");
    }
}

int64_t EncoderConfig::proj_hidden() const { return projection_hidden_dim(dim); }

WindowGrid EncoderConfig::grid() const { return WindowGrid::make(dim, tokens_h(), tokens_w(), window); }

std::string EncoderConfig::digest_string() const {
    char buf[512];
    std::string ratios;
    for (size_t i = 0; i < baseline_ratios.size(); ++i) {
        if (i) ratios += ",";
        char rb[32];
        std::snprintf(rb, sizeof rb, "%.17g", baseline_ratios[i]);
        ratios += rb;
    }
    std::snprintf(buf, sizeof buf,
                  "mode=%s;L=%" PRId64 ";d=%" PRId64 ";A=%" PRId64 ";f=%" PRId64 ";k=%" PRId64 ";dh=%" PRId64
                  ";H=%" PRId64 ";W=%" PRId64 ";V=%" PRId64 ";ratios=%s;rate=%.17g;theta=%.17g;temp=%.17g;dres=%d;"
                  "eps=%.17g;seed=%llu",
                  to_string(mode), layers, dim, heads, window, patch, hidden_tc, image_h, image_w, views,
                  ratios.c_str(), rate, theta, gumbel_temperature, double_residual ? 1 : 0, eps,
                  static_cast<unsigned long long>(seed));
    return buf;
}

uint64_t EncoderConfig::digest() const {
    const std::string s = digest_string();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

EncoderWeights init_encoder_weights(const EncoderConfig& cfg) {
    cfg.validate();
    Rng rng(Rng::mix(cfg.seed, 0x5eed));
    EncoderWeights w;
    const int64_t patch_in = 3 * cfg.patch * cfg.patch;
    w.patch_w = Tensor::random_normal({cfg.dim, patch_in}, rng, 1.0 / std::sqrt(static_cast<double>(patch_in)));
    w.patch_b = Tensor({cfg.dim});

    // Residual branches start at 1/sqrt(2L) output scale so the stream
    // keeps the patch-embedding magnitude, as in trained encoders.
    const double branch_scale = 1.0 / std::sqrt(2.0 * std::max<double>(1.0, static_cast<double>(cfg.layers)));
    w.layers.resize(static_cast<size_t>(cfg.layers));
    for (auto& layer : w.layers) {
        layer.pre_attn_norm = NormWeights::identity(cfg.dim);
        layer.attn = WmhsaWeights::random(cfg.dim, cfg.heads, rng, branch_scale);
        layer.pre_proj_norm = NormWeights::identity(cfg.dim);
        layer.proj = ProjectionWeights::random(cfg.dim, rng, branch_scale);
        if (cfg.mode == EncoderMode::dynamic) {
            // Gates start open (sigmoid(2) ~ 0.88) and the compensator is
            // the exact identity, so training begins near dense behavior.
            layer.selector = SelectorWeights::init(cfg.dim, rng, 2.0);
            layer.tc = CompensatorWeights::init(cfg.dim, cfg.hidden_tc, rng);
        }
    }
    if (cfg.mode == EncoderMode::baseline) w.scorer = ScorerWeights::random(cfg.dim, rng);
    return w;
}

namespace {

std::string layer_prefix(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "layers.%02" PRId64 ".", i);
    return buf;
}

template <typename W, typename Fn>
void visit_weights_impl(W& w, const Fn& fn) {
    fn("patch_embed.w", w.patch_w);
    fn("patch_embed.b", w.patch_b);
    for (size_t i = 0; i < w.layers.size(); ++i) {
        auto& layer = w.layers[i];
        const std::string p = layer_prefix(static_cast<int64_t>(i));
        fn(p + "norm1.gamma", layer.pre_attn_norm.gamma);
        fn(p + "norm1.beta", layer.pre_attn_norm.beta);
        fn(p + "attn.w_q", layer.attn.w_q);
        fn(p + "attn.w_k", layer.attn.w_k);
        fn(p + "attn.w_v", layer.attn.w_v);
        fn(p + "attn.w_out", layer.attn.w_out);
        fn(p + "norm2.gamma", layer.pre_proj_norm.gamma);
        fn(p + "norm2.beta", layer.pre_proj_norm.beta);
        fn(p + "proj.w1", layer.proj.w1);
        fn(p + "proj.w2", layer.proj.w2);
        fn(p + "proj.w3", layer.proj.w3);
        fn(p + "proj.norm.gamma", layer.proj.gamma);
        fn(p + "proj.norm.beta", layer.proj.beta);
        if (layer.selector.w.size() > 0) {
            fn(p + "selector.w", layer.selector.w);
            fn(p + "selector.b", layer.selector.b);
        }
        if (layer.tc.w_down.size() > 0) {
            fn(p + "tc.w_down", layer.tc.w_down);
            fn(p + "tc.b_down", layer.tc.b_down);
            fn(p + "tc.w_up", layer.tc.w_up);
            fn(p + "tc.norm.gamma", layer.tc.norm.gamma);
            fn(p + "tc.norm.beta", layer.tc.norm.beta);
        }
    }
    if (w.scorer.queries.size() > 0) {
        fn("scorer.q_mot", w.scorer.queries);
        fn("scorer.w_proj", w.scorer.projection);
    }
}

}  // namespace

void visit_weights(EncoderWeights& w, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_weights_impl(w, fn);
}

void visit_weights(const EncoderWeights& w, const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_weights_impl(w, fn);
}

bool is_trainable_param(const std::string& name) {
    return name.find(".selector.") != std::string::npos || name.find(".tc.") != std::string::npos;
}

Tensor patch_embed(const Tensor& image, const EncoderConfig& cfg, const EncoderWeights& w) {
    if (image.ndim() != 3 || image.extent(0) != 3 || image.extent(1) != cfg.image_h || image.extent(2) != cfg.image_w)
        throw DimensionError("patch_embed image " + image.shape_string());
    const int64_t k = cfg.patch, hp = cfg.tokens_h(), wp = cfg.tokens_w();
    const int64_t patch_in = 3 * k * k;
    Tensor flat({patch_in, hp * wp});
    for (int64_t py = 0; py < hp; ++py)
        for (int64_t px = 0; px < wp; ++px) {
            const int64_t j = py * wp + px;
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t dy = 0; dy < k; ++dy)
                    for (int64_t dx = 0; dx < k; ++dx)
                        flat.at((c * k + dy) * k + dx, j) = image.at(c, py * k + dy, px * k + dx);
        }
    Tensor out = matmul(w.patch_w, flat);
    for (int64_t c = 0; c < out.extent(0); ++c)
        for (int64_t j = 0; j < out.extent(1); ++j) out.at(c, j) += w.patch_b.at(c);
    return out;
}

namespace {

// Dense layer: the dynamic layer with all tokens routed and no
// compensation, which is exactly the frozen pretrained module.
Tensor dense_layer_forward(const Tensor& f_in, const DynamicLayerWeights& lw, const WindowGrid& grid, double eps) {
    Tensor ln1 = layer_norm(f_in, lw.pre_attn_norm.gamma, lw.pre_attn_norm.beta, eps);
    Tensor attn_out = wmhsa_forward(window_partition(ln1, grid), lw.attn);
    Tensor m_hat = add(f_in, window_unpartition(attn_out, grid));
    Tensor normed = layer_norm(m_hat, lw.pre_proj_norm.gamma, lw.pre_proj_norm.beta, eps);
    Tensor p = output_projection(normed, lw.proj, eps);
    return add(p, m_hat);
}

}  // namespace

EncoderForwardResult encoder_forward(const Tensor& image, const EncoderConfig& cfg, const EncoderWeights& w,
                                     RouterMode router_mode, uint64_t noise_seed,
                                     std::vector<DynamicLayerCache>* caches) {
    cfg.validate();
    if (static_cast<int64_t>(w.layers.size()) != cfg.layers) throw ConfigurationError("layer count mismatch");
    const WindowGrid grid = cfg.grid();

    EncoderForwardResult result;
    result.z = patch_embed(image, cfg, w);
    if (caches) caches->assign(w.layers.size(), DynamicLayerCache{});

    SelectionRatioSchedule schedule{cfg.baseline_ratios};
    for (int64_t i = 0; i < cfg.layers; ++i) {
        const auto& layer = w.layers[static_cast<size_t>(i)];
        switch (cfg.mode) {
            case EncoderMode::dense: {
                result.z = dense_layer_forward(result.z, layer, grid, cfg.eps);
                result.activated.push_back(grid.tokens());
                break;
            }
            case EncoderMode::baseline: {
                const double ratio = schedule.ratio_for_layer(i, cfg.layers);
                BaselineLayerWeights blw{layer.pre_attn_norm, layer.attn, layer.pre_proj_norm, layer.proj};
                result.z = baseline_layer_forward(result.z, blw, w.scorer, grid, ratio, cfg.eps);
                result.activated.push_back(baseline_selected_count(grid, ratio).selected_total);
                break;
            }
            case EncoderMode::dynamic: {
                RouterConfig rc;
                rc.theta = cfg.theta;
                rc.gumbel_temperature = cfg.gumbel_temperature;
                rc.mode = router_mode;
                DynamicLayerCache* cache = caches ? &(*caches)[static_cast<size_t>(i)] : nullptr;
                DynamicLayerResult lr = dynamic_layer_forward(result.z, layer, grid, rc, cfg.eps,
                                                              Rng::mix(noise_seed, static_cast<uint64_t>(i)),
                                                              cfg.double_residual, cache);
                result.z = std::move(lr.output);
                result.activated.push_back(router_mode == RouterMode::inference ? lr.mask.selected_count()
                                                                                : grid.tokens());
                result.masks.push_back(std::move(lr.mask));
                break;
            }
        }
    }
    return result;
}

EncoderLayerGradients encoder_backward(const EncoderConfig& cfg, const EncoderWeights& w,
                                       const std::vector<DynamicLayerCache>& caches, const Tensor& d_z_out,
                                       const std::vector<Tensor>* d_z_extra, bool frozen_grads) {
    if (cfg.mode != EncoderMode::dynamic) throw ModeError("encoder_backward requires dynamic mode");
    if (caches.size() != w.layers.size()) throw DimensionError("encoder_backward cache count mismatch");
    const WindowGrid grid = cfg.grid();
    RouterConfig rc;
    rc.theta = cfg.theta;
    rc.gumbel_temperature = cfg.gumbel_temperature;
    rc.mode = RouterMode::finetune;

    EncoderLayerGradients grads;
    grads.layers.resize(w.layers.size());
    if (grads.layers.empty()) return grads;
    Tensor d_f = d_z_out;
    for (int64_t i = cfg.layers - 1; i >= 0; --i) {
        const Tensor* dz = d_z_extra ? &(*d_z_extra)[static_cast<size_t>(i)] : nullptr;
        grads.layers[static_cast<size_t>(i)] =
            dynamic_layer_backward(w.layers[static_cast<size_t>(i)], grid, rc,
                                   caches[static_cast<size_t>(i)], d_f, dz, cfg.double_residual, frozen_grads);
        d_f = std::move(grads.layers[static_cast<size_t>(i)].d_input);
        grads.layers[static_cast<size_t>(i)].d_input = Tensor();
    }
    // Keep the gradient w.r.t. the patch embedding output available.
    grads.layers.front().d_input = std::move(d_f);
    return grads;
}

int64_t ParamPartition::trainable_count() const {
    int64_t n = 0;
    for (const auto& e : entries)
        if (e.trainable) n += e.count;
    return n;
}

int64_t ParamPartition::frozen_count() const {
    int64_t n = 0;
    for (const auto& e : entries)
        if (!e.trainable) n += e.count;
    return n;
}

int64_t ParamPartition::total_count() const { return trainable_count() + frozen_count(); }

ParamPartition enumerate_params(const EncoderConfig& cfg) {
    cfg.validate();
    ParamPartition part;
    const int64_t d = cfg.dim, d_o = cfg.proj_hidden(), d_h = cfg.hidden_tc;
    auto push = [&part](const std::string& name, std::vector<int64_t> shape) {
        ParamInfo info;
        info.name = name;
        info.count = Tensor::compute_size(shape);
        info.shape = std::move(shape);
        info.trainable = is_trainable_param(name);
        part.entries.push_back(std::move(info));
    };
    push("patch_embed.w", {d, 3 * cfg.patch * cfg.patch});
    push("patch_embed.b", {d});
    for (int64_t i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        push(p + "norm1.gamma", {d});
        push(p + "norm1.beta", {d});
        push(p + "attn.w_q", {d, d});
        push(p + "attn.w_k", {d, d});
        push(p + "attn.w_v", {d, d});
        push(p + "attn.w_out", {d, d});
        push(p + "norm2.gamma", {d});
        push(p + "norm2.beta", {d});
        push(p + "proj.w1", {d_o, d});
        push(p + "proj.w2", {d_o, d});
        push(p + "proj.w3", {d, d_o});
        push(p + "proj.norm.gamma", {d_o});
        push(p + "proj.norm.beta", {d_o});
        if (cfg.mode == EncoderMode::dynamic) {
            push(p + "selector.w", {1, d});
            push(p + "selector.b", {1});
            push(p + "tc.w_down", {d_h, d});
            push(p + "tc.b_down", {d_h});
            push(p + "tc.w_up", {d, d_h});
            push(p + "tc.norm.gamma", {d});
            push(p + "tc.norm.beta", {d});
        }
    }
    if (cfg.mode == EncoderMode::baseline) {
        push("scorer.q_mot", {kMotionQueryCount, kMotionQueryDim});
        push("scorer.w_proj", {kMotionQueryDim, d});
    }
    return part;
}

ParamPartition peft_partition(const EncoderConfig& cfg) {
    if (cfg.mode != EncoderMode::dynamic) throw PartitionError("PEFT partition requires dynamic mode");
    return enumerate_params(cfg);
}

EncoderWeights plug_and_play_restore(const EncoderWeights& w) {
    EncoderWeights dense = w;
    for (auto& layer : dense.layers) {
        layer.selector = SelectorWeights{};
        layer.tc = CompensatorWeights{};
    }
    dense.scorer = ScorerWeights{};
    return dense;
}

EncoderConfig restore_config(const EncoderConfig& cfg) {
    EncoderConfig dense = cfg;
    dense.mode = EncoderMode::dense;
    return dense;
}

namespace {

constexpr char kMagic[6] = {'T', 'S', 'V', 'I', 'T', '1'};
constexpr uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const std::string& path, const EncoderConfig& cfg, const EncoderWeights& w) {
    std::vector<std::pair<std::string, const Tensor*>> arrays;
    visit_weights(w, [&arrays](const std::string& name, const Tensor& t) { arrays.emplace_back(name, &t); });
    std::sort(arrays.begin(), arrays.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof kMagic);
    write_pod(out, kFormatVersion);
    const uint64_t digest = cfg.digest();
    write_pod(out, digest);
    write_pod(out, static_cast<uint32_t>(arrays.size()));
    for (const auto& [name, tensor] : arrays) {
        write_pod(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<uint32_t>(tensor->ndim()));
        for (int64_t e : tensor->shape()) write_pod(out, e);
        out.write(reinterpret_cast<const char*>(tensor->data()),
                  static_cast<std::streamsize>(tensor->size() * 8));
    }
    if (!out) throw IoError("checkpoint write failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[6];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("bad checkpoint magic");
    uint32_t version = 0;
    read_pod(in, version);
    if (version != kFormatVersion) throw IoError("unsupported checkpoint version");
    CheckpointData data;
    read_pod(in, data.config_digest);
    uint32_t count = 0;
    read_pod(in, count);
    data.arrays.reserve(count);
    for (uint32_t a = 0; a < count; ++a) {
        uint32_t name_len = 0;
        read_pod(in, name_len);
        if (name_len > 4096) throw IoError("checkpoint name too long");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t ndim = 0;
        read_pod(in, ndim);
        if (ndim > 8) throw IoError("checkpoint rank too large");
        std::vector<int64_t> shape(ndim);
        for (auto& e : shape) read_pod(in, e);
        const int64_t n = Tensor::compute_size(shape);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(n * 8));
        if (!in) throw IoError("checkpoint truncated in array " + name);
        data.arrays.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

void load_checkpoint(const std::string& path, const EncoderConfig& cfg, EncoderWeights& w) {
    CheckpointData data = read_checkpoint(path);
    if (data.config_digest != cfg.digest()) throw IoError("checkpoint config digest mismatch");
    size_t used = 0;
    visit_weights(w, [&](const std::string& name, Tensor& t) {
        auto it = std::lower_bound(data.arrays.begin(), data.arrays.end(), name,
                                   [](const auto& a, const std::string& b) { return a.first < b; });
        if (it == data.arrays.end() || it->first != name) throw IoError("checkpoint missing array " + name);
        if (it->second.shape() != t.shape()) throw IoError("checkpoint shape mismatch for " + name);
        t = it->second;
        ++used;
    });
    if (used != data.arrays.size()) throw IoError("checkpoint holds unexpected extra arrays");
}

}  // namespace tsvit
