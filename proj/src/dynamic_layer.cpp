#include "tsvit/dynamic_layer.hpp"

#include <cmath>

#include "tsvit/errors.hpp"
#include "tsvit/rng.hpp"

namespace tsvit {

SelectorWeights SelectorWeights::zeros(int64_t dim) {
    SelectorWeights s;
    s.w = Tensor({1, dim});
    s.b = Tensor({1});
    return s;
}

SelectorWeights SelectorWeights::init(int64_t dim, Rng& rng, double bias) {
    SelectorWeights s;
    s.w = Tensor::random_normal({1, dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    s.b = Tensor::full({1}, bias);
    return s;
}

CompensatorWeights CompensatorWeights::init(int64_t dim, int64_t hidden, Rng& rng) {
    CompensatorWeights c;
    c.w_down = Tensor::random_normal({hidden, dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    c.b_down = Tensor({hidden});
    c.w_up = Tensor({dim, hidden});  // zero: identity compensator at init
    c.norm = NormWeights::identity(dim);
    return c;
}

void RouterConfig::validate() const {
    if (!(theta > 0.0 && theta < 1.0)) throw ParameterError("router threshold must lie in (0, 1)");
    if (!(gumbel_temperature > 0.0)) throw ParameterError("gumbel temperature must be positive");
}

Tensor saliency_scores(const Tensor& m_hat, const SelectorWeights& w) {
    if (m_hat.ndim() != 2 || m_hat.extent(0) != w.w.extent(1))
        throw DimensionError("saliency_scores input " + m_hat.shape_string());
    Tensor s = matmul(w.w, m_hat);
    for (double& v : s.values()) v += w.b.at(0);
    return s;
}

Tensor gumbel_sigmoid_from_noise(const Tensor& s, const Tensor& g1, const Tensor& g2, double temperature) {
    if (!s.same_shape(g1) || !s.same_shape(g2)) throw DimensionError("gumbel noise shape mismatch");
    Tensor z = s;
    for (int64_t i = 0; i < z.size(); ++i)
        z.at(i) = sigmoid_scalar((s.at(i) + g1.at(i) - g2.at(i)) / temperature);
    return z;
}

Tensor gumbel_sigmoid(const Tensor& s, const RouterConfig& cfg, uint64_t seed, Tensor* noise_out) {
    cfg.validate();
    if (cfg.mode != RouterMode::finetune)
        throw ModeError("gumbel_sigmoid is a fine-tuning-only operation");
    Rng rng(Rng::mix(seed, 0xf00d));
    Tensor g1(s.shape());
    Tensor g2(s.shape());
    for (int64_t i = 0; i < s.size(); ++i) {
        g1.at(i) = rng.gumbel();
        g2.at(i) = rng.gumbel();
    }
    if (noise_out) {
        *noise_out = Tensor(s.shape());
        for (int64_t i = 0; i < s.size(); ++i) noise_out->at(i) = g1.at(i) - g2.at(i);
    }
    return gumbel_sigmoid_from_noise(s, g1, g2, cfg.gumbel_temperature);
}

Tensor router_apply_gates(const Tensor& m_hat, const Tensor& z, const NormWeights& norm,
                          const ProjectionWeights& proj, double eps, RouterDenseCache* cache) {
    if (z.ndim() != 2 || z.extent(0) != 1 || z.extent(1) != m_hat.extent(1))
        throw DimensionError("router gates shape mismatch");
    LayerNormCache norm_cache;
    Tensor normed = layer_norm(m_hat, norm.gamma, norm.beta, eps, &norm_cache);
    ProjectionCache proj_cache;
    Tensor p = output_projection(normed, proj, eps, &proj_cache);
    Tensor out = m_hat;
    for (int64_t c = 0; c < out.extent(0); ++c)
        for (int64_t j = 0; j < out.extent(1); ++j) out.at(c, j) += z.at(0, j) * p.at(c, j);
    if (cache) {
        cache->norm = std::move(norm_cache);
        cache->proj = std::move(proj_cache);
        cache->p = std::move(p);
    }
    return out;
}

Tensor router_finetune(const Tensor& m_hat, const Tensor& s, const NormWeights& norm,
                       const ProjectionWeights& proj, const RouterConfig& cfg, double eps, uint64_t seed) {
    Tensor z = gumbel_sigmoid(s, cfg, seed);
    return router_apply_gates(m_hat, z, norm, proj, eps);
}

RouterInferResult router_infer(const Tensor& m_hat, const Tensor& s, const NormWeights& norm,
                               const ProjectionWeights& proj, const RouterConfig& cfg, double eps) {
    cfg.validate();
    if (cfg.mode != RouterMode::inference) throw ModeError("router_infer requires inference mode");
    const int64_t n = m_hat.extent(1);
    if (s.ndim() != 2 || s.extent(0) != 1 || s.extent(1) != n) throw DimensionError("router_infer score shape");

    Tensor z = sigmoid(s);
    std::vector<uint8_t> binary(static_cast<size_t>(n), 0);
    for (int64_t j = 0; j < n; ++j) binary[static_cast<size_t>(j)] = z.at(0, j) > cfg.theta ? 1 : 0;
    TokenMask mask = TokenMask::from_binary(binary, z.values());

    RouterInferResult result;
    result.output = m_hat;
    if (mask.selected_count() > 0) {
        Tensor gathered = gather_selected(m_hat, mask);
        Tensor normed = layer_norm(gathered, norm.gamma, norm.beta, eps);
        Tensor p = output_projection(normed, proj, eps);
        Tensor restored = reverse_index(p, mask);
        result.output = add(m_hat, restored);
    }
    result.mask = std::move(mask);
    return result;
}

Tensor token_compensator(const Tensor& m_hat, const CompensatorWeights& w, double eps, CompensatorCache* cache) {
    if (m_hat.ndim() != 2 || m_hat.extent(0) != w.dim())
        throw DimensionError("token_compensator input " + m_hat.shape_string());
    LayerNormCache norm_cache;
    Tensor f = layer_norm(m_hat, w.norm.gamma, w.norm.beta, eps, &norm_cache);
    Tensor pre = matmul(w.w_down, f);
    for (int64_t h = 0; h < pre.extent(0); ++h)
        for (int64_t j = 0; j < pre.extent(1); ++j) pre.at(h, j) += w.b_down.at(h);
    Tensor hidden = relu(pre);
    Tensor f_prime = matmul(w.w_up, hidden);
    Tensor c = add(f_prime, m_hat);
    if (cache) {
        cache->norm = std::move(norm_cache);
        cache->f = std::move(f);
        cache->pre = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return c;
}

DynamicLayerResult dynamic_layer_forward(const Tensor& f_in, const DynamicLayerWeights& w, const WindowGrid& grid,
                                         const RouterConfig& cfg, double eps, uint64_t seed,
                                         bool double_residual, DynamicLayerCache* cache) {
    cfg.validate();
    if (f_in.ndim() != 2 || f_in.extent(0) != grid.channels || f_in.extent(1) != grid.tokens())
        throw DimensionError("dynamic layer input " + f_in.shape_string() + " does not match grid");

    LayerNormCache ln1_cache;
    Tensor ln1_out = layer_norm(f_in, w.pre_attn_norm.gamma, w.pre_attn_norm.beta, eps, &ln1_cache);
    Tensor partitioned = window_partition(ln1_out, grid);
    WmhsaCache attn_cache;
    Tensor attn_out = wmhsa_forward(partitioned, w.attn, cache ? &attn_cache : nullptr);
    Tensor m_hat = add(f_in, window_unpartition(attn_out, grid));

    Tensor s = saliency_scores(m_hat, w.selector);

    DynamicLayerResult result;
    Tensor z;
    Tensor noise;
    RouterDenseCache router_cache;
    if (cfg.mode == RouterMode::finetune) {
        z = gumbel_sigmoid(s, cfg, seed, &noise);
        Tensor routed = router_apply_gates(m_hat, z, w.pre_proj_norm, w.proj, eps, cache ? &router_cache : nullptr);
        CompensatorCache tc_cache;
        Tensor compensated = token_compensator(m_hat, w.tc, eps, cache ? &tc_cache : nullptr);
        // routed and compensated each carry one +m_hat; keep a single
        // shared residual unless configured otherwise.
        Tensor out = add(routed, compensated);
        if (!double_residual) out = sub(out, m_hat);
        result.output = std::move(out);
        result.mask = TokenMask::all_on(grid.tokens(), z.values());
        if (cache) {
            cache->tc = std::move(tc_cache);
            cache->router = std::move(router_cache);
        }
    } else {
        RouterInferResult routed = router_infer(m_hat, s, w.pre_proj_norm, w.proj, cfg, eps);
        Tensor compensated = token_compensator(m_hat, w.tc, eps);
        Tensor out = add(routed.output, compensated);
        if (!double_residual) out = sub(out, m_hat);
        result.output = std::move(out);
        result.mask = std::move(routed.mask);
    }

    if (cache) {
        cache->input = f_in;
        cache->ln1 = std::move(ln1_cache);
        cache->ln1_out = std::move(ln1_out);
        cache->partitioned = std::move(partitioned);
        cache->attn = std::move(attn_cache);
        cache->m_hat = std::move(m_hat);
        cache->s = std::move(s);
        cache->noise = std::move(noise);
        cache->z = std::move(z);
    }
    return result;
}

DynamicLayerGrads dynamic_layer_backward(const DynamicLayerWeights& w, const WindowGrid& grid,
                                         const RouterConfig& cfg, const DynamicLayerCache& cache,
                                         const Tensor& d_out, const Tensor* d_z_extra, bool double_residual,
                                         bool frozen_grads) {
    if (cfg.mode != RouterMode::finetune) throw ModeError("dynamic_layer_backward requires fine-tuning mode");
    const int64_t d = grid.channels, n = grid.tokens();
    if (!d_out.same_shape(cache.m_hat)) throw DimensionError("dynamic_layer_backward gradient shape mismatch");

    DynamicLayerGrads g;

    // out = z' .* p + f'(tc) + m_hat (single residual) or + 2 m_hat.
    Tensor d_m_hat = double_residual ? scale(d_out, 2.0) : d_out;

    // Router core: d_p and gate gradient.
    Tensor d_p({d, n});
    Tensor d_z({1, n});
    for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            d_p.at(c, j) = d_out.at(c, j) * cache.z.at(0, j);
            acc += d_out.at(c, j) * cache.router.p.at(c, j);
        }
        d_z.at(0, j) = acc;
    }
    if (d_z_extra) {
        if (!d_z_extra->same_shape(d_z)) throw DimensionError("d_z_extra shape mismatch");
        d_z = add(d_z, *d_z_extra);
    }

    // Z = sigmoid((S + noise)/T)
    Tensor d_s({1, n});
    for (int64_t j = 0; j < n; ++j) {
        const double zj = cache.z.at(0, j);
        d_s.at(0, j) = d_z.at(0, j) * zj * (1.0 - zj) / cfg.gumbel_temperature;
    }

    // S = w_sel m_hat + b_sel
    g.d_sel_w = matmul_nt(d_s, cache.m_hat);  // [1 x d]
    g.d_sel_b = Tensor({1});
    for (int64_t j = 0; j < n; ++j) g.d_sel_b.at(0) += d_s.at(0, j);
    for (int64_t c = 0; c < d; ++c)
        for (int64_t j = 0; j < n; ++j) d_m_hat.at(c, j) += w.selector.w.at(0, c) * d_s.at(0, j);

    // Projection and its preceding norm.
    ProjectionGrads proj_grads = output_projection_backward(w.proj, cache.router.proj, d_p);
    LayerNormGrads ln2 = layer_norm_backward(cache.router.norm, w.pre_proj_norm.gamma, proj_grads.d_input);
    d_m_hat = add(d_m_hat, ln2.dx);
    if (frozen_grads) {
        g.proj = std::move(proj_grads);
        g.proj.d_input = Tensor();  // consumed above
        g.d_ln2_gamma = std::move(ln2.dgamma);
        g.d_ln2_beta = std::move(ln2.dbeta);
    }

    // Token compensator.
    Tensor d_hidden = matmul_tn(w.tc.w_up, d_out);
    g.d_tc_w_up = matmul_nt(d_out, cache.tc.hidden);
    Tensor d_pre = relu_grad(cache.tc.pre, d_hidden);
    g.d_tc_w_down = matmul_nt(d_pre, cache.tc.f);
    g.d_tc_b_down = Tensor({w.tc.hidden()});
    for (int64_t h = 0; h < d_pre.extent(0); ++h)
        for (int64_t j = 0; j < n; ++j) g.d_tc_b_down.at(h) += d_pre.at(h, j);
    Tensor d_f = matmul_tn(w.tc.w_down, d_pre);
    LayerNormGrads tc_ln = layer_norm_backward(cache.tc.norm, w.tc.norm.gamma, d_f);
    d_m_hat = add(d_m_hat, tc_ln.dx);
    g.d_tc_gamma = std::move(tc_ln.dgamma);
    g.d_tc_beta = std::move(tc_ln.dbeta);

    // m_hat = input + unpartition(attn(partition(ln1(input))))
    g.d_input = d_m_hat;
    Tensor d_attn_out = window_partition(d_m_hat, grid);
    WmhsaGrads attn_grads = wmhsa_backward(cache.partitioned, w.attn, cache.attn, d_attn_out);
    Tensor d_ln1_out = window_unpartition(attn_grads.d_input, grid);
    LayerNormGrads ln1 = layer_norm_backward(cache.ln1, w.pre_attn_norm.gamma, d_ln1_out);
    g.d_input = add(g.d_input, ln1.dx);
    if (frozen_grads) {
        attn_grads.d_input = Tensor();
        g.attn = std::move(attn_grads);
        g.d_ln1_gamma = std::move(ln1.dgamma);
        g.d_ln1_beta = std::move(ln1.dbeta);
    }
    return g;
}

}  // namespace tsvit
