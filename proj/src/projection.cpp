#include "tsvit/projection.hpp"

#include <cmath>

#include "tsvit/errors.hpp"

namespace tsvit {

ProjectionWeights ProjectionWeights::zeros(int64_t dim) {
    const int64_t d_o = projection_hidden_dim(dim);
    ProjectionWeights w;
    w.w1 = Tensor({d_o, dim});
    w.w2 = Tensor({d_o, dim});
    w.w3 = Tensor({dim, d_o});
    w.gamma = Tensor::full({d_o}, 1.0);
    w.beta = Tensor({d_o});
    return w;
}

ProjectionWeights ProjectionWeights::random(int64_t dim, Rng& rng, double out_scale) {
    ProjectionWeights w = zeros(dim);
    const int64_t d_o = w.hidden();
    const double s_in = 1.0 / std::sqrt(static_cast<double>(dim));
    const double s_out = 1.0 / std::sqrt(static_cast<double>(d_o));
    w.w1 = Tensor::random_normal({d_o, dim}, rng, s_in);
    w.w2 = Tensor::random_normal({d_o, dim}, rng, s_in);
    w.w3 = Tensor::random_normal({dim, d_o}, rng, s_out * out_scale);
    return w;
}

Tensor output_projection(const Tensor& h, const ProjectionWeights& w, double eps, ProjectionCache* cache) {
    if (h.ndim() != 2 || h.extent(0) != w.dim())
        throw DimensionError("output_projection input " + h.shape_string());
    Tensor u1 = matmul(w.w1, h);
    Tensor u2 = matmul(w.w2, h);
    Tensor gated = hadamard(gelu(u1), u2);
    LayerNormCache norm_cache;
    Tensor normed = layer_norm(gated, w.gamma, w.beta, eps, &norm_cache);
    Tensor p = matmul(w.w3, normed);
    if (cache) {
        cache->input = h;
        cache->u1 = std::move(u1);
        cache->u2 = std::move(u2);
        cache->gated = std::move(gated);
        cache->norm = std::move(norm_cache);
    }
    return p;
}

ProjectionGrads output_projection_backward(const ProjectionWeights& w, const ProjectionCache& cache,
                                           const Tensor& d_out) {
    // P = W3 * normed
    Tensor normed({w.hidden(), cache.input.extent(1)});
    for (int64_t c = 0; c < normed.extent(0); ++c)
        for (int64_t j = 0; j < normed.extent(1); ++j)
            normed.at(c, j) = w.gamma.at(c) * cache.norm.xhat.at(c, j) + w.beta.at(c);

    ProjectionGrads g;
    g.d_w3 = matmul_nt(d_out, normed);
    Tensor d_normed = matmul_tn(w.w3, d_out);

    LayerNormGrads ln = layer_norm_backward(cache.norm, w.gamma, d_normed);
    g.d_gamma = std::move(ln.dgamma);
    g.d_beta = std::move(ln.dbeta);

    // gated = gelu(u1) .* u2
    Tensor d_u1 = hadamard(gelu_grad(cache.u1, ln.dx), cache.u2);
    Tensor d_u2 = hadamard(gelu(cache.u1), ln.dx);

    g.d_w1 = matmul_nt(d_u1, cache.input);
    g.d_w2 = matmul_nt(d_u2, cache.input);
    g.d_input = add(matmul_tn(w.w1, d_u1), matmul_tn(w.w2, d_u2));
    return g;
}

int64_t projection_param_count(int64_t dim) { return 3 * dim * projection_hidden_dim(dim); }

long long projection_flops(int64_t dim, int64_t tokens) {
    return 2LL * 3 * dim * projection_hidden_dim(dim) * tokens;
}

}  // namespace tsvit
