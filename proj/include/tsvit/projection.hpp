#pragma once

#include <cstdint>

#include "tsvit/kernels.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

// d_o = floor(2.66 d), computed in exact integer arithmetic.
inline int64_t projection_hidden_dim(int64_t dim) { return (266 * dim) / 100; }

// Gated two-branch projection: P = W3 * LN(GeLU(W1 h) .* (W2 h)). The
// residual add onto the block input is the caller's job.
struct ProjectionWeights {
    Tensor w1;  // [d_o x d]
    Tensor w2;  // [d_o x d]
    Tensor w3;  // [d x d_o]
    Tensor gamma, beta;  // internal norm affine over d_o

    int64_t dim() const { return w3.extent(0); }
    int64_t hidden() const { return w1.extent(0); }

    static ProjectionWeights zeros(int64_t dim);
    static ProjectionWeights random(int64_t dim, Rng& rng, double out_scale = 1.0);
};

struct ProjectionCache {
    Tensor input;    // h [d x G]
    Tensor u1, u2;   // branch pre-activations [d_o x G]
    Tensor gated;    // GeLU(u1) .* u2
    LayerNormCache norm;
};

struct ProjectionGrads {
    Tensor d_input;
    Tensor d_w1, d_w2, d_w3;
    Tensor d_gamma, d_beta;
};

Tensor output_projection(const Tensor& h, const ProjectionWeights& w, double eps, ProjectionCache* cache = nullptr);

ProjectionGrads output_projection_backward(const ProjectionWeights& w, const ProjectionCache& cache,
                                           const Tensor& d_out);

// 3 d d_o; the internal norm affine (2 d_o) is reported separately by the
// complexity counter.
int64_t projection_param_count(int64_t dim);

// Three FC matmuls at 2 MAC per flop; linear in the token count G.
long long projection_flops(int64_t dim, int64_t tokens);

}  // namespace tsvit
