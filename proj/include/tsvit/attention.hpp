#pragma once

#include <cstdint>
#include <vector>

#include "tsvit/tensor.hpp"

namespace tsvit {

// Window-based multi-head self attention. Weights hold the per-head Q/K/V
// projections packed as column blocks of d x d matrices plus the
// post-concatenation d x d output matrix, so the parameter count is
// exactly 4 d^2.
struct WmhsaWeights {
    Tensor w_q;    // [d x d], head a occupies columns [a*d_a, (a+1)*d_a)
    Tensor w_k;    // [d x d]
    Tensor w_v;    // [d x d]
    Tensor w_out;  // [d x d]
    int64_t heads = 1;

    int64_t dim() const { return w_q.extent(0); }
    int64_t head_dim() const;  // d_a = d / A; throws if d % A != 0

    static WmhsaWeights zeros(int64_t dim, int64_t heads);
    static WmhsaWeights random(int64_t dim, int64_t heads, Rng& rng, double out_scale = 1.0);
};

struct WmhsaWindowCache {
    Tensor x;       // [I x d] tokens-as-rows view of the window input
    Tensor q, k, v; // [A x I x d_a]
    Tensor probs;   // [A x I x I] attention rows (each sums to 1)
    Tensor concat;  // [I x d] concatenated head outputs before w_out
};

struct WmhsaCache {
    std::vector<WmhsaWindowCache> windows;
};

struct WmhsaGrads {
    Tensor d_input;  // [d x E x I]
    Tensor d_w_q, d_w_k, d_w_v, d_w_out;
};

// H = M + reshape(concat_heads(SM(Q W_q (K W_k)^T / sqrt(d_a)) V W_v) W_out),
// computed independently per window. The residual add is part of this op.
Tensor wmhsa_forward(const Tensor& m, const WmhsaWeights& w, WmhsaCache* cache = nullptr);

WmhsaGrads wmhsa_backward(const Tensor& m, const WmhsaWeights& w, const WmhsaCache& cache, const Tensor& d_out);

int64_t wmhsa_param_count(int64_t dim);

// FLOPs for E windows of I tokens under the declared convention
// (matmul = 2 MAC, softmax = 5 flops/element).
long long wmhsa_flops(int64_t dim, int64_t heads, int64_t windows, int64_t tokens_per_window);

}  // namespace tsvit
