#pragma once

#include <cstdint>
#include <optional>

#include "tsvit/attention.hpp"
#include "tsvit/kernels.hpp"
#include "tsvit/projection.hpp"
#include "tsvit/tensor.hpp"
#include "tsvit/windowing.hpp"

namespace tsvit {

// Single FC scoring head producing raw (pre-sigmoid) saliency per token.
struct SelectorWeights {
    Tensor w;  // [1 x d]
    Tensor b;  // [1]

    static SelectorWeights zeros(int64_t dim);
    static SelectorWeights init(int64_t dim, Rng& rng, double bias);
    int64_t param_count() const { return w.size() + b.size(); }
};

// Two-layer bottleneck (d -> d_h -> d) with its own layer norm; the up
// projection starts at zero so the block is initially the identity.
struct CompensatorWeights {
    Tensor w_down;  // [d_h x d]
    Tensor b_down;  // [d_h]
    Tensor w_up;    // [d x d_h]
    NormWeights norm;

    int64_t dim() const { return w_up.extent(0); }
    int64_t hidden() const { return w_down.extent(0); }
    static CompensatorWeights init(int64_t dim, int64_t hidden, Rng& rng);
    int64_t param_count_core() const { return w_down.size() + b_down.size() + w_up.size(); }
};

enum class RouterMode { finetune, inference };

struct RouterConfig {
    double theta = 0.5;
    double gumbel_temperature = 1.0;
    RouterMode mode = RouterMode::inference;

    void validate() const;
};

// The full per-layer weight set of the dynamic token-selection layer.
struct DynamicLayerWeights {
    NormWeights pre_attn_norm;
    WmhsaWeights attn;
    NormWeights pre_proj_norm;
    ProjectionWeights proj;
    SelectorWeights selector;
    CompensatorWeights tc;
};

// Raw scores S = w_sel * m_hat + b_sel, shape [1 x N].
Tensor saliency_scores(const Tensor& m_hat, const SelectorWeights& w);

// Z = sigmoid((S + g1 - g2) / temperature) with g_i ~ Gumbel(0,1) drawn from
// `seed`. Only valid in fine-tuning mode. `noise_out`, when given, receives
// the sampled g1 - g2 per token.
Tensor gumbel_sigmoid(const Tensor& s, const RouterConfig& cfg, uint64_t seed, Tensor* noise_out = nullptr);

// Deterministic core used by the sampler and by tests that pin the noise.
Tensor gumbel_sigmoid_from_noise(const Tensor& s, const Tensor& g1, const Tensor& g2, double temperature);

struct RouterDenseCache {
    LayerNormCache norm;
    ProjectionCache proj;
    Tensor p;  // dense projection output [d x N]
};

// Dense fine-tuning pathway with explicit gates: P' = Z' .* P + m_hat where
// P = proj(LN(m_hat)) over all N tokens and Z' tiles Z across channels.
Tensor router_apply_gates(const Tensor& m_hat, const Tensor& z, const NormWeights& norm,
                          const ProjectionWeights& proj, double eps, RouterDenseCache* cache = nullptr);

// Convenience wrapper deriving Z from S via the Gumbel-noised sigmoid.
Tensor router_finetune(const Tensor& m_hat, const Tensor& s, const NormWeights& norm,
                       const ProjectionWeights& proj, const RouterConfig& cfg, double eps, uint64_t seed);

struct RouterInferResult {
    Tensor output;   // [d x N]
    TokenMask mask;
};

// Hard inference pathway: threshold, gather, project the K-bar selected
// columns only, scatter back, add the residual. K-bar = 0 bypasses the
// projection entirely.
RouterInferResult router_infer(const Tensor& m_hat, const Tensor& s, const NormWeights& norm,
                               const ProjectionWeights& proj, const RouterConfig& cfg, double eps);

struct CompensatorCache {
    LayerNormCache norm;
    Tensor f;        // LN output [d x N]
    Tensor pre;      // w_down f + b_down [d_h x N]
    Tensor hidden;   // relu(pre)
};

// C = w_up relu(w_down LN(m_hat) + b_down) + m_hat.
Tensor token_compensator(const Tensor& m_hat, const CompensatorWeights& w, double eps,
                         CompensatorCache* cache = nullptr);

struct DynamicLayerCache {
    Tensor input;
    LayerNormCache ln1;
    Tensor ln1_out;
    Tensor partitioned;
    WmhsaCache attn;
    Tensor m_hat;
    Tensor s;
    Tensor noise;  // g1 - g2 per token (fine-tune mode)
    Tensor z;
    RouterDenseCache router;
    CompensatorCache tc;
};

struct DynamicLayerResult {
    Tensor output;
    TokenMask mask;
};

// Full layer: window attention over all tokens, saliency scoring, token
// router, token compensator. The router and compensator residuals share a
// single m_hat term unless `double_residual` is set.
DynamicLayerResult dynamic_layer_forward(const Tensor& f_in, const DynamicLayerWeights& w, const WindowGrid& grid,
                                         const RouterConfig& cfg, double eps, uint64_t seed,
                                         bool double_residual = false, DynamicLayerCache* cache = nullptr);

struct DynamicLayerGrads {
    Tensor d_input;
    Tensor d_ln1_gamma, d_ln1_beta;
    WmhsaGrads attn;
    Tensor d_ln2_gamma, d_ln2_beta;
    ProjectionGrads proj;
    Tensor d_sel_w;
    Tensor d_sel_b;
    Tensor d_tc_w_down, d_tc_b_down, d_tc_w_up;
    Tensor d_tc_gamma, d_tc_beta;
};

// Backward through the fine-tuning pathway. `d_z_extra` injects an extra
// gradient on the gates (the activation-rate loss term). When
// `frozen_grads` is false the attention/projection/norm weight gradients
// are skipped (input gradients are still propagated).
DynamicLayerGrads dynamic_layer_backward(const DynamicLayerWeights& w, const WindowGrid& grid,
                                         const RouterConfig& cfg, const DynamicLayerCache& cache,
                                         const Tensor& d_out, const Tensor* d_z_extra, bool double_residual,
                                         bool frozen_grads);

}  // namespace tsvit
