#pragma once

#include <cstdint>
#include <vector>

#include "tsvit/attention.hpp"
#include "tsvit/kernels.hpp"
#include "tsvit/projection.hpp"
#include "tsvit/tensor.hpp"
#include "tsvit/windowing.hpp"

namespace tsvit {

inline constexpr int64_t kMotionQueryCount = 64;
inline constexpr int64_t kMotionQueryDim = 256;

// Query-based token scorer: tokens are projected into the query space and
// scored by the best-matching query, sigmoid-squashed into [0, 1].
struct ScorerWeights {
    Tensor queries;     // [64 x 256]
    Tensor projection;  // [256 x d]

    static ScorerWeights random(int64_t dim, Rng& rng);
    int64_t param_count() const { return queries.size() + projection.size(); }
};

// Per-layer-group keep ratios; contiguous equal groups across L layers.
struct SelectionRatioSchedule {
    std::vector<double> ratios;

    double ratio_for_layer(int64_t layer, int64_t layer_count) const;
};

struct BaselineLayerWeights {
    NormWeights pre_attn_norm;  // applied to the selected tokens
    WmhsaWeights attn;
    NormWeights pre_proj_norm;
    ProjectionWeights proj;
};

// Saliency in [0, 1] per token, shape [1 x N].
Tensor token_scorer(const Tensor& f_in, const ScorerWeights& w);

// Fixed-ratio layer: per-window top-K' selection, attention and projection
// over the selected tokens only, merge back, unpartition.
Tensor baseline_layer_forward(const Tensor& f_in, const BaselineLayerWeights& w, const ScorerWeights& scorer,
                              const WindowGrid& grid, double ratio, double eps);

struct BaselineCount {
    int64_t keep_per_window = 0;        // K' (ceil convention)
    int64_t keep_per_window_floor = 0;  // floor variant, reported for comparison
    int64_t selected_total = 0;         // K = E * K'
    double ratio_to_tokens = 0.0;       // K / N; exceeds 1 whenever padding is selected
};

BaselineCount baseline_selected_count(const WindowGrid& grid, double ratio);

}  // namespace tsvit
