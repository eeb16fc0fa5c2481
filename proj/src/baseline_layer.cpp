#include "tsvit/baseline_layer.hpp"

#include <cmath>
#include <limits>

#include "tsvit/errors.hpp"

namespace tsvit {

ScorerWeights ScorerWeights::random(int64_t dim, Rng& rng) {
    ScorerWeights s;
    s.queries = Tensor::random_normal({kMotionQueryCount, kMotionQueryDim}, rng,
                                      1.0 / std::sqrt(static_cast<double>(kMotionQueryDim)));
    s.projection = Tensor::random_normal({kMotionQueryDim, dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    return s;
}

double SelectionRatioSchedule::ratio_for_layer(int64_t layer, int64_t layer_count) const {
    if (ratios.empty()) throw ParameterError("selection schedule has no ratios");
    if (layer < 0 || layer >= layer_count) throw ParameterError("layer index out of range");
    const int64_t groups = static_cast<int64_t>(ratios.size());
    const int64_t group = std::min(groups - 1, layer * groups / std::max<int64_t>(layer_count, 1));
    const double r = ratios[static_cast<size_t>(group)];
    if (!(r > 0.0 && r <= 1.0)) throw ParameterError("selection ratio must lie in (0, 1]");
    return r;
}

Tensor token_scorer(const Tensor& f_in, const ScorerWeights& w) {
    if (f_in.ndim() != 2 || f_in.extent(0) != w.projection.extent(1))
        throw DimensionError("token_scorer input " + f_in.shape_string());
    Tensor projected = matmul(w.projection, f_in);  // [256 x N]
    const int64_t n = f_in.extent(1);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(kMotionQueryDim));
    Tensor scores({1, n});
    for (int64_t j = 0; j < n; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        for (int64_t q = 0; q < kMotionQueryCount; ++q) {
            double acc = 0.0;
            for (int64_t p = 0; p < kMotionQueryDim; ++p) acc += w.queries.at(q, p) * projected.at(p, j);
            best = std::max(best, acc * inv_sqrt);
        }
        scores.at(0, j) = sigmoid_scalar(best);
    }
    return scores;
}

BaselineCount baseline_selected_count(const WindowGrid& grid, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ParameterError("selection ratio must lie in (0, 1]");
    BaselineCount c;
    c.keep_per_window = static_cast<int64_t>(std::ceil(ratio * static_cast<double>(grid.per_window)));
    c.keep_per_window = std::min(c.keep_per_window, grid.per_window);
    c.keep_per_window_floor = std::max<int64_t>(1, static_cast<int64_t>(std::floor(ratio * static_cast<double>(grid.per_window))));
    c.selected_total = grid.windows * c.keep_per_window;
    c.ratio_to_tokens = static_cast<double>(c.selected_total) / static_cast<double>(grid.tokens());
    return c;
}

Tensor baseline_layer_forward(const Tensor& f_in, const BaselineLayerWeights& w, const ScorerWeights& scorer,
                              const WindowGrid& grid, double ratio, double eps) {
    if (f_in.ndim() != 2 || f_in.extent(0) != grid.channels || f_in.extent(1) != grid.tokens())
        throw DimensionError("baseline layer input " + f_in.shape_string() + " does not match grid");

    const int64_t keep = baseline_selected_count(grid, ratio).keep_per_window;

    WindowGrid score_grid = grid;
    score_grid.channels = 1;

    Tensor scores = token_scorer(f_in, scorer);
    Tensor windowed_scores = window_partition(scores, score_grid);
    // Padded slots must never outrank real tokens.
    mark_padded_scores(windowed_scores, score_grid, -std::numeric_limits<double>::infinity());

    Tensor windowed = window_partition(f_in, grid);
    WindowSelection sel = rank_and_select_per_window(windowed, windowed_scores, keep);

    // Flatten [d x E x K'] to [d x (E K')] for the token-wise blocks.
    const int64_t d = grid.channels, e_count = grid.windows;
    const int64_t flat = e_count * keep;
    Tensor selected_flat({d, flat});
    for (int64_t c = 0; c < d; ++c)
        for (int64_t e = 0; e < e_count; ++e)
            for (int64_t k = 0; k < keep; ++k) selected_flat.at(c, e * keep + k) = sel.selected.at(c, e, k);

    Tensor normed = layer_norm(selected_flat, w.pre_attn_norm.gamma, w.pre_attn_norm.beta, eps);
    Tensor normed_windows({d, e_count, keep});
    for (int64_t c = 0; c < d; ++c)
        for (int64_t e = 0; e < e_count; ++e)
            for (int64_t k = 0; k < keep; ++k) normed_windows.at(c, e, k) = normed.at(c, e * keep + k);

    Tensor refined = wmhsa_forward(normed_windows, w.attn);

    // Residual onto the selected (pre-norm) tokens.
    Tensor residual({d, flat});
    for (int64_t c = 0; c < d; ++c)
        for (int64_t e = 0; e < e_count; ++e)
            for (int64_t k = 0; k < keep; ++k)
                residual.at(c, e * keep + k) = sel.selected.at(c, e, k) + refined.at(c, e, k);

    Tensor normed2 = layer_norm(residual, w.pre_proj_norm.gamma, w.pre_proj_norm.beta, eps);
    Tensor projected = output_projection(normed2, w.proj, eps);
    Tensor updated = add(projected, residual);

    Tensor updated_windows({d, e_count, keep});
    for (int64_t c = 0; c < d; ++c)
        for (int64_t e = 0; e < e_count; ++e)
            for (int64_t k = 0; k < keep; ++k) updated_windows.at(c, e, k) = updated.at(c, e * keep + k);

    Tensor merged = token_merge(updated_windows, windowed, sel.perm);
    return window_unpartition(merged, grid);
}

}  // namespace tsvit
