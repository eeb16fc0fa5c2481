#include "tsvit/windowing.hpp"

#include <algorithm>
#include <numeric>

#include "tsvit/errors.hpp"

namespace tsvit {

WindowGrid WindowGrid::make(int64_t channels, int64_t h_tok, int64_t w_tok, int64_t window) {
    if (channels < 1 || h_tok < 1 || w_tok < 1 || window < 1)
        throw ParameterError("window grid extents must be positive");
    WindowGrid g;
    g.channels = channels;
    g.h_tok = h_tok;
    g.w_tok = w_tok;
    g.window = window;
    g.pad_h = (window - h_tok % window) % window;
    g.pad_w = (window - w_tok % window) % window;
    g.h_pad = h_tok + g.pad_h;
    g.w_pad = w_tok + g.pad_w;
    g.windows = (g.h_pad / window) * (g.w_pad / window);
    g.per_window = window * window;
    return g;
}

TokenMask TokenMask::from_binary(const std::vector<uint8_t>& binary, const std::vector<double>& soft) {
    if (binary.size() != soft.size()) throw DimensionError("token mask binary/soft length mismatch");
    TokenMask m;
    m.binary = binary;
    m.soft = soft;
    m.total = static_cast<int64_t>(binary.size());
    m.compact_of.assign(binary.size(), -1);
    for (int64_t j = 0; j < m.total; ++j) {
        if (binary[static_cast<size_t>(j)]) {
            m.compact_of[static_cast<size_t>(j)] = static_cast<int64_t>(m.selected.size());
            m.selected.push_back(j);
        }
    }
    return m;
}

TokenMask TokenMask::all_on(int64_t n, const std::vector<double>& soft) {
    std::vector<uint8_t> b(static_cast<size_t>(n), 1);
    return from_binary(b, soft);
}

namespace {

// Window-major slot index of token-grid position (row, col).
inline int64_t slot_index(const WindowGrid& g, int64_t row, int64_t col) {
    const int64_t wr = row / g.window, wc = col / g.window;
    const int64_t e = wr * (g.w_pad / g.window) + wc;
    const int64_t in_window = (row % g.window) * g.window + (col % g.window);
    return e * g.per_window + in_window;
}

}  // namespace

Tensor window_partition(const Tensor& x, const WindowGrid& grid) {
    if (x.ndim() != 2 || x.extent(0) != grid.channels || x.extent(1) != grid.tokens())
        throw DimensionError("window_partition input " + x.shape_string() + " does not match grid");
    Tensor out({grid.channels, grid.windows, grid.per_window});
    for (int64_t r = 0; r < grid.h_tok; ++r) {
        for (int64_t c = 0; c < grid.w_tok; ++c) {
            const int64_t token = r * grid.w_tok + c;
            const int64_t slot = slot_index(grid, r, c);
            const int64_t e = slot / grid.per_window, i = slot % grid.per_window;
            for (int64_t ch = 0; ch < grid.channels; ++ch) out.at(ch, e, i) = x.at(ch, token);
        }
    }
    return out;
}

Tensor window_unpartition(const Tensor& w, const WindowGrid& grid) {
    if (w.ndim() != 3 || w.extent(0) != grid.channels || w.extent(1) != grid.windows ||
        w.extent(2) != grid.per_window)
        throw DimensionError("window_unpartition input " + w.shape_string() + " does not match grid");
    Tensor out({grid.channels, grid.tokens()});
    for (int64_t r = 0; r < grid.h_tok; ++r) {
        for (int64_t c = 0; c < grid.w_tok; ++c) {
            const int64_t token = r * grid.w_tok + c;
            const int64_t slot = slot_index(grid, r, c);
            const int64_t e = slot / grid.per_window, i = slot % grid.per_window;
            for (int64_t ch = 0; ch < grid.channels; ++ch) out.at(ch, token) = w.at(ch, e, i);
        }
    }
    return out;
}

void mark_padded_scores(Tensor& scores, const WindowGrid& grid, double pad_value) {
    if (scores.ndim() != 3 || scores.extent(0) != 1 || scores.extent(1) != grid.windows ||
        scores.extent(2) != grid.per_window)
        throw DimensionError("mark_padded_scores shape mismatch");
    for (int64_t r = 0; r < grid.h_pad; ++r) {
        for (int64_t c = 0; c < grid.w_pad; ++c) {
            if (r < grid.h_tok && c < grid.w_tok) continue;
            const int64_t slot = slot_index(grid, r, c);
            scores.at(0, slot / grid.per_window, slot % grid.per_window) = pad_value;
        }
    }
}

WindowSelection rank_and_select_per_window(const Tensor& tokens, const Tensor& scores, int64_t keep) {
    if (tokens.ndim() != 3 || scores.ndim() != 3) throw DimensionError("rank_and_select expects [d x E x N']");
    const int64_t d = tokens.extent(0), e_count = tokens.extent(1), per = tokens.extent(2);
    if (scores.extent(0) != 1 || scores.extent(1) != e_count || scores.extent(2) != per)
        throw DimensionError("rank_and_select score shape mismatch");
    if (keep < 1 || keep > per) throw ParameterError("rank_and_select keep count out of [1, N']");

    WindowSelection sel;
    sel.selected = Tensor({d, e_count, keep});
    sel.perm.resize(static_cast<size_t>(e_count));
    std::vector<int64_t> order(static_cast<size_t>(per));
    for (int64_t e = 0; e < e_count; ++e) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return scores.at(0, e, a) > scores.at(0, e, b);
        });
        auto& perm = sel.perm[static_cast<size_t>(e)];
        perm.assign(order.begin(), order.begin() + keep);
        for (int64_t k = 0; k < keep; ++k)
            for (int64_t ch = 0; ch < d; ++ch) sel.selected.at(ch, e, k) = tokens.at(ch, e, perm[static_cast<size_t>(k)]);
    }
    return sel;
}

Tensor token_merge(const Tensor& selected, const Tensor& original, const std::vector<std::vector<int64_t>>& perm) {
    if (selected.ndim() != 3 || original.ndim() != 3) throw DimensionError("token_merge expects rank-3 tensors");
    const int64_t d = original.extent(0), e_count = original.extent(1);
    const int64_t keep = selected.ndim() == 3 ? selected.extent(2) : 0;
    if (selected.extent(0) != d || selected.extent(1) != e_count)
        throw DimensionError("token_merge selected/original mismatch");
    if (static_cast<int64_t>(perm.size()) != e_count) throw DimensionError("token_merge permutation count mismatch");

    Tensor out = original;
    for (int64_t e = 0; e < e_count; ++e) {
        const auto& p = perm[static_cast<size_t>(e)];
        if (static_cast<int64_t>(p.size()) != keep) throw DimensionError("token_merge permutation length mismatch");
        for (int64_t k = 0; k < keep; ++k) {
            const int64_t m = p[static_cast<size_t>(k)];
            if (m < 0 || m >= original.extent(2)) throw DimensionError("token_merge permutation index out of range");
            for (int64_t ch = 0; ch < d; ++ch) out.at(ch, e, m) = selected.at(ch, e, k);
        }
    }
    return out;
}

Tensor gather_selected(const Tensor& m_hat, const TokenMask& mask) {
    if (m_hat.ndim() != 2 || m_hat.extent(1) != mask.total)
        throw DimensionError("gather_selected input " + m_hat.shape_string() + " does not match mask");
    const int64_t d = m_hat.extent(0), kbar = mask.selected_count();
    Tensor out({d, kbar});
    for (int64_t k = 0; k < kbar; ++k) {
        const int64_t j = mask.selected[static_cast<size_t>(k)];
        for (int64_t ch = 0; ch < d; ++ch) out.at(ch, k) = m_hat.at(ch, j);
    }
    return out;
}

Tensor reverse_index(const Tensor& p, const TokenMask& mask) {
    if (p.ndim() != 2 || p.extent(1) != mask.selected_count())
        throw DimensionError("reverse_index input " + p.shape_string() + " does not match mask");
    const int64_t d = p.extent(0);
    Tensor out({d, mask.total});
    for (int64_t j = 0; j < mask.total; ++j) {
        const int64_t k = mask.compact_of[static_cast<size_t>(j)];
        if (k < 0) continue;
        for (int64_t ch = 0; ch < d; ++ch) out.at(ch, j) = p.at(ch, k);
    }
    return out;
}

}  // namespace tsvit
