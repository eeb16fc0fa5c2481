#pragma once

#include <cstdint>
#include <vector>

#include "tsvit/tensor.hpp"

namespace tsvit {

// Geometry of the zero-padded window partition of an H_tok x W_tok token
// grid into non-overlapping f x f windows. Padding is trailing (bottom
// rows, right columns) and minimal.
struct WindowGrid {
    int64_t channels = 0;  // d
    int64_t h_tok = 0;     // H/k
    int64_t w_tok = 0;     // W/k
    int64_t window = 0;    // f
    int64_t pad_h = 0;     // h_p
    int64_t pad_w = 0;     // w_p
    int64_t h_pad = 0;     // H_p = h_p + H/k
    int64_t w_pad = 0;     // W_p = w_p + W/k
    int64_t windows = 0;   // E
    int64_t per_window = 0;  // N' = f^2

    static WindowGrid make(int64_t channels, int64_t h_tok, int64_t w_tok, int64_t window);

    int64_t tokens() const { return h_tok * w_tok; }        // N
    int64_t padded_tokens() const { return windows * per_window; }
};

// Selection state over N tokens: binary mask, soft scores, the ordered
// selected-index list J*, and the compact-index permutation pi.
struct TokenMask {
    std::vector<uint8_t> binary;     // B, length N
    std::vector<double> soft;        // Z, length N, values in [0,1]
    std::vector<int64_t> selected;   // J*, ascending original indices
    std::vector<int64_t> compact_of; // pi: original index -> compact index, -1 if unselected
    int64_t total = 0;               // N

    int64_t selected_count() const { return static_cast<int64_t>(selected.size()); }  // K-bar

    static TokenMask from_binary(const std::vector<uint8_t>& binary, const std::vector<double>& soft);
    static TokenMask all_on(int64_t n, const std::vector<double>& soft);
};

// x[d x N] -> [d x E x N'], window-major token order; padded slots are zero.
Tensor window_partition(const Tensor& x, const WindowGrid& grid);

// Exact inverse of window_partition on the unpadded region.
Tensor window_unpartition(const Tensor& w, const WindowGrid& grid);

// Marks padded slots of a window-partitioned score tensor [1 x E x N'] with
// `pad_value` so that ranking never prefers them.
void mark_padded_scores(Tensor& scores, const WindowGrid& grid, double pad_value);

struct WindowSelection {
    Tensor selected;                            // [d x E x K']
    std::vector<std::vector<int64_t>> perm;     // per window: rank -> original in-window index
};

// Keeps the K' highest-scoring tokens per window, in rank order. Stable:
// lower original index wins on equal scores.
WindowSelection rank_and_select_per_window(const Tensor& tokens, const Tensor& scores, int64_t keep);

// Scatters selected[d x E x K'] back over original[d x E x N'] using the
// permutation from rank_and_select_per_window; unselected slots keep the
// original values.
Tensor token_merge(const Tensor& selected, const Tensor& original, const std::vector<std::vector<int64_t>>& perm);

// Columns of m_hat at J*, ascending. K-bar = 0 yields an empty [d x 0].
Tensor gather_selected(const Tensor& m_hat, const TokenMask& mask);

// R[:, j] = p[:, pi(j)] for j in J*, zero columns elsewhere.
Tensor reverse_index(const Tensor& p, const TokenMask& mask);

}  // namespace tsvit
