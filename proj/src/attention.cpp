#include "tsvit/attention.hpp"

#include <cmath>

#include "tsvit/errors.hpp"
#include "tsvit/kernels.hpp"

namespace tsvit {

int64_t WmhsaWeights::head_dim() const {
    const int64_t d = dim();
    if (heads < 1 || d % heads != 0) throw ConfigurationError("attention dim not divisible by head count");
    return d / heads;
}

WmhsaWeights WmhsaWeights::zeros(int64_t dim, int64_t heads) {
    WmhsaWeights w;
    w.w_q = Tensor({dim, dim});
    w.w_k = Tensor({dim, dim});
    w.w_v = Tensor({dim, dim});
    w.w_out = Tensor({dim, dim});
    w.heads = heads;
    (void)w.head_dim();
    return w;
}

WmhsaWeights WmhsaWeights::random(int64_t dim, int64_t heads, Rng& rng, double out_scale) {
    WmhsaWeights w = zeros(dim, heads);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    w.w_q = Tensor::random_normal({dim, dim}, rng, s);
    w.w_k = Tensor::random_normal({dim, dim}, rng, s);
    w.w_v = Tensor::random_normal({dim, dim}, rng, s);
    w.w_out = Tensor::random_normal({dim, dim}, rng, s * out_scale);
    return w;
}

namespace {

inline void check_input(const Tensor& m, const WmhsaWeights& w) {
    if (m.ndim() != 3) throw DimensionError("wmhsa expects [d x E x I]");
    if (m.extent(0) != w.dim()) throw DimensionError("wmhsa channel mismatch");
    if (m.extent(2) < 1) throw DimensionError("wmhsa needs at least one token per window");
}

}  // namespace

Tensor wmhsa_forward(const Tensor& m, const WmhsaWeights& w, WmhsaCache* cache) {
    check_input(m, w);
    const int64_t d = m.extent(0), e_count = m.extent(1), tokens = m.extent(2);
    const int64_t heads = w.heads, d_a = w.head_dim();
    const double inv_sqrt_da = 1.0 / std::sqrt(static_cast<double>(d_a));

    Tensor out({d, e_count, tokens});
    if (cache) cache->windows.assign(static_cast<size_t>(e_count), WmhsaWindowCache{});

    for (int64_t e = 0; e < e_count; ++e) {
        Tensor x({tokens, d});
        for (int64_t i = 0; i < tokens; ++i)
            for (int64_t c = 0; c < d; ++c) x.at(i, c) = m.at(c, e, i);

        Tensor q({heads, tokens, d_a});
        Tensor k({heads, tokens, d_a});
        Tensor v({heads, tokens, d_a});
        for (int64_t a = 0; a < heads; ++a) {
            for (int64_t i = 0; i < tokens; ++i) {
                for (int64_t c = 0; c < d; ++c) {
                    const double xv = x.at(i, c);
                    if (xv == 0.0) continue;
                    for (int64_t p = 0; p < d_a; ++p) {
                        const int64_t col = a * d_a + p;
                        q.at(a, i, p) += xv * w.w_q.at(c, col);
                        k.at(a, i, p) += xv * w.w_k.at(c, col);
                        v.at(a, i, p) += xv * w.w_v.at(c, col);
                    }
                }
            }
        }

        Tensor scores({heads, tokens, tokens});
        for (int64_t a = 0; a < heads; ++a)
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t j = 0; j < tokens; ++j) {
                    double acc = 0.0;
                    for (int64_t p = 0; p < d_a; ++p) acc += q.at(a, i, p) * k.at(a, j, p);
                    scores.at(a, i, j) = acc * inv_sqrt_da;
                }
        Tensor probs = softmax_lastdim(scores);

        Tensor concat({tokens, d});
        for (int64_t a = 0; a < heads; ++a)
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t p = 0; p < d_a; ++p) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < tokens; ++j) acc += probs.at(a, i, j) * v.at(a, j, p);
                    concat.at(i, a * d_a + p) = acc;
                }

        Tensor o = matmul(concat, w.w_out);  // [I x d]
        for (int64_t i = 0; i < tokens; ++i)
            for (int64_t c = 0; c < d; ++c) out.at(c, e, i) = m.at(c, e, i) + o.at(i, c);

        if (cache) {
            auto& wc = cache->windows[static_cast<size_t>(e)];
            wc.x = std::move(x);
            wc.q = std::move(q);
            wc.k = std::move(k);
            wc.v = std::move(v);
            wc.probs = std::move(probs);
            wc.concat = std::move(concat);
        }
    }
    return out;
}

WmhsaGrads wmhsa_backward(const Tensor& m, const WmhsaWeights& w, const WmhsaCache& cache, const Tensor& d_out) {
    check_input(m, w);
    if (!d_out.same_shape(m)) throw DimensionError("wmhsa_backward gradient shape mismatch");
    const int64_t d = m.extent(0), e_count = m.extent(1), tokens = m.extent(2);
    const int64_t heads = w.heads, d_a = w.head_dim();
    const double inv_sqrt_da = 1.0 / std::sqrt(static_cast<double>(d_a));
    if (static_cast<int64_t>(cache.windows.size()) != e_count) throw DimensionError("wmhsa cache mismatch");

    WmhsaGrads g;
    g.d_input = Tensor({d, e_count, tokens});
    g.d_w_q = Tensor({d, d});
    g.d_w_k = Tensor({d, d});
    g.d_w_v = Tensor({d, d});
    g.d_w_out = Tensor({d, d});

    for (int64_t e = 0; e < e_count; ++e) {
        const auto& wc = cache.windows[static_cast<size_t>(e)];

        Tensor d_o({tokens, d});
        for (int64_t i = 0; i < tokens; ++i)
            for (int64_t c = 0; c < d; ++c) {
                d_o.at(i, c) = d_out.at(c, e, i);
                g.d_input.at(c, e, i) += d_out.at(c, e, i);  // residual path
            }

        // O = concat * w_out
        Tensor d_concat = matmul_nt(d_o, w.w_out);            // [I x d]
        Tensor d_w_out = matmul_tn(wc.concat, d_o);           // [d x d]
        for (int64_t i = 0; i < d * d; ++i) g.d_w_out.at(i) += d_w_out.at(i);

        Tensor d_x({tokens, d});
        for (int64_t a = 0; a < heads; ++a) {
            Tensor d_ga({tokens, d_a});
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t p = 0; p < d_a; ++p) d_ga.at(i, p) = d_concat.at(i, a * d_a + p);

            // Ga = P * Va
            Tensor d_p({tokens, tokens});
            Tensor d_va({tokens, d_a});
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t j = 0; j < tokens; ++j) {
                    double acc = 0.0;
                    for (int64_t p = 0; p < d_a; ++p) acc += d_ga.at(i, p) * wc.v.at(a, j, p);
                    d_p.at(i, j) = acc;
                }
            for (int64_t j = 0; j < tokens; ++j)
                for (int64_t p = 0; p < d_a; ++p) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < tokens; ++i) acc += wc.probs.at(a, i, j) * d_ga.at(i, p);
                    d_va.at(j, p) = acc;
                }

            // P = softmax(S) row-wise
            Tensor probs_a({tokens, tokens});
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t j = 0; j < tokens; ++j) probs_a.at(i, j) = wc.probs.at(a, i, j);
            Tensor d_s = softmax_backward_lastdim(probs_a, d_p);

            // S = Qa Ka^T / sqrt(d_a)
            Tensor d_qa({tokens, d_a});
            Tensor d_ka({tokens, d_a});
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t p = 0; p < d_a; ++p) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < tokens; ++j) acc += d_s.at(i, j) * wc.k.at(a, j, p);
                    d_qa.at(i, p) = acc * inv_sqrt_da;
                }
            for (int64_t j = 0; j < tokens; ++j)
                for (int64_t p = 0; p < d_a; ++p) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < tokens; ++i) acc += d_s.at(i, j) * wc.q.at(a, i, p);
                    d_ka.at(j, p) = acc * inv_sqrt_da;
                }

            // Qa = X * Wq[:, block], same for K and V.
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t c = 0; c < d; ++c) {
                    double acc = 0.0;
                    for (int64_t p = 0; p < d_a; ++p) {
                        const int64_t col = a * d_a + p;
                        acc += d_qa.at(i, p) * w.w_q.at(c, col) + d_ka.at(i, p) * w.w_k.at(c, col) +
                               d_va.at(i, p) * w.w_v.at(c, col);
                    }
                    d_x.at(i, c) += acc;
                }
            for (int64_t c = 0; c < d; ++c)
                for (int64_t p = 0; p < d_a; ++p) {
                    const int64_t col = a * d_a + p;
                    double acc_q = 0.0, acc_k = 0.0, acc_v = 0.0;
                    for (int64_t i = 0; i < tokens; ++i) {
                        const double xv = wc.x.at(i, c);
                        acc_q += xv * d_qa.at(i, p);
                        acc_k += xv * d_ka.at(i, p);
                        acc_v += xv * d_va.at(i, p);
                    }
                    g.d_w_q.at(c, col) += acc_q;
                    g.d_w_k.at(c, col) += acc_k;
                    g.d_w_v.at(c, col) += acc_v;
                }
        }

        for (int64_t i = 0; i < tokens; ++i)
            for (int64_t c = 0; c < d; ++c) g.d_input.at(c, e, i) += d_x.at(i, c);
    }
    return g;
}

int64_t wmhsa_param_count(int64_t dim) { return 4 * dim * dim; }

long long wmhsa_flops(int64_t dim, int64_t heads, int64_t windows, int64_t tokens_per_window) {
    const long long d = dim, i = tokens_per_window, a = heads, e = windows;
    // Per window: QKV + output projections (8 I d^2), the two attention
    // matmuls (4 I^2 d), and softmax at 5 flops per element (5 A I^2).
    return e * (8 * i * d * d + 4 * i * i * d + 5 * a * i * i);
}

}  // namespace tsvit
