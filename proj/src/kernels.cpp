#include "tsvit/kernels.hpp"

#include <cmath>

#include "tsvit/errors.hpp"

namespace tsvit {

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul expects rank-2 tensors");
    if (a.extent(1) != b.extent(0))
        throw DimensionError("matmul inner extents " + a.shape_string() + " vs " + b.shape_string());
    const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul_nt expects rank-2 tensors");
    if (a.extent(1) != b.extent(1))
        throw DimensionError("matmul_nt inner extents " + a.shape_string() + " vs " + b.shape_string());
    const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            pc[i * n + j] = acc;
        }
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul_tn expects rank-2 tensors");
    if (a.extent(0) != b.extent(0))
        throw DimensionError("matmul_tn inner extents " + a.shape_string() + " vs " + b.shape_string());
    const int64_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (int64_t kk = 0; kk < k; ++kk) {
        const double* arow = pa + kk * m;
        const double* brow = pb + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, LayerNormCache* cache) {
    if (x.ndim() != 2) throw DimensionError("layer_norm expects [d x G]");
    const int64_t d = x.extent(0), g = x.extent(1);
    if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm affine size mismatch");
    if (d < 1) throw DimensionError("layer_norm needs d >= 1");
    if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be positive");

    Tensor y({d, g});
    Tensor xhat({d, g});
    std::vector<double> inv_std(static_cast<size_t>(g));
    for (int64_t j = 0; j < g; ++j) {
        double mean = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += x.at(c, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double t = x.at(c, j) - mean;
            var += t * t;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(j)] = is;
        for (int64_t c = 0; c < d; ++c) {
            const double xh = (x.at(c, j) - mean) * is;
            xhat.at(c, j) = xh;
            y.at(c, j) = gamma.at(c) * xh + beta.at(c);
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy) {
    const Tensor& xhat = cache.xhat;
    if (!dy.same_shape(xhat)) throw DimensionError("layer_norm_backward shape mismatch");
    const int64_t d = xhat.extent(0), g = xhat.extent(1);
    LayerNormGrads out;
    out.dx = Tensor({d, g});
    out.dgamma = Tensor({d});
    out.dbeta = Tensor({d});
    for (int64_t j = 0; j < g; ++j) {
        double mean_gdy = 0.0;
        double mean_gdy_xhat = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double gdy = gamma.at(c) * dy.at(c, j);
            mean_gdy += gdy;
            mean_gdy_xhat += gdy * xhat.at(c, j);
        }
        mean_gdy /= static_cast<double>(d);
        mean_gdy_xhat /= static_cast<double>(d);
        const double is = cache.inv_std[static_cast<size_t>(j)];
        for (int64_t c = 0; c < d; ++c) {
            const double gdy = gamma.at(c) * dy.at(c, j);
            out.dx.at(c, j) = (gdy - mean_gdy - xhat.at(c, j) * mean_gdy_xhat) * is;
            out.dgamma.at(c) += dy.at(c, j) * xhat.at(c, j);
            out.dbeta.at(c) += dy.at(c, j);
        }
    }
    return out;
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_prime_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = gelu_scalar(v);
    return y;
}

Tensor gelu_grad(const Tensor& x, const Tensor& dy) {
    if (!x.same_shape(dy)) throw DimensionError("gelu_grad shape mismatch");
    Tensor dx = x;
    for (int64_t i = 0; i < dx.size(); ++i) dx.at(i) = gelu_prime_scalar(x.at(i)) * dy.at(i);
    return dx;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor relu_grad(const Tensor& x, const Tensor& dy) {
    if (!x.same_shape(dy)) throw DimensionError("relu_grad shape mismatch");
    Tensor dx = x;
    for (int64_t i = 0; i < dx.size(); ++i) dx.at(i) = x.at(i) > 0.0 ? dy.at(i) : 0.0;
    return dx;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = sigmoid_scalar(v);
    return y;
}

Tensor sigmoid_grad_from_output(const Tensor& y, const Tensor& dy) {
    if (!y.same_shape(dy)) throw DimensionError("sigmoid_grad shape mismatch");
    Tensor dx = y;
    for (int64_t i = 0; i < dx.size(); ++i) dx.at(i) = y.at(i) * (1.0 - y.at(i)) * dy.at(i);
    return dx;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.ndim() < 1) throw DimensionError("softmax needs rank >= 1");
    const int64_t n = x.extent(static_cast<int>(x.ndim()) - 1);
    const int64_t rows = x.size() / n;
    Tensor y = x;
    for (int64_t r = 0; r < rows; ++r) {
        double* row = y.data() + r * n;
        double mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < n; ++j) row[j] /= sum;
    }
    return y;
}

Tensor softmax_backward_lastdim(const Tensor& y, const Tensor& dy) {
    if (!y.same_shape(dy)) throw DimensionError("softmax_backward shape mismatch");
    const int64_t n = y.extent(static_cast<int>(y.ndim()) - 1);
    const int64_t rows = y.size() / n;
    Tensor dx = y;
    for (int64_t r = 0; r < rows; ++r) {
        const double* yrow = y.data() + r * n;
        const double* dyrow = dy.data() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += yrow[j] * dyrow[j];
        double* dxrow = dx.data() + r * n;
        for (int64_t j = 0; j < n; ++j) dxrow[j] = yrow[j] * (dyrow[j] - dot);
    }
    return dx;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h >= 1e-6 && h <= 1e-4)) throw ParameterError("finite_diff_grad step outside [1e-6, 1e-4]");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double orig = probe.at(i);
        probe.at(i) = orig + h;
        const double fp = f(probe);
        probe.at(i) = orig - h;
        const double fm = f(probe);
        probe.at(i) = orig;
        grad.at(i) = (fp - fm) / (2.0 * h);
    }
    return grad;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("add shape mismatch");
    Tensor c = a;
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) += b.at(i);
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("sub shape mismatch");
    Tensor c = a;
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) -= b.at(i);
    return c;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("hadamard shape mismatch");
    Tensor c = a;
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) *= b.at(i);
    return c;
}

Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.values()) v *= s;
    return c;
}

}  // namespace tsvit
