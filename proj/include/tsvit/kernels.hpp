#pragma once

#include <functional>
#include <vector>

#include "tsvit/tensor.hpp"

namespace tsvit {

// Primitive differentiable operations. Everything is a pure function over
// immutable inputs with a fixed summation order, so results are bitwise
// reproducible and safe to call concurrently.

// c[m x n] = a[m x k] * b[k x n]; accumulation over k runs left to right.
Tensor matmul(const Tensor& a, const Tensor& b);
// c[m x n] = a[m x k] * b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// c[m x n] = a[k x m]^T * b[k x n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);

struct LayerNormCache {
    Tensor xhat;                  // normalized pre-affine values
    std::vector<double> inv_std;  // 1/sqrt(var + eps) per column
};

struct NormWeights {
    Tensor gamma;
    Tensor beta;

    static NormWeights identity(int64_t dim) {
        NormWeights n;
        n.gamma = Tensor::full({dim}, 1.0);
        n.beta = Tensor({dim});
        return n;
    }
};

// A value tensor paired with a gradient of identical shape.
struct GradPair {
    Tensor value;
    Tensor grad;

    GradPair() = default;
    GradPair(Tensor v, Tensor g) : value(std::move(v)), grad(std::move(g)) {
        if (!value.same_shape(grad)) throw DimensionError("GradPair value/grad shapes differ");
    }
};

// Per-column (per-token) normalization of x[d x G] with affine gamma/beta[d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  LayerNormCache* cache = nullptr);

struct LayerNormGrads {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy);

// Elementwise activations. GeLU uses the exact erf form.
Tensor gelu(const Tensor& x);
Tensor gelu_grad(const Tensor& x, const Tensor& dy);
Tensor relu(const Tensor& x);
Tensor relu_grad(const Tensor& x, const Tensor& dy);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_grad_from_output(const Tensor& y, const Tensor& dy);

double gelu_scalar(double x);
double gelu_prime_scalar(double x);
inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Softmax over the last dimension; rows of the trailing axis sum to one.
Tensor softmax_lastdim(const Tensor& x);
// dz from the softmax output y and upstream dy (same shapes).
Tensor softmax_backward_lastdim(const Tensor& y, const Tensor& dy);

// Central-difference gradient oracle: (f(x+h e) - f(x-h e)) / (2h) per
// element. h must lie in [1e-6, 1e-4].
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// Elementwise helpers shared by the block implementations.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

}  // namespace tsvit
