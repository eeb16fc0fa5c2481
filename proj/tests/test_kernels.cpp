#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "oracles.hpp"
#include "tsvit/errors.hpp"
#include "tsvit/kernels.hpp"

using namespace tsvit;

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor prod = matmul(eye, eye);
    CHECK(oracle::max_abs_diff(prod, eye) == 0.0);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 3.0);
    CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul matches the naive triple-loop oracle exactly") {
    Rng rng(42);
    Tensor a = Tensor::random_normal({5, 7}, rng);
    Tensor b = Tensor::random_normal({7, 3}, rng);
    CHECK(oracle::max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)) == 0.0);
}

TEST_CASE("matmul transpose variants agree with explicit transposition") {
    Rng rng(7);
    Tensor a = Tensor::random_normal({4, 6}, rng);
    Tensor b = Tensor::random_normal({5, 6}, rng);
    Tensor bt({6, 5});
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 6; ++j) bt.at(j, i) = b.at(i, j);
    CHECK(oracle::max_rel_err(matmul_nt(a, b), oracle::naive_matmul(a, bt)) < 1e-14);

    Tensor c = Tensor::random_normal({6, 4}, rng);
    Tensor ct({4, 6});
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 4; ++j) ct.at(j, i) = c.at(i, j);
    Tensor d = Tensor::random_normal({6, 3}, rng);
    CHECK(oracle::max_rel_err(matmul_tn(c, d), oracle::naive_matmul(ct, d)) < 1e-14);
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor a({2, 3});
    Tensor b({2, 3});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("layer_norm constant column collapses to beta") {
    Tensor x = Tensor::full({3, 2}, 5.0);
    Tensor gamma = Tensor::full({3}, 1.0);
    Tensor beta({3});
    Tensor y = layer_norm(x, gamma, beta, 1e-6);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(std::fabs(y.at(i)) < 1e-9);
}

TEST_CASE("layer_norm symmetric two-value column") {
    Tensor x({2, 1}, {1.0, 3.0});
    Tensor gamma = Tensor::full({2}, 1.0);
    Tensor beta({2});
    Tensor y = layer_norm(x, gamma, beta, 1e-12);
    CHECK(y.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y.at(1, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm matches the direct mean/variance oracle") {
    Rng rng(3);
    Tensor x = Tensor::random_normal({4, 6}, rng);
    Tensor gamma = Tensor::random_normal({4}, rng);
    Tensor beta = Tensor::random_normal({4}, rng);
    Tensor y = layer_norm(x, gamma, beta, 1e-6);
    CHECK(oracle::max_rel_err(y, oracle::naive_layer_norm(x, gamma, beta, 1e-6)) < 1e-12);
}

TEST_CASE("layer_norm column means vanish under identity affine") {
    Rng rng(11);
    Tensor x = Tensor::random_normal({16, 9}, rng);
    Tensor gamma = Tensor::full({16}, 1.0);
    Tensor beta({16});
    Tensor y = layer_norm(x, gamma, beta, 1e-6);
    for (int64_t j = 0; j < 9; ++j) {
        double mean = 0.0;
        for (int64_t c = 0; c < 16; ++c) mean += y.at(c, j);
        CHECK(std::fabs(mean / 16.0) < 1e-10);
    }
}

TEST_CASE("activation point values") {
    Tensor x({1, 2}, {-1.0, 2.0});
    Tensor r = relu(x);
    CHECK(r.at(0, 0) == 0.0);
    CHECK(r.at(0, 1) == 2.0);

    Tensor zero({1, 1}, {0.0});
    CHECK(sigmoid(zero).at(0) == doctest::Approx(0.5));

    Tensor flat({1, 3}, {0.0, 0.0, 0.0});
    Tensor sm = softmax_lastdim(flat);
    for (int64_t i = 0; i < 3; ++i) CHECK(sm.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(5);
    Tensor x = Tensor::random_normal({4, 7, 7}, rng, 3.0);
    Tensor y = softmax_lastdim(x);
    for (int64_t r = 0; r < 28; ++r) {
        double sum = 0.0;
        for (int64_t j = 0; j < 7; ++j) sum += y.at(r * 7 + j);
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("finite differences reproduce known gradients") {
    Tensor x({2}, {1.0, 2.0});

    auto sum_all = [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.size(); ++i) acc += t.at(i);
        return acc;
    };
    Tensor g1 = finite_diff_grad(sum_all, x, 1e-5);
    CHECK(g1.at(0) == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(g1.at(1) == doctest::Approx(1.0).epsilon(1e-8));

    auto half_norm = [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.size(); ++i) acc += 0.5 * t.at(i) * t.at(i);
        return acc;
    };
    Tensor g2 = finite_diff_grad(half_norm, x, 1e-5);
    CHECK(std::fabs(g2.at(0) - 1.0) < 1e-8);
    CHECK(std::fabs(g2.at(1) - 2.0) < 1e-8);

    Tensor zero({1}, {0.0});
    auto sig = [](const Tensor& t) { return sigmoid_scalar(t.at(0)); };
    Tensor g3 = finite_diff_grad(sig, zero, 1e-5);
    CHECK(std::fabs(g3.at(0) - 0.25) < 1e-8);
}

TEST_CASE("finite_diff_grad validates its step size") {
    Tensor x({1}, {0.0});
    auto f = [](const Tensor& t) { return t.at(0); };
    CHECK_THROWS_AS(finite_diff_grad(f, x, 1e-2), ParameterError);
}

TEST_CASE("analytic backward passes match finite differences") {
    Rng rng(17);
    const double tol = 1e-4;

    SUBCASE("matmul") {
        Tensor a = Tensor::random_normal({3, 4}, rng);
        Tensor b = Tensor::random_normal({4, 2}, rng);
        Tensor w = Tensor::random_normal({3, 2}, rng);
        auto loss_a = [&](const Tensor& probe) {
            Tensor c = matmul(probe, b);
            double acc = 0.0;
            for (int64_t i = 0; i < c.size(); ++i) acc += c.at(i) * w.at(i);
            return acc;
        };
        // dA = dC B^T with dC = w
        Tensor da = matmul_nt(w, b);
        CHECK(oracle::max_rel_err(da, finite_diff_grad(loss_a, a, 1e-5)) < tol);

        auto loss_b = [&](const Tensor& probe) {
            Tensor c = matmul(a, probe);
            double acc = 0.0;
            for (int64_t i = 0; i < c.size(); ++i) acc += c.at(i) * w.at(i);
            return acc;
        };
        Tensor db = matmul_tn(a, w);
        CHECK(oracle::max_rel_err(db, finite_diff_grad(loss_b, b, 1e-5)) < tol);
    }

    SUBCASE("layer_norm") {
        Tensor x = Tensor::random_normal({5, 3}, rng);
        Tensor gamma = Tensor::random_normal({5}, rng);
        Tensor beta = Tensor::random_normal({5}, rng);
        Tensor w = Tensor::random_normal({5, 3}, rng);
        LayerNormCache cache;
        layer_norm(x, gamma, beta, 1e-6, &cache);
        LayerNormGrads grads = layer_norm_backward(cache, gamma, w);

        auto weighted = [&](const Tensor& y) {
            double acc = 0.0;
            for (int64_t i = 0; i < y.size(); ++i) acc += y.at(i) * w.at(i);
            return acc;
        };
        auto loss_x = [&](const Tensor& probe) { return weighted(layer_norm(probe, gamma, beta, 1e-6)); };
        auto loss_g = [&](const Tensor& probe) { return weighted(layer_norm(x, probe, beta, 1e-6)); };
        auto loss_b = [&](const Tensor& probe) { return weighted(layer_norm(x, gamma, probe, 1e-6)); };
        CHECK(oracle::max_rel_err(grads.dx, finite_diff_grad(loss_x, x, 1e-5)) < tol);
        CHECK(oracle::max_rel_err(grads.dgamma, finite_diff_grad(loss_g, gamma, 1e-5)) < tol);
        CHECK(oracle::max_rel_err(grads.dbeta, finite_diff_grad(loss_b, beta, 1e-5)) < tol);
    }

    SUBCASE("elementwise activations") {
        Tensor x = Tensor::random_normal({4, 3}, rng);
        Tensor w = Tensor::random_normal({4, 3}, rng);
        auto weighted = [&](const Tensor& y) {
            double acc = 0.0;
            for (int64_t i = 0; i < y.size(); ++i) acc += y.at(i) * w.at(i);
            return acc;
        };
        auto loss_gelu = [&](const Tensor& probe) { return weighted(gelu(probe)); };
        CHECK(oracle::max_rel_err(gelu_grad(x, w), finite_diff_grad(loss_gelu, x, 1e-5)) < tol);

        auto loss_sig = [&](const Tensor& probe) { return weighted(sigmoid(probe)); };
        CHECK(oracle::max_rel_err(sigmoid_grad_from_output(sigmoid(x), w), finite_diff_grad(loss_sig, x, 1e-5)) < tol);

        auto loss_soft = [&](const Tensor& probe) { return weighted(softmax_lastdim(probe)); };
        CHECK(oracle::max_rel_err(softmax_backward_lastdim(softmax_lastdim(x), w),
                                  finite_diff_grad(loss_soft, x, 1e-5)) < tol);
    }
}

TEST_CASE("primitives are bitwise deterministic") {
    Rng rng(23);
    Tensor a = Tensor::random_normal({9, 11}, rng);
    Tensor b = Tensor::random_normal({11, 5}, rng);
    Tensor c1 = matmul(a, b);
    Tensor c2 = matmul(a, b);
    CHECK(std::memcmp(c1.data(), c2.data(), static_cast<size_t>(c1.size()) * 8) == 0);

    Tensor gamma = Tensor::full({9}, 1.0);
    Tensor beta({9});
    Tensor n1 = layer_norm(a, gamma, beta, 1e-6);
    Tensor n2 = layer_norm(a, gamma, beta, 1e-6);
    CHECK(std::memcmp(n1.data(), n2.data(), static_cast<size_t>(n1.size()) * 8) == 0);

    Tensor s1 = softmax_lastdim(a);
    Tensor s2 = softmax_lastdim(a);
    CHECK(std::memcmp(s1.data(), s2.data(), static_cast<size_t>(s1.size()) * 8) == 0);
}

TEST_CASE("GradPair enforces matching shapes") {
    Tensor v({2, 3});
    Tensor g({2, 3});
    GradPair ok(v, g);
    CHECK(ok.value.same_shape(ok.grad));
    CHECK_THROWS_AS(GradPair(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

TEST_CASE("primitive outputs stay finite on finite inputs") {
    Rng rng(29);
    Tensor a = Tensor::random_normal({6, 6}, rng, 50.0);
    for (const Tensor& t : {matmul(a, a), gelu(a), relu(a), sigmoid(a), softmax_lastdim(a)})
        for (int64_t i = 0; i < t.size(); ++i) CHECK(std::isfinite(t.at(i)));
}
