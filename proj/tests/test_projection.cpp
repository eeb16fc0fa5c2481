#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tsvit/projection.hpp"

using namespace tsvit;

TEST_CASE("hidden dim follows floor(2.66 d) exactly") {
    CHECK(projection_hidden_dim(1024) == 2723);
    CHECK(projection_hidden_dim(768) == 2042);
    CHECK(projection_hidden_dim(256) == 680);
    CHECK(projection_hidden_dim(64) == 170);
    CHECK(projection_hidden_dim(2) == 5);
    CHECK(projection_hidden_dim(1) == 2);
}

TEST_CASE("parameter counts") {
    CHECK(projection_param_count(1024) == 3LL * 1024 * 2723);  // ~8.4 M
    CHECK(projection_param_count(1) == 6);
    CHECK(projection_param_count(256) == 522240);
    // Within 1% of the published 8.4 M round figure.
    CHECK(std::fabs(static_cast<double>(projection_param_count(1024)) - 8.4e6) / 8.4e6 < 0.01);
}

TEST_CASE("zero first branch gates everything off") {
    Rng rng(1);
    ProjectionWeights w = ProjectionWeights::random(3, rng);
    for (double& v : w.w1.values()) v = 0.0;
    Tensor h = Tensor::random_normal({3, 4}, rng);
    Tensor p = output_projection(h, w, 1e-6);
    // GeLU(0) = 0 gates the second branch; with beta = 0 the norm output is
    // zero and so is the final projection.
    for (int64_t i = 0; i < p.size(); ++i) CHECK(std::fabs(p.at(i)) < 1e-12);
}

TEST_CASE("forward matches the direct formula oracle") {
    Rng rng(2);
    const int64_t d = 2;
    ProjectionWeights w = ProjectionWeights::random(d, rng);
    REQUIRE(w.hidden() == 5);
    Tensor h = Tensor::random_normal({d, 1}, rng);
    Tensor p = output_projection(h, w, 1e-6);
    Tensor expect = oracle::naive_output_projection(h, w.w1, w.w2, w.w3, w.gamma, w.beta, 1e-6);
    CHECK(oracle::max_rel_err(p, expect) < 1e-12);

    Tensor h2 = Tensor::random_normal({d, 7}, rng);
    Tensor p2 = output_projection(h2, w, 1e-6);
    Tensor expect2 = oracle::naive_output_projection(h2, w.w1, w.w2, w.w3, w.gamma, w.beta, 1e-6);
    CHECK(oracle::max_rel_err(p2, expect2) < 1e-12);
}

TEST_CASE("columns are independent") {
    Rng rng(3);
    ProjectionWeights w = ProjectionWeights::random(4, rng);
    Tensor h = Tensor::random_normal({4, 5}, rng);
    Tensor base = output_projection(h, w, 1e-6);

    Tensor perturbed = h;
    perturbed.at(2, 3) += 1.5;
    Tensor changed = output_projection(perturbed, w, 1e-6);
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t j = 0; j < 5; ++j) {
            if (j == 3) continue;
            CHECK(changed.at(c, j) == base.at(c, j));
        }
}

TEST_CASE("column restriction commutes with the projection") {
    Rng rng(4);
    ProjectionWeights w = ProjectionWeights::random(4, rng);
    Tensor h = Tensor::random_normal({4, 6}, rng);
    Tensor full = output_projection(h, w, 1e-6);

    const std::vector<int64_t> keep = {1, 4, 5};
    Tensor restricted({4, static_cast<int64_t>(keep.size())});
    for (int64_t c = 0; c < 4; ++c)
        for (size_t k = 0; k < keep.size(); ++k) restricted.at(c, static_cast<int64_t>(k)) = h.at(c, keep[k]);
    Tensor sparse = output_projection(restricted, w, 1e-6);
    for (int64_t c = 0; c < 4; ++c)
        for (size_t k = 0; k < keep.size(); ++k)
            CHECK(sparse.at(c, static_cast<int64_t>(k)) == full.at(c, keep[k]));
}

TEST_CASE("flop count is exactly linear in the token count") {
    const long long one = projection_flops(64, 1);
    for (int64_t g : {2, 17, 1000}) CHECK(projection_flops(64, g) == g * one);
    CHECK(projection_flops(1024, 1000) == 16730112000LL);
}

TEST_CASE("analytic gradients match finite differences") {
    Rng rng(5);
    const int64_t d = 3;
    ProjectionWeights w = ProjectionWeights::random(d, rng);
    Tensor h = Tensor::random_normal({d, 4}, rng);
    Tensor probe = Tensor::random_normal({d, 4}, rng);

    ProjectionCache cache;
    output_projection(h, w, 1e-6, &cache);
    ProjectionGrads grads = output_projection_backward(w, cache, probe);

    auto weighted = [&](const Tensor& p) {
        double acc = 0.0;
        for (int64_t i = 0; i < p.size(); ++i) acc += p.at(i) * probe.at(i);
        return acc;
    };
    auto loss_h = [&](const Tensor& x) { return weighted(output_projection(x, w, 1e-6)); };
    CHECK(oracle::max_rel_err(grads.d_input, finite_diff_grad(loss_h, h, 1e-5)) < 1e-4);

    struct Item {
        Tensor* param;
        const Tensor* grad;
    };
    for (auto [param, grad] : {Item{&w.w1, &grads.d_w1}, Item{&w.w2, &grads.d_w2}, Item{&w.w3, &grads.d_w3},
                               Item{&w.gamma, &grads.d_gamma}, Item{&w.beta, &grads.d_beta}}) {
        auto loss_param = [&](const Tensor& p) {
            Tensor saved = *param;
            *param = p;
            const double v = weighted(output_projection(h, w, 1e-6));
            *param = saved;
            return v;
        };
        CHECK(oracle::max_rel_err(*grad, finite_diff_grad(loss_param, *param, 1e-5)) < 1e-4);
    }
}
