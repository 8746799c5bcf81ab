#include <catch2/catch_amalgamated.hpp>

#include "halo/rmsnorm.hpp"
#include "support/fd_check.hpp"

using namespace halo;

TEST_CASE("forward normalizes rows") {
    const Tensor y = rmsnorm_forward(Tensor({{3.0f, 4.0f}}));
    CHECK(y(0, 0) == Catch::Approx(0.6).margin(1e-7));
    CHECK(y(0, 1) == Catch::Approx(0.8).margin(1e-7));

    // unit vectors are fixpoints, positive scaling is invisible
    const Tensor u({{0.0f, 1.0f, 0.0f}});
    const Tensor fu = rmsnorm_forward(u);
    for (index_t j = 0; j < 3; ++j)
        CHECK(fu(0, j) == Catch::Approx(u(0, j)).margin(1e-7));
    const Tensor a({{0.3f, -1.2f, 2.0f, 0.7f}});
    const Tensor fa = rmsnorm_forward(a);
    const Tensor fca = rmsnorm_forward(scale(a, 7.5f));
    for (index_t j = 0; j < 4; ++j)
        CHECK(fca(0, j) == Catch::Approx(fa(0, j)).margin(1e-6));

    CHECK_THROWS_AS(rmsnorm_forward(Tensor::filled(1, 3, 0.0f)), numeric_error);
}

TEST_CASE("backward matches the hand example and kills the radial direction") {
    const Tensor g = rmsnorm_backward(Tensor({{3.0f, 4.0f}}), Tensor({{1.0f, 0.0f}}));
    CHECK(g(0, 0) == Catch::Approx(0.128).margin(1e-6));
    CHECK(g(0, 1) == Catch::Approx(-0.096).margin(1e-6));

    const Tensor x({{0.5f, -2.0f, 1.5f}});
    const Tensor r = rmsnorm_backward(x, x);
    for (index_t j = 0; j < 3; ++j)
        CHECK(r(0, j) == Catch::Approx(0.0).margin(1e-7));

    CHECK_THROWS_AS(rmsnorm_backward(Tensor::filled(1, 2, 0.0f), Tensor::filled(1, 2, 1.0f)),
                    numeric_error);
    CHECK_THROWS_AS(rmsnorm_backward(Tensor(2, 3), Tensor(3, 2)), std::invalid_argument);
}

TEST_CASE("backward and gain gradient match finite differences") {
    Rng rng(101);
    for (int t = 0; t < 6; ++t) {
        TensorT<double> x = randn<double>(3, 8, rng);
        const TensorT<double> e = randn<double>(3, 8, rng);
        TensorT<double> gain(1, 8);
        for (int j = 0; j < 8; ++j)
            gain(0, j) = 1.0 + 0.3 * rng.normal();
        const bool with_gain = t % 2 == 1;
        const TensorT<double>* gp = with_gain ? &gain : nullptr;

        auto loss = [&] { return dot_flat(rmsnorm_forward(x, gp), e); };
        const TensorT<double> analytic = rmsnorm_backward(x, e, gp);
        CHECK(oracle::max_rel_diff(analytic, oracle::fd_gradient(x, loss)) < 1e-6);
    }
}

TEST_CASE("gain gradient against finite differences on the gain") {
    Rng rng(102);
    TensorT<double> x = randn<double>(4, 6, rng);
    const TensorT<double> e = randn<double>(4, 6, rng);
    TensorT<double> gain(1, 6);
    for (int j = 0; j < 6; ++j)
        gain(0, j) = 1.0 + 0.2 * rng.normal();

    const TensorT<double> analytic = rmsnorm_gain_gradient(x, e);
    for (int j = 0; j < 6; ++j) {
        const double h = 1e-6;
        const double keep = gain(0, j);
        gain(0, j) = keep + h;
        const double up = dot_flat(rmsnorm_forward(x, &gain), e);
        gain(0, j) = keep - h;
        const double down = dot_flat(rmsnorm_forward(x, &gain), e);
        gain(0, j) = keep;
        CHECK(analytic(0, j) == Catch::Approx((up - down) / (2 * h)).epsilon(1e-5));
    }
}

TEST_CASE("rotation distributivity: forward commutes, backward does not") {
    int big_backward = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const DistributivityProbe p = distributivity_probe(seed);
        CHECK(p.forward_gap < 1e-6);
        if (p.backward_gap > 1e-3)
            ++big_backward;
    }
    CHECK(big_backward > 0);

    const DistributivityProbe id = distributivity_probe(7, 64, true);
    CHECK(id.forward_gap == 0.0);
    CHECK(id.backward_gap == 0.0);
}
