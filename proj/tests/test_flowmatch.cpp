#include "avlink/flowmatch.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace avlink;
using namespace avlink::flow;
using Catch::Matchers::WithinAbs;

namespace {

Matrix row(std::initializer_list<Real> v) {
    Matrix m(1, static_cast<Index>(v.size()));
    Index i = 0;
    for (Real x : v) m(0, i++) = x;
    return m;
}

Real median_of(std::vector<Real> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST_CASE("interpolate endpoints and arithmetic") {
    Rng rng(1);
    const Matrix x0 = rng.normal_matrix(5, 4), x1 = rng.normal_matrix(5, 4);
    CHECK(interpolate(x0, x1, 0.0) == x0);
    CHECK(interpolate(x0, x1, 1.0) == x1);
    CHECK(interpolate(row({0, 0}), row({2, 4}), 0.25) == row({0.5, 1.0}));
    CHECK_THROWS_AS(interpolate(x0, rng.normal_matrix(4, 4), 0.5), ContractError);
    CHECK_THROWS_AS(interpolate(x0, x1, 1.5), ContractError);
}

TEST_CASE("velocity target is the path derivative") {
    Rng rng(2);
    CHECK(velocity_target(row({1}), row({3})) == row({2}));
    const Matrix x = rng.normal_matrix(3, 3);
    CHECK(velocity_target(x, x).isZero(0.0));
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x0 = rng.normal_matrix(4, 6), x1 = rng.normal_matrix(4, 6);
        const Real t = rng.uniform();
        const Matrix back = interpolate(x0, x1, t) + (1.0 - t) * velocity_target(x0, x1);
        CHECK((back - x1).cwiseAbs().maxCoeff() <= 1e-12);
        const Real h = 1e-3;
        const Real t0 = std::min(t, 1.0 - h);
        const Matrix fd = (interpolate(x0, x1, t0 + h) - interpolate(x0, x1, t0)) / h;
        CHECK((fd - velocity_target(x0, x1)).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("fm_loss values and gradient") {
    Rng rng(3);
    const Matrix x0 = rng.normal_matrix(3, 4), x1 = rng.normal_matrix(3, 4);
    CHECK(fm_loss(x1 - x0, x0, x1) == 0.0);
    CHECK(fm_loss(row({0, 0}), row({0, 0}), row({2, 0})) == 2.0);
    CHECK(fm_loss(rng.normal_matrix(3, 4), x0, x1) > 0.0);

    const Matrix pred = rng.normal_matrix(3, 4);
    const Matrix g = fm_loss_grad(pred, x0, x1);
    const Real eps = 1e-4;
    Real worst = 0.0;
    for (Index i = 0; i < pred.size(); ++i) {
        Matrix p = pred, m = pred;
        p.data()[i] += eps;
        m.data()[i] -= eps;
        const Real fd = (fm_loss(p, x0, x1) - fm_loss(m, x0, x1)) / (2 * eps);
        worst = std::max(worst, std::abs(fd - g.data()[i]) / std::max(std::abs(fd), 1e-12));
    }
    CHECK(worst <= 1e-4);

    Matrix bad = pred;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(fm_loss(bad, x0, x1), NumericError);
}

TEST_CASE("logit-normal timestep draws") {
    Rng r0(4);
    CHECK(sample_t({0.0, 0.0}, r0) == 0.5);

    // Median of sigmoid(z) is sigmoid(median z); 100k draws pin the empirical median to about 0.003.
    for (auto [loc, expect] : {std::pair{0.0, 0.5}, std::pair{-1.0, 1.0 / (1.0 + std::exp(1.0))}}) {
        Rng rng(5);
        std::vector<Real> draws(100000);
        for (auto& d : draws) {
            d = sample_t({loc, 1.0}, rng);
            REQUIRE(d > 0.0);
            REQUIRE(d < 1.0);
        }
        CHECK_THAT(median_of(draws), WithinAbs(expect, 0.01));
    }
    CHECK_THAT(1.0 / (1.0 + std::exp(1.0)), WithinAbs(0.2689, 1e-4));

    Rng a(9), b(9);
    for (int i = 0; i < 100; ++i) CHECK(sample_t({-1.0, 1.0}, a) == sample_t({-1.0, 1.0}, b));
    // Extreme locations stay inside the open interval.
    Rng c(10);
    CHECK(sample_t({60.0, 0.0}, c) < 1.0);
    CHECK(sample_t({-60.0, 0.0}, c) > 0.0);
    CHECK_THROWS_AS(LogitNormalParams({0.0, -1.0}).validate(), ContractError);
}

TEST_CASE("euler sampler") {
    Rng rng(6);
    const Matrix x0 = rng.normal_matrix(4, 3), c = rng.normal_matrix(4, 3);
    for (int steps : {1, 7, 64, 1000}) {
        const Matrix x = euler_sample([&](const Matrix&, Real) { return c; }, x0, steps);
        const Matrix expect = x0 + c;
        CHECK((x - expect).norm() / expect.norm() <= 1e-12);
    }

    const Matrix x1 = rng.normal_matrix(4, 3);
    const Matrix one = euler_sample([&](const Matrix& x, Real) { return Matrix(x * 0.5 + x1); }, x0, 1);
    CHECK(one == x0 + (x0 * 0.5 + x1));
    CHECK(euler_sample([&](const Matrix&, Real) { return Matrix(x1 - x0); }, x0, 1).isApprox(x1, 1e-15));

    // dx/dt = x: exact terminal value e x0, left Euler gives (1 + 1/n)^n x0.
    const Matrix y0 = Matrix::Constant(1, 1, 1.0);
    auto err = [&](int n) {
        const Matrix y = euler_sample([](const Matrix& x, Real) { return x; }, y0, n);
        return std::abs(y(0, 0) - std::exp(1.0));
    };
    const Real ratio = err(64) / err(4096);
    CHECK(ratio >= 32.0);
    CHECK(ratio <= 128.0);

    std::vector<EulerStep> seen;
    euler_sample([&](const Matrix&, Real) { return c; }, x0, 8, [&](const EulerStep& s) { seen.push_back(s); });
    REQUIRE(seen.size() == 8);
    CHECK(seen[3].index == 3);
    CHECK(seen[3].t == 3.0 / 8.0);

    CHECK_THROWS_AS(euler_sample([&](const Matrix&, Real) { return c; }, x0, 0), ContractError);
    CHECK_THROWS_AS(euler_sample([&](const Matrix& x, Real t) { return Matrix(x / (t - 0.5)); }, x0, 2), NumericError);
}

TEST_CASE("classifier-free guidance combine") {
    Rng rng(7);
    const Matrix c = rng.normal_matrix(2, 5), u = rng.normal_matrix(2, 5);
    CHECK((cfg_combine(c, u, 1.0) - c).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(cfg_combine(c, u, 0.0) == u);
    CHECK(cfg_combine(row({1}), row({0}), 5.0) == row({5}));
    // Linear in the weight.
    const Matrix a = cfg_combine(c, u, 2.0), b = cfg_combine(c, u, 4.0), m = cfg_combine(c, u, 3.0);
    CHECK(((a + b) / 2 - m).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK_THROWS_AS(cfg_combine(c, rng.normal_matrix(5, 2), 1.0), ContractError);
    CHECK_THROWS_AS(GuidanceConfig({5.0, 0}).validate(), ContractError);
}
