#include "avlink/autodiff.hpp"
#include "avlink/eval.hpp"
#include "avlink/layers.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace avlink;

namespace {

struct Fixture {
    ad::ParamStore store;
    Rng rng{42};
    ad::Parameter& p(const std::string& name, Index r, Index c) { return store.add(name, rng.normal_matrix(r, c)); }
};

// Central differences on every entry of every parameter.
Real full_check(const std::function<ad::Var(ad::Tape&)>& fn, ad::ParamStore& store) {
    GradCheckOptions o;
    o.per_param = 1000;
    return grad_check(fn, store.all(), o).max_rel_error;
}

Matrix weights(Index r, Index c, std::uint64_t seed) { return Rng(seed).normal_matrix(r, c); }

}  // namespace

TEST_CASE("elementwise and matrix ops differentiate correctly") {
    Fixture f;
    auto& a = f.p("a", 3, 4);
    auto& b = f.p("b", 4, 5);
    auto& c = f.p("c", 3, 4);
    auto& r = f.p("r", 1, 4);
    auto& bias = f.p("bias", 1, 5);
    const Matrix w35 = weights(3, 5, 1), w34 = weights(3, 4, 2);

    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::matmul(t.param(a), t.param(b)), w35); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::linear(t.param(a), t.param(b), t.param(bias)), w35); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::mul(ad::sub(t.param(a), t.param(c)), t.param(a)), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::mul_row(ad::add_row(t.param(a), t.param(r)), t.param(r)), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::mul_one_plus_row(t.param(c), t.param(r)), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::silu(t.param(a)), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::gelu(t.param(a)), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::layer_norm(t.param(a)), w34); }, f.store) <= 1e-6);
    CHECK(full_check([&](ad::Tape& t) { return ad::mse(t.param(a), w34); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::sum(ad::scale(t.param(c), 3.0)); }, f.store) <= 1e-7);
}

TEST_CASE("attention-related ops differentiate correctly") {
    Fixture f;
    auto& q = f.p("q", 5, 8);
    auto& k = f.p("k", 6, 8);
    auto& v = f.p("v", 6, 8);
    auto& g = f.p("g", 1, 2);
    Matrix angles(5, 2);
    for (Index i = 0; i < angles.size(); ++i) angles.data()[i] = 0.3 * static_cast<Real>(i);
    const Matrix w58 = weights(5, 8, 3);

    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::attention(t.param(q), t.param(k), t.param(v), 2), w58); }, f.store) <= 1e-6);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::head_l2norm(t.param(q), 2), w58); }, f.store) <= 1e-6);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::head_scale(t.param(q), t.param(g), 2), w58); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::rope(t.param(q), angles, 2), w58); }, f.store) <= 1e-7);
}

TEST_CASE("structural ops differentiate correctly") {
    Fixture f;
    auto& a = f.p("a", 4, 3);
    auto& b = f.p("b", 2, 3);
    auto& c = f.p("c", 4, 2);
    CHECK(full_check([&](ad::Tape& t) {
        const ad::Var parts[] = {t.param(a), t.param(b)};
        return ad::weighted_sum(ad::concat_rows(parts), weights(6, 3, 4));
    }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) {
        const ad::Var parts[] = {t.param(a), t.param(c)};
        return ad::weighted_sum(ad::concat_cols(parts), weights(4, 5, 5));
    }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::slice_rows(t.param(a), 1, 2), weights(2, 3, 6)); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::slice_cols(t.param(a), 1, 2), weights(4, 2, 7)); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::gather_rows(t.param(a), {0, 0, 3, 1, 3}), weights(5, 3, 8)); }, f.store) <= 1e-7);
    CHECK(full_check([&](ad::Tape& t) { return ad::weighted_sum(ad::segment_mean(t.param(a), {0, 0, 1, 1}, 2), weights(2, 3, 9)); }, f.store) <= 1e-7);
}

TEST_CASE("values of basic ops") {
    ad::Tape t;
    const Matrix x = Rng(1).normal_matrix(3, 4);
    CHECK(ad::layer_norm(t.constant(x)).value().rowwise().mean().cwiseAbs().maxCoeff() <= 1e-12);
    const ad::Var sm = ad::segment_mean(t.constant(x), {1, 0, 1}, 2);
    CHECK((sm.value().row(1) - (x.row(0) + x.row(2)) / 2).norm() <= 1e-14);
    const ad::Var gr = ad::gather_rows(t.constant(x), {2, 2});
    CHECK(gr.value().row(1) == x.row(2));
}

TEST_CASE("frozen parameters and constants record no gradient path") {
    ad::ParamStore store;
    Rng rng(3);
    auto& frozen = store.add("frozen", rng.normal_matrix(3, 3));
    auto& live = store.add("live", rng.normal_matrix(3, 3));
    frozen.frozen = true;

    ad::Tape t;
    const ad::Var x = t.constant(rng.normal_matrix(2, 3));
    const ad::Var h = ad::gelu(ad::matmul(x, t.param(frozen)));
    CHECK_FALSE(h.requires_grad());
    CHECK(t.recorded_ops() == 0);
    const ad::Var y = ad::sum(ad::matmul(h, t.param(live)));
    CHECK(y.requires_grad());
    t.backward(y);
    CHECK(t.param_grad(frozen) == nullptr);
    REQUIRE(t.param_grad(live) != nullptr);
    CHECK(t.param_grad(live)->allFinite());

    ad::Tape nograd(false);
    const ad::Var z = ad::sum(ad::matmul(nograd.constant(Matrix::Ones(1, 3)), nograd.param(live)));
    CHECK_FALSE(z.requires_grad());
    CHECK(nograd.recorded_ops() == 0);
}

TEST_CASE("parameter leaves are shared and gradients accumulate") {
    ad::ParamStore store;
    auto& w = store.add("w", Matrix::Constant(1, 1, 2.0));
    ad::Tape t;
    const ad::Var a = t.param(w), b = t.param(w);
    CHECK(a.id == b.id);
    t.backward(ad::mul(a, b));  // d(w^2)/dw = 2w
    CHECK((*t.param_grad(w))(0, 0) == 4.0);

    ad::Gradients g({&w});
    g.collect(t, 0.5);
    g.collect(t, 0.5);
    CHECK(g[0](0, 0) == 4.0);
    CHECK(g.all_finite());
    CHECK(g.norm() == 4.0);
    g.zero();
    CHECK(g[0](0, 0) == 0.0);
}

TEST_CASE("parameter store bookkeeping") {
    ad::ParamStore s;
    s.add("a", Matrix::Zero(2, 3));
    s.add("b", Matrix::Zero(1, 4));
    CHECK(s.count_scalars() == 10);
    CHECK(s.find("b") != nullptr);
    CHECK(s.find("c") == nullptr);
    CHECK_THROWS(s.add("a", Matrix::Zero(1, 1)));
    s.set_frozen(true);
    CHECK(s.frozen());
    CHECK(s.trainable().empty());
}

TEST_CASE("dense layer zero init and timestep features") {
    ad::ParamStore s;
    Rng rng(1);
    const Dense d = make_dense(s, "d", 3, 4, rng, InitSpec{0.02, true});
    ad::Tape t;
    CHECK(d(t.constant(Matrix::Ones(2, 3))).value().isZero(0.0));
    const Matrix f = sinusoidal_features(0.0, 8);
    CHECK(f.cols() == 8);
    CHECK(f.leftCols(4).isOnes(0.0));
    CHECK(f.rightCols(4).isZero(0.0));
}
