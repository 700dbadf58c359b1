// SPDX-License-Identifier: Apache-2.0
#include "avlink/layers.hpp"

#include <cmath>

namespace avlink {

ad::Var Dense::operator()(ad::Var x) const {
    ad::Tape& t = *x.tape;
    return ad::linear(x, t.param(*weight), t.param(*bias));
}

Dense make_dense(ad::ParamStore& store, const std::string& name, Index in, Index out, Rng& rng, InitSpec init) {
    Matrix w = Matrix::Zero(in, out);
    if (!init.zero)
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.truncated_normal(init.weight_std);
    Dense d;
    d.weight = &store.add(name + ".weight", std::move(w));
    d.bias = &store.add(name + ".bias", Matrix::Zero(1, out));
    return d;
}

Matrix sinusoidal_features(Real t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ContractError("backbone", "sinusoidal width must be even and >= 2");
    const int half = dim / 2;
    Matrix f(1, dim);
    for (int i = 0; i < half; ++i) {
        const Real freq = std::exp(-std::log(10000.0) * static_cast<Real>(i) / static_cast<Real>(half));
        const Real arg = 1000.0 * t * freq;
        f(0, i) = std::cos(arg);
        f(0, half + i) = std::sin(arg);
    }
    return f;
}

ad::Var TimestepEmbedder::operator()(ad::Tape& tape, Real t) const {
    ad::Var f = tape.constant(sinusoidal_features(t, freq_dim));
    return fc2(ad::silu(fc1(f)));
}

TimestepEmbedder make_timestep_embedder(ad::ParamStore& store, const std::string& name, int freq_dim, int dim,
                                        Rng& rng) {
    TimestepEmbedder e;
    e.freq_dim = freq_dim;
    e.fc1 = make_dense(store, name + ".fc1", freq_dim, dim, rng);
    e.fc2 = make_dense(store, name + ".fc2", dim, dim, rng);
    return e;
}

ad::Var modulate(ad::Var x, ad::Var shift, ad::Var scale) {
    return ad::add_row(ad::mul_one_plus_row(x, scale), shift);
}

ad::Var AttentionParams::queries(ad::Var x, const Matrix* angles) const {
    ad::Var r = ad::head_scale(ad::head_l2norm(q(x), heads), x.tape->param(*q_scale), heads);
    return angles ? ad::rope(r, *angles, heads) : r;
}

ad::Var AttentionParams::keys(ad::Var x, const Matrix* angles) const {
    ad::Var r = ad::head_scale(ad::head_l2norm(k(x), heads), x.tape->param(*k_scale), heads);
    return angles ? ad::rope(r, *angles, heads) : r;
}

ad::Var AttentionParams::values(ad::Var x) const { return v(x); }

ad::Var AttentionParams::forward(ad::Var xq, ad::Var xkv, const Matrix* q_angles, const Matrix* k_angles) const {
    return o(ad::attention(queries(xq, q_angles), keys(xkv, k_angles), values(xkv), heads));
}

AttentionParams make_attention(ad::ParamStore& store, const std::string& name, Index q_in, Index kv_in, Index width,
                               int heads, Rng& rng) {
    if (width % heads != 0) throw ContractError("backbone", name + ": width not divisible by heads");
    AttentionParams a;
    a.heads = heads;
    a.q = make_dense(store, name + ".q", q_in, width, rng);
    a.k = make_dense(store, name + ".k", kv_in, width, rng);
    a.v = make_dense(store, name + ".v", kv_in, width, rng);
    a.o = make_dense(store, name + ".o", width, q_in, rng);
    const Real s = std::sqrt(static_cast<Real>(width / heads));
    a.q_scale = &store.add(name + ".q_scale", Matrix::Constant(1, heads, s));
    a.k_scale = &store.add(name + ".k_scale", Matrix::Constant(1, heads, s));
    return a;
}

Mlp make_mlp(ad::ParamStore& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng) {
    return Mlp{make_dense(store, name + ".fc1", in, hidden, rng), make_dense(store, name + ".fc2", hidden, out, rng)};
}

void check_finite(const ad::Var& v, const char* module, const std::string& where) {
    if (!v.value().allFinite()) throw NumericError(module, "non-finite activation in " + where);
}

}  // namespace avlink
