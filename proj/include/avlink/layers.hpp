// SPDX-License-Identifier: Apache-2.0
//
// Parameterised building blocks shared by the backbone and the fusion blocks.

#pragma once

#include "avlink/autodiff.hpp"
#include "avlink/rng.hpp"

#include <string>

namespace avlink {

struct InitSpec {
    Real weight_std = 0.02;
    bool zero = false;
};

struct Dense {
    ad::Parameter* weight = nullptr;  // in x out
    ad::Parameter* bias = nullptr;    // 1 x out

    ad::Var operator()(ad::Var x) const;
    Index in() const { return weight->value.rows(); }
    Index out() const { return weight->value.cols(); }
};

Dense make_dense(ad::ParamStore& store, const std::string& name, Index in, Index out, Rng& rng, InitSpec init = {});

// Sinusoidal features of t * 1000 over log-spaced frequencies: [cos | sin], width dim (even).
Matrix sinusoidal_features(Real t, int dim);

// Sinusoidal features followed by a learned 2-layer SiLU MLP.
struct TimestepEmbedder {
    int freq_dim = 0;
    Dense fc1;
    Dense fc2;

    ad::Var operator()(ad::Tape& tape, Real t) const;
};

TimestepEmbedder make_timestep_embedder(ad::ParamStore& store, const std::string& name, int freq_dim, int dim, Rng& rng);

// x * (1 + scale) + shift, with shift/scale broadcast per row.
ad::Var modulate(ad::Var x, ad::Var shift, ad::Var scale);

// Multi-head attention with QK-normalisation (per-head L2 norm times a learned
// per-head scale, initialised to sqrt(head_dim)) and optional rotary angles.
struct AttentionParams {
    int heads = 1;
    Dense q, k, v, o;
    ad::Parameter* q_scale = nullptr;
    ad::Parameter* k_scale = nullptr;

    // Queries and keys after projection, QK-norm and rotation.
    ad::Var queries(ad::Var x, const Matrix* angles) const;
    ad::Var keys(ad::Var x, const Matrix* angles) const;
    ad::Var values(ad::Var x) const;
    ad::Var forward(ad::Var xq, ad::Var xkv, const Matrix* q_angles, const Matrix* k_angles) const;
};

AttentionParams make_attention(ad::ParamStore& store, const std::string& name, Index q_in, Index kv_in, Index width,
                               int heads, Rng& rng);

struct Mlp {
    Dense fc1;
    Dense fc2;

    ad::Var operator()(ad::Var x) const { return fc2(ad::gelu(fc1(x))); }
};

Mlp make_mlp(ad::ParamStore& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng);

void check_finite(const ad::Var& v, const char* module, const std::string& where);

}  // namespace avlink
