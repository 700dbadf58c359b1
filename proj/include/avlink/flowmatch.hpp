// SPDX-License-Identifier: Apache-2.0
//
// Flow-matching math on linear noise->data paths:
//   X_t = t X1 + (1 - t) X0,   v = X1 - X0.

#pragma once

#include "avlink/common.hpp"
#include "avlink/rng.hpp"

#include <functional>

namespace avlink::flow {

struct FlowState {
    Matrix sample;
    Real t = 0.0;

    void validate() const;
};

struct LogitNormalParams {
    Real location = 0.0;
    Real scale = 1.0;

    void validate() const;
};

struct GuidanceConfig {
    Real weight = 5.0;
    int steps = 64;

    void validate() const;
};

Matrix interpolate(const Matrix& x0, const Matrix& x1, Real t);
Matrix velocity_target(const Matrix& x0, const Matrix& x1);

// Mean squared error between the predicted velocity and X1 - X0, averaged over all elements.
Real fm_loss(const Matrix& predicted_velocity, const Matrix& x0, const Matrix& x1);
// d fm_loss / d predicted_velocity
Matrix fm_loss_grad(const Matrix& predicted_velocity, const Matrix& x0, const Matrix& x1);

// sigmoid(z), z ~ N(location, scale^2). Clamped away from {0, 1} so the result stays in the open interval.
Real sample_t(const LogitNormalParams& params, Rng& rng);

using VelocityFn = std::function<Matrix(const Matrix& x, Real t)>;

struct EulerStep {
    int index;
    Real t;
    Real state_norm;
    Real velocity_norm;
};
using StepObserver = std::function<void(const EulerStep&)>;

// Left-endpoint Euler on t_k = k / steps, k = 0..steps-1; returns the state at t = 1.
Matrix euler_sample(const VelocityFn& velocity, const Matrix& x0, int steps, const StepObserver& observer = {});

// v_uncond + weight (v_cond - v_uncond)
Matrix cfg_combine(const Matrix& v_cond, const Matrix& v_uncond, Real weight);

}  // namespace avlink::flow
