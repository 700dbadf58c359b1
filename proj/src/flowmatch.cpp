// SPDX-License-Identifier: Apache-2.0
#include "avlink/flowmatch.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace avlink::flow {

namespace {

constexpr const char* kMod = "flowmatch";

void check_shapes(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractError(kMod, std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

void FlowState::validate() const {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError(kMod, "flow time " + std::to_string(t) + " outside [0,1]");
    if (!sample.allFinite()) throw NumericError(kMod, "flow state contains non-finite values");
}

void LogitNormalParams::validate() const {
    if (!(scale >= 0.0) || !std::isfinite(location))
        throw ContractError(kMod, "logit-normal needs finite location and scale >= 0");
}

void GuidanceConfig::validate() const {
    if (steps < 1) throw ContractError(kMod, "guidance needs steps >= 1");
    if (!(weight >= 0.0)) throw ContractError(kMod, "guidance weight must be >= 0");
}

Matrix interpolate(const Matrix& x0, const Matrix& x1, Real t) {
    check_shapes(x0, x1, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError(kMod, "interpolate: t outside [0,1]");
    return t * x1 + (1.0 - t) * x0;
}

Matrix velocity_target(const Matrix& x0, const Matrix& x1) {
    check_shapes(x0, x1, "velocity_target");
    return x1 - x0;
}

Real fm_loss(const Matrix& predicted_velocity, const Matrix& x0, const Matrix& x1) {
    check_shapes(predicted_velocity, x0, "fm_loss");
    check_shapes(x0, x1, "fm_loss");
    if (!predicted_velocity.allFinite() || !x0.allFinite() || !x1.allFinite())
        throw NumericError(kMod, "fm_loss: non-finite input");
    return (predicted_velocity - (x1 - x0)).squaredNorm() / static_cast<Real>(x0.size());
}

Matrix fm_loss_grad(const Matrix& predicted_velocity, const Matrix& x0, const Matrix& x1) {
    check_shapes(predicted_velocity, x0, "fm_loss_grad");
    check_shapes(x0, x1, "fm_loss_grad");
    return (2.0 / static_cast<Real>(x0.size())) * (predicted_velocity - (x1 - x0));
}

Real sample_t(const LogitNormalParams& params, Rng& rng) {
    params.validate();
    const Real z = params.location + params.scale * rng.normal();
    const Real t = 1.0 / (1.0 + std::exp(-z));
    constexpr Real kEdge = 1e-7;
    return std::clamp(t, kEdge, 1.0 - kEdge);
}

Matrix euler_sample(const VelocityFn& velocity, const Matrix& x0, int steps, const StepObserver& observer) {
    if (steps < 1) throw ContractError(kMod, "euler_sample: steps must be >= 1");
    const Real dt = 1.0 / static_cast<Real>(steps);
    Matrix x = x0;
    for (int k = 0; k < steps; ++k) {
        const Real t = static_cast<Real>(k) / static_cast<Real>(steps);
        Matrix v = velocity(x, t);
        check_shapes(v, x, "euler_sample velocity");
        if (!v.allFinite()) {
            std::ostringstream msg;
            msg << "non-finite velocity at step " << k << " (t=" << t << ", state norm " << x.norm() << ")";
            throw NumericError(kMod, msg.str());
        }
        if (observer) observer(EulerStep{k, t, x.norm(), v.norm()});
        x += dt * v;
    }
    return x;
}

Matrix cfg_combine(const Matrix& v_cond, const Matrix& v_uncond, Real weight) {
    check_shapes(v_cond, v_uncond, "cfg_combine");
    return v_uncond + weight * (v_cond - v_uncond);
}

}  // namespace avlink::flow
