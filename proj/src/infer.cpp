// SPDX-License-Identifier: Apache-2.0
#include "avlink/infer.hpp"

#include "avlink/io.hpp"

#include <cstdio>

namespace avlink {

namespace {

constexpr const char* kMod = "infer";

Digest matrix_digest(const Matrix& m) { return sha256(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Real)); }

}  // namespace

Generated generate(const LinkedModel& model, const TokenSequence& cond_clean, const TokenSequence& gen_layout,
                   const Prompt& gen_prompt, const Prompt& cond_prompt, const GenerateOptions& opts, std::uint64_t seed) {
    opts.guidance.validate();
    const Direction dir = model.direction();
    if (cond_clean.modality != conditioning_modality(dir) || gen_layout.modality != generated_modality(dir))
        throw ContractError(kMod, std::string("direction ") + to_string(dir) + " conditions on " +
                                      to_string(conditioning_modality(dir)) + " and generates " +
                                      to_string(generated_modality(dir)));
    cond_clean.validate();
    gen_layout.validate();
    const Real t_cond = opts.t_cond.value_or(default_t_cond(dir));
    if (!(t_cond >= 0.0 && t_cond <= 1.0)) throw ContractError(kMod, "t_cond outside [0,1]");

    Rng cond_rng = Rng::stream(seed, Stream::cond_noise);
    Rng gen_rng = Rng::stream(seed, Stream::sampler);
    Matrix eps = cond_rng.normal_matrix(cond_clean.tokens(), cond_clean.channels());
    TokenSequence cond_t = cond_clean.with_data(flow::interpolate(eps, cond_clean.data, t_cond));
    const Digest clean_hash = opts.verify_condition ? matrix_digest(cond_clean.data) : Digest{};
    const Digest noised_hash = opts.verify_condition ? matrix_digest(cond_t.data) : Digest{};

    const Prompt null_p = null_prompt();
    const bool need_uncond = !opts.conditional_only;
    auto velocity = [&](const Matrix& x, Real t) -> Matrix {
        if (opts.resample_cond_noise) {
            eps = cond_rng.normal_matrix(cond_clean.tokens(), cond_clean.channels());
            cond_t.data = flow::interpolate(eps, cond_clean.data, t_cond);
        } else if (opts.verify_condition) {
            if (matrix_digest(cond_clean.data) != clean_hash || matrix_digest(cond_t.data) != noised_hash)
                throw Error(kMod, "conditioning input changed during sampling at t=" + std::to_string(t));
        }
        const TokenSequence xt = gen_layout.with_data(x);
        const TimestepPair ts = model.timesteps(t, t_cond);
        Matrix vc = model.velocity(xt, cond_t, ts, gen_prompt, cond_prompt);
        if (!need_uncond) return vc;
        Matrix vu = model.velocity(xt, cond_t, ts, null_p, null_p);
        return flow::cfg_combine(vc, vu, opts.guidance.weight);
    };

    Generated out;
    out.t_cond = t_cond;
    const Matrix x0 = gen_rng.normal_matrix(gen_layout.tokens(), gen_layout.channels());
    Matrix x1 = flow::euler_sample(velocity, x0, opts.guidance.steps, [&](const flow::EulerStep& s) {
        out.steps.push_back(s);
        if (opts.observer) opts.observer(s);
    });
    out.tokens = gen_layout.with_data(std::move(x1));
    return out;
}

std::vector<Real> default_sweep_grid() { return {0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.96, 0.99, 1.0}; }

std::vector<SweepRow> sweep_t_cond(const std::vector<Real>& grid, const std::function<Real(Real)>& eval_fn) {
    if (grid.empty()) throw ContractError(kMod, "sweep grid is empty");
    std::vector<SweepRow> rows;
    for (Real t : grid) {
        if (!(t >= 0.0 && t <= 1.0)) throw ContractError(kMod, "sweep value " + std::to_string(t) + " outside [0,1]");
        rows.push_back(SweepRow{t, eval_fn(t)});
    }
    return rows;
}

void write_step_diagnostics(const std::filesystem::path& path, const std::vector<flow::EulerStep>& steps) {
    std::string s = "step,t,state_norm,velocity_norm\n";
    char buf[128];
    for (const auto& e : steps) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", e.index, e.t, e.state_norm, e.velocity_norm);
        s += buf;
    }
    write_file_atomic(path, s);
}

}  // namespace avlink
