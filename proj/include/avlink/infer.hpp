// SPDX-License-Identifier: Apache-2.0
//
// Cross-modal generation: the conditioning media is noised once to the fixed
// conditioning time, the generated modality is integrated from pure noise with
// Euler steps, and every step blends conditional and unconditional velocities.

#pragma once

#include "avlink/flowmatch.hpp"
#include "avlink/fusion.hpp"

#include <filesystem>

namespace avlink {

struct GenerateOptions {
    flow::GuidanceConfig guidance;
    std::optional<Real> t_cond;       // default: 0.96 for V2A, 0.8 for A2V
    bool resample_cond_noise = false;  // draw a fresh conditioning noise every step instead of one per run
    bool verify_condition = false;     // hash the clean and noised conditioning input at every step
    bool conditional_only = false;     // skip the unconditional branch (no guidance)
    flow::StepObserver observer;
};

struct Generated {
    TokenSequence tokens;
    std::vector<flow::EulerStep> steps;
    Real t_cond = 0.0;
};

// gen_layout supplies shape and rate metadata of the generated modality; its data is ignored.
Generated generate(const LinkedModel& model, const TokenSequence& cond_clean, const TokenSequence& gen_layout,
                   const Prompt& gen_prompt, const Prompt& cond_prompt, const GenerateOptions& opts, std::uint64_t seed);

struct SweepRow {
    Real t_cond;
    Real score;
};

// Scores generation at every grid value; eval_fn(t) runs the evaluation at conditioning time t.
std::vector<SweepRow> sweep_t_cond(const std::vector<Real>& grid, const std::function<Real(Real)>& eval_fn);
std::vector<Real> default_sweep_grid();

void write_step_diagnostics(const std::filesystem::path& path, const std::vector<flow::EulerStep>& steps);

}  // namespace avlink
