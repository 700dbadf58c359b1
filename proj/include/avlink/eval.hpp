// SPDX-License-Identifier: Apache-2.0
//
// Temporal alignment metrics on synthetic clips, the gradient checker, and
// CSV/SVG reporting for ablations and the conditioning-time sweep.

#pragma once

#include "avlink/autodiff.hpp"
#include "avlink/backbone.hpp"
#include "avlink/data.hpp"
#include "avlink/infer.hpp"

#include <filesystem>
#include <functional>

namespace avlink {

struct OnsetReport {
    std::vector<Real> detected;
    std::vector<Real> reference;
    Real tolerance = 0.0;
    Real accuracy = 0.0;
    std::vector<std::pair<Real, Real>> matched;  // (reference, detected)
    std::size_t false_positives = 0;
};

// Rising edges of |x| through threshold; a new onset needs `refractory` seconds since the previous one.
std::vector<Real> detect_onsets(const std::vector<Real>& wave, Real sample_rate, Real threshold, Real refractory);

// Walks references in time order and pairs each with the earliest unmatched detection within
// +-tolerance. accuracy = |matched| / max(|reference|, 1).
OnsetReport onset_accuracy(std::vector<Real> detected, std::vector<Real> reference, Real tolerance);

struct DetectorConfig {
    Real threshold = 0.5;
    Real refractory = 0.25;  // seconds; below the minimum event spacing
};

// One audio token (1 / eta_a seconds).
inline Real default_onset_tolerance(const DataGenConfig& cfg) { return 1.0 / cfg.audio_token_rate; }

// Fraction of reference events whose frame holds visual energy (mean positive intensity)
// of at least half the clean signature's.
Real alignment_score_video(const VideoFrames& video, const std::vector<Real>& events, Real fps, Real energy_threshold);
Real signature_energy(const DataGenConfig& cfg);

// Expected Onset ACC of detections placed uniformly at random on the audio sample grid,
// with as many detections as references, estimated by Monte Carlo.
Real random_onset_baseline(const std::vector<std::vector<Real>>& references, const DataGenConfig& cfg, Real tolerance,
                           int trials, std::uint64_t seed);

// Video counterpart: as many frames lit as there are events, chosen uniformly without replacement.
Real random_frame_baseline(const std::vector<std::vector<Real>>& references, const DataGenConfig& cfg, int trials,
                           std::uint64_t seed);

// Frames whose mean positive intensity reaches the threshold.
std::vector<int> lit_frames(const VideoFrames& video, Real energy_threshold);

// Numeric derivatives extrapolate central differences from an initial step eps (Ridders).
struct GradCheckOptions {
    Real eps = 1e-3;
    int per_param = 6;       // entries sampled per parameter tensor
    std::uint64_t seed = 7;
    bool inject_fault = false;  // add 1 to one analytic gradient entry
    Real floor = 1e-6;       // denominators below this are treated as this
};

struct GradCheckReport {
    Real max_rel_error = 0.0;
    std::string worst_param;
    Index worst_index = -1;
    Real worst_analytic = 0.0;
    Real worst_numeric = 0.0;
    std::size_t checked = 0;
};

// fn builds a scalar (1x1) output on the tape; parameters are perturbed in place and restored.
GradCheckReport grad_check(const std::function<ad::Var(ad::Tape&)>& fn, const std::vector<ad::Parameter*>& params,
                           const GradCheckOptions& opts = {});

// ---- reporting ------------------------------------------------------------------------

struct AblationRow {
    std::string group;    // e.g. "timestep", "arrangement", "injection", "task_params"
    std::string variant;
    std::string direction;
    std::string metric;
    Real score = 0.0;
    Real baseline = 0.0;
    int samples = 0;
};

inline const char* kAblationHeader = "group,variant,direction,metric,score,baseline,samples";
inline const char* kSweepHeader = "t_cond,score";

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
// Line plot of the sweep as a standalone SVG.
void write_sweep_svg(const std::filesystem::path& path, const std::vector<SweepRow>& rows, const std::string& title);

}  // namespace avlink
