// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with a section per module, strict key
// checking, dotted-path overrides and a digest of the canonical form.

#pragma once

#include "avlink/data.hpp"
#include "avlink/eval.hpp"
#include "avlink/fusion.hpp"
#include "avlink/infer.hpp"
#include "avlink/train.hpp"

#include <json.hpp>

namespace avlink {

struct InferConfig {
    flow::GuidanceConfig guidance;
    std::optional<Real> t_cond;  // null: per-direction default
    bool resample_cond_noise = false;
};

struct EvalConfig {
    DetectorConfig detector;
    Real onset_tolerance = -1.0;  // negative: one audio token
    int baseline_trials = 200;
    int sweep_samples = 16;
    int threads = 1;  // clips generated in parallel
    std::vector<Real> sweep_grid = default_sweep_grid();
};

struct RunConfig {
    std::uint64_t seed = 0;
    DataGenConfig data;
    int n_train = 512;
    int n_eval = 64;
    BackboneConfig audio;
    BackboneConfig video;
    FusionConfig fusion;
    TrainConfig base_train;
    TrainConfig fusion_train;
    InferConfig infer;
    EvalConfig eval;

    void validate() const;
    Real onset_tolerance() const { return eval.onset_tolerance < 0.0 ? default_onset_tolerance(data) : eval.onset_tolerance; }

    // Desk-scale defaults used by the CLI and the end-to-end checks.
    static RunConfig desk();
};

// Backbone sizes of the desk preset (narrower than BackboneConfig::toy to fit a single CPU core).
BackboneConfig desk_backbone(Modality m, const DataGenConfig& data);

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Overlays `user` onto `base`; keys absent from `base` are rejected with the nearest valid keys.
nlohmann::json merge_strict(const nlohmann::json& base, const nlohmann::json& user);
// Applies "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
std::vector<std::string> leaf_paths(const nlohmann::json& doc);
std::vector<std::string> nearest_keys(const std::string& key, const std::vector<std::string>& candidates, std::size_t n = 3);
std::size_t edit_distance(const std::string& a, const std::string& b);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);
std::string config_digest(const RunConfig& c);

}  // namespace avlink
