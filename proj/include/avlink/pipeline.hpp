// SPDX-License-Identifier: Apache-2.0
//
// Workflow steps shared by the command-line tool and the end-to-end checks:
// dataset splits, per-stage seeds, evaluation over held-out clips, and run
// directories.

#pragma once

#include "avlink/config.hpp"

#include <filesystem>
#include <fstream>
#include <functional>

namespace avlink {

// Held-out clips are drawn from a disjoint range of per-sample seed indices.
inline constexpr std::uint64_t kEvalIndexOffset = std::uint64_t{1} << 32;

enum class Stage : std::uint64_t { base_audio = 1, base_video = 2, fusion_v2a = 3, fusion_a2v = 4, fusion_shared = 5 };

Dataset train_split(const RunConfig& cfg);
Dataset eval_split(const RunConfig& cfg);

// Training settings of one stage; its seed is derived from the run seed and the stage.
TrainConfig stage_train_config(const RunConfig& cfg, Stage stage);
Stage fusion_stage(const FusionConfig& f);

BaseTrainResult run_train_base(const RunConfig& cfg, Modality m, const EncodedDataset& data, const TrainHooks& hooks = {});
FusionTrainResult run_train_fusion(const RunConfig& cfg, const FusionConfig& f, std::shared_ptr<const Backbone> audio,
                                   std::shared_ptr<const Backbone> video, const EncodedDataset& data,
                                   const TrainHooks& hooks = {});

GenerateOptions generate_options(const RunConfig& cfg, std::optional<Real> t_cond = std::nullopt);
// Generates the modality model.generated() for one clip, conditioned on the clip's other modality.
Generated generate_for(const LinkedModel& model, const RunConfig& cfg, const AVSample& clip, const GenerateOptions& opts,
                       std::uint64_t seed);

struct SampleScore {
    Real score = 0.0;
    std::size_t reference = 0;
    std::size_t detected = 0;  // onsets for audio, lit frames for video
};
SampleScore score_generated(const RunConfig& cfg, Direction dir, const AVSample& clip, const TokenSequence& generated);

struct EvalSummary {
    Direction direction = Direction::v2a;
    std::string metric;  // "onset_acc" or "video_alignment"
    Real score = 0.0;
    Real baseline = 0.0;  // random placement, Monte Carlo
    int samples = 0;
    std::size_t reference_events = 0;
    std::size_t detected_events = 0;
    std::vector<Real> per_sample;
};

struct EvalOptions {
    int samples = -1;  // -1: every clip
    std::optional<Real> t_cond;
    bool baseline = true;
    std::function<void(int, const Generated&)> on_sample;
};

// Sample i uses generation seed derive_seed(cfg.seed, Stream::eval, i).
EvalSummary evaluate(const LinkedModel& model, const RunConfig& cfg, const Dataset& clips, const EvalOptions& opts = {});

// Scores the first eval.sweep_samples clips at every value of eval.sweep_grid.
std::vector<SweepRow> run_sweep(const LinkedModel& model, const RunConfig& cfg, const Dataset& clips);

nlohmann::json to_json(const EvalSummary& s);

// ---- run directories ------------------------------------------------------------------

// <root>/<UTC timestamp>-<config digest prefix>-<command>, with config.json, digest.txt and run.log.
class RunDir {
public:
    static RunDir create(const std::filesystem::path& root, const std::string& command, const RunConfig& cfg);
    // --run-root if set, else $AVLINK_RUN_ROOT, else ./runs
    static std::filesystem::path default_root(const std::string& flag);

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path file(const std::string& name) const { return path_ / name; }
    void log(const std::string& line);
    // Appends "<name> <sha256>" for a file written into the run directory.
    void record_digest(const std::string& name);

private:
    std::filesystem::path path_;
    std::shared_ptr<std::ofstream> log_;
};

}  // namespace avlink
