// SPDX-License-Identifier: Apache-2.0
#include "avlink/pipeline.hpp"

#include "avlink/io.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <mutex>

namespace avlink {

namespace {
constexpr const char* kMod = "pipeline";
}  // namespace

Dataset train_split(const RunConfig& cfg) {
    return generate_dataset(cfg.data, cfg.seed, static_cast<std::size_t>(cfg.n_train));
}

Dataset eval_split(const RunConfig& cfg) {
    return generate_dataset(cfg.data, cfg.seed, static_cast<std::size_t>(cfg.n_eval), kEvalIndexOffset);
}

TrainConfig stage_train_config(const RunConfig& cfg, Stage stage) {
    const bool base = stage == Stage::base_audio || stage == Stage::base_video;
    TrainConfig t = base ? cfg.base_train : cfg.fusion_train;
    t.seed = derive_seed(cfg.seed ^ t.seed, Stream::init, static_cast<std::uint64_t>(stage));
    return t;
}

Stage fusion_stage(const FusionConfig& f) {
    if (f.shared_params_across_tasks) return Stage::fusion_shared;
    return f.direction == Direction::v2a ? Stage::fusion_v2a : Stage::fusion_a2v;
}

BaseTrainResult run_train_base(const RunConfig& cfg, Modality m, const EncodedDataset& data, const TrainHooks& hooks) {
    const BackboneConfig& b = m == Modality::audio ? cfg.audio : cfg.video;
    return train_base(b, data, stage_train_config(cfg, m == Modality::audio ? Stage::base_audio : Stage::base_video), hooks);
}

FusionTrainResult run_train_fusion(const RunConfig& cfg, const FusionConfig& f, std::shared_ptr<const Backbone> audio,
                                   std::shared_ptr<const Backbone> video, const EncodedDataset& data,
                                   const TrainHooks& hooks) {
    return train_fusion(std::move(audio), std::move(video), f, data, stage_train_config(cfg, fusion_stage(f)), hooks);
}

GenerateOptions generate_options(const RunConfig& cfg, std::optional<Real> t_cond) {
    GenerateOptions o;
    o.guidance = cfg.infer.guidance;
    o.t_cond = t_cond ? t_cond : cfg.infer.t_cond;
    o.resample_cond_noise = cfg.infer.resample_cond_noise;
    return o;
}

Generated generate_for(const LinkedModel& model, const RunConfig& cfg, const AVSample& clip, const GenerateOptions& opts,
                       std::uint64_t seed) {
    const Codec codec{cfg.data};
    if (model.direction() == Direction::v2a)
        return generate(model, codec.video(clip), codec.audio_layout(), clip.audio_prompt, clip.video_prompt, opts, seed);
    return generate(model, codec.audio(clip), codec.video_layout(), clip.video_prompt, clip.audio_prompt, opts, seed);
}

SampleScore score_generated(const RunConfig& cfg, Direction dir, const AVSample& clip, const TokenSequence& generated) {
    const Codec codec{cfg.data};
    SampleScore s;
    s.reference = clip.events.size();
    if (dir == Direction::v2a) {
        const auto wave = codec.decode_audio(generated);
        const auto onsets = detect_onsets(wave, cfg.data.audio_sample_rate, cfg.eval.detector.threshold, cfg.eval.detector.refractory);
        s.detected = onsets.size();
        s.score = onset_accuracy(onsets, clip.events, cfg.onset_tolerance()).accuracy;
    } else {
        const VideoFrames v = codec.decode_video(generated);
        const Real thr = 0.5 * signature_energy(cfg.data);
        s.detected = lit_frames(v, thr).size();
        s.score = alignment_score_video(v, clip.events, cfg.data.fps, thr);
    }
    return s;
}

EvalSummary evaluate(const LinkedModel& model, const RunConfig& cfg, const Dataset& clips, const EvalOptions& opts) {
    const int n = opts.samples < 0 ? static_cast<int>(clips.samples.size())
                                   : std::min(opts.samples, static_cast<int>(clips.samples.size()));
    if (n < 1) throw ContractError(kMod, "evaluation needs at least one clip");
    const Direction dir = model.direction();
    const GenerateOptions gopts = generate_options(cfg, opts.t_cond);
    std::vector<SampleScore> scores(static_cast<std::size_t>(n));
    std::mutex cb_mutex;
    parallel_for(n, cfg.eval.threads, [&](int i) {
        const AVSample& clip = clips.samples[static_cast<std::size_t>(i)];
        const Generated g = generate_for(model, cfg, clip, gopts, derive_seed(cfg.seed, Stream::eval, static_cast<std::uint64_t>(i)));
        scores[static_cast<std::size_t>(i)] = score_generated(cfg, dir, clip, g.tokens);
        if (opts.on_sample) {
            std::lock_guard<std::mutex> lock(cb_mutex);
            opts.on_sample(i, g);
        }
    });

    EvalSummary out;
    out.direction = dir;
    out.metric = dir == Direction::v2a ? "onset_acc" : "video_alignment";
    out.samples = n;
    std::vector<std::vector<Real>> refs;
    for (int i = 0; i < n; ++i) {
        const SampleScore& s = scores[static_cast<std::size_t>(i)];
        out.per_sample.push_back(s.score);
        out.score += s.score;
        out.reference_events += s.reference;
        out.detected_events += s.detected;
        refs.push_back(clips.samples[static_cast<std::size_t>(i)].events);
    }
    out.score /= n;
    if (opts.baseline) {
        const std::uint64_t seed = derive_seed(cfg.seed, Stream::eval, 0xba5e);
        out.baseline = dir == Direction::v2a
                           ? random_onset_baseline(refs, cfg.data, cfg.onset_tolerance(), cfg.eval.baseline_trials, seed)
                           : random_frame_baseline(refs, cfg.data, cfg.eval.baseline_trials, seed);
    }
    return out;
}

std::vector<SweepRow> run_sweep(const LinkedModel& model, const RunConfig& cfg, const Dataset& clips) {
    EvalOptions o;
    o.samples = cfg.eval.sweep_samples;
    o.baseline = false;
    return sweep_t_cond(cfg.eval.sweep_grid, [&](Real t) {
        o.t_cond = t;
        return evaluate(model, cfg, clips, o).score;
    });
}

nlohmann::json to_json(const EvalSummary& s) {
    return nlohmann::json{{"direction", to_string(s.direction)},
                          {"metric", s.metric},
                          {"score", s.score},
                          {"baseline", s.baseline},
                          {"samples", s.samples},
                          {"reference_events", s.reference_events},
                          {"detected_events", s.detected_events},
                          {"per_sample", s.per_sample}};
}

// ---- RunDir ------------------------------------------------------------------------------

std::filesystem::path RunDir::default_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("AVLINK_RUN_ROOT"); env && *env) return env;
    return "runs";
}

RunDir RunDir::create(const std::filesystem::path& root, const std::string& command, const RunConfig& cfg) {
    const std::string digest = config_digest(cfg);
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    const std::string base = std::string(stamp) + "-" + digest.substr(0, 8) + "-" + command;

    std::filesystem::create_directories(root);
    RunDir d;
    for (int k = 0;; ++k) {
        d.path_ = root / (k == 0 ? base : base + "." + std::to_string(k));
        if (std::filesystem::create_directory(d.path_)) break;
        if (k > 1000) throw Error(kMod, "cannot create a run directory under " + root.string());
    }
    write_file_atomic(d.file("config.json"), nlohmann::json(cfg).dump(2) + "\n");
    write_file_atomic(d.file("digest.txt"), "config " + digest + "\n");
    d.log_ = std::make_shared<std::ofstream>(d.file("run.log"));
    return d;
}

void RunDir::log(const std::string& line) {
    if (log_) *log_ << line << '\n' << std::flush;
}

void RunDir::record_digest(const std::string& name) {
    const std::string hex = to_hex(sha256(read_file(file(name), kMod)));
    std::ofstream os(file("digest.txt"), std::ios::app);
    os << name << ' ' << hex << '\n';
}

}  // namespace avlink
