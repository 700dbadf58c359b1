// SPDX-License-Identifier: Apache-2.0
//
// AdamW, the warmup schedule, and the two training loops: base backbones on
// one modality, and fusion blocks over two frozen backbones.

#pragma once

#include "avlink/checkpoint.hpp"
#include "avlink/data.hpp"
#include "avlink/flowmatch.hpp"
#include "avlink/fusion.hpp"

#include <functional>
#include <memory>

namespace avlink {

struct AdamWConfig {
    Real lr = 3e-4;
    Real beta1 = 0.9;
    Real beta2 = 0.99;
    Real eps = 1e-8;
    Real weight_decay = 0.01;
};

// Decoupled weight decay, bias-corrected moments:
//   p <- p (1 - lr wd);  m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   p <- p - lr mhat / (sqrt(vhat) + eps)
class AdamW {
public:
    AdamW(std::vector<ad::Parameter*> params, AdamWConfig cfg);

    // Returns false (and leaves everything untouched) when a gradient is non-finite.
    bool step(const ad::Gradients& grads, Real lr);
    long steps_taken() const { return t_; }
    const std::vector<ad::Parameter*>& params() const { return params_; }

private:
    std::vector<ad::Parameter*> params_;
    AdamWConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long t_ = 0;
};

// Linear warmup from 0 to lr over warmup steps, constant afterwards.
Real lr_schedule(long step, Real lr, long warmup);

enum class TCondMode { fixed, uniform };
const char* to_string(TCondMode m);
TCondMode t_cond_mode_from_string(const std::string& s);

struct TrainConfig {
    AdamWConfig optim;
    long warmup_steps = 200;
    long total_steps = 2000;
    int batch = 8;
    flow::LogitNormalParams t_dist_base{0.0, 1.0};
    flow::LogitNormalParams t_dist_fusion{-1.0, 1.0};
    Real drop_text_base = 0.10;
    Real drop_gen_prompt = 0.50;
    Real drop_cond_prompt = 0.20;
    TCondMode t_cond_mode = TCondMode::fixed;
    std::uint64_t seed = 0;
    int threads = 1;
    long checkpoint_every = 0;  // 0: no intermediate checkpoints

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct BaseLogRow {
    long step;
    Real loss;
    Real lr;
    int dropped_text;
    bool skipped;
};

struct FusionLogRow {
    long step;
    Direction direction;
    Real loss;
    Real lr;
    Real t_gen_mean;
    Real t_cond_mean;
    int dropped_gen;
    int dropped_cond;
    int dropped_both;
    bool skipped;
};

struct TrainHooks {
    std::function<void(const std::string&)> log;
    // Called after every optimizer step with the 1-based step count.
    std::function<void(long)> on_step;
    // Called every TrainConfig::checkpoint_every steps.
    std::function<void(long, const Backbone&)> base_checkpoint;
    std::function<void(long, const FusionStack&)> fusion_checkpoint;
};

struct BaseTrainResult {
    std::unique_ptr<Backbone> model;
    std::vector<BaseLogRow> log;
    long dropped_total = 0;
    long draws_total = 0;
};

// Encoded training pairs, computed once per dataset.
struct EncodedDataset {
    std::vector<TokenSequence> audio;
    std::vector<TokenSequence> video;
    std::vector<Prompt> audio_prompt;
    std::vector<Prompt> video_prompt;
    std::size_t size() const { return audio.size(); }
    const TokenSequence& tokens(Modality m, std::size_t i) const { return m == Modality::audio ? audio[i] : video[i]; }
    const Prompt& prompt(Modality m, std::size_t i) const { return m == Modality::audio ? audio_prompt[i] : video_prompt[i]; }
};
EncodedDataset encode_dataset(const Dataset& d);

// Epoch-wise shuffled index stream; reshuffles when exhausted.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed);
    std::size_t next();

private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    Rng rng_;
};

BaseTrainResult train_base(const BackboneConfig& model_cfg, const EncodedDataset& data, const TrainConfig& cfg,
                           const TrainHooks& hooks = {});

struct FusionTrainResult {
    std::shared_ptr<FusionStack> fusion;
    std::vector<FusionLogRow> log;
    Digest audio_params_before{}, audio_params_after{};
    Digest video_params_before{}, video_params_after{};
    std::vector<Real> t_cond_draws;
};

// Backbones must be frozen. Throws if either backbone's parameters change.
FusionTrainResult train_fusion(std::shared_ptr<const Backbone> audio, std::shared_ptr<const Backbone> video,
                               const FusionConfig& fusion_cfg, const EncodedDataset& data, const TrainConfig& cfg,
                               const TrainHooks& hooks = {}, std::shared_ptr<FusionStack> init = nullptr);

// Conditioning time of one training draw.
Real draw_t_cond(const FusionConfig& f, Direction dir, TCondMode mode, Rng& rng);

void write_base_log(const std::filesystem::path& path, const std::vector<BaseLogRow>& rows);
void write_fusion_log(const std::filesystem::path& path, const std::vector<FusionLogRow>& rows);

}  // namespace avlink
