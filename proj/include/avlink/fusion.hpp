// SPDX-License-Identifier: Apache-2.0
//
// Fusion blocks linking a frozen audio backbone and a frozen video backbone.
// Each block projects both streams to a common width, mixes them with joint
// self attention under temporally aligned rotary angles, projects back and
// returns gated residual updates for both streams.

#pragma once

#include "avlink/backbone.hpp"

#include <json.hpp>

#include <memory>
#include <map>
#include <set>

namespace avlink {

enum class Arrangement { interleaved, after_block };
enum class Injection { fusion_block, concat_to_text, direct_alignment, symmetric_cross_attention, no_reinjection };
enum class Direction { v2a, a2v };

const char* to_string(Arrangement a);
const char* to_string(Injection i);
const char* to_string(Direction d);
Arrangement arrangement_from_string(const std::string& s);
Injection injection_from_string(const std::string& s);
Direction direction_from_string(const std::string& s);

inline Modality generated_modality(Direction d) { return d == Direction::v2a ? Modality::audio : Modality::video; }
inline Modality conditioning_modality(Direction d) { return d == Direction::v2a ? Modality::video : Modality::audio; }
// Conditioning time used when none is configured: 0.96 for V2A, 0.8 for A2V.
Real default_t_cond(Direction d);

struct FusionConfig {
    int n_fusion = 3;
    int common_dim = 64;
    int heads = 4;
    int mlp_hidden = 256;
    Arrangement arrangement = Arrangement::interleaved;
    int after_block = 2;  // used by Arrangement::after_block: all fusion blocks follow this backbone block
    Injection injection = Injection::fusion_block;
    Direction direction = Direction::v2a;
    bool shared_params_across_tasks = false;
    Real t_cond = 0.96;
    Real rope_theta_base = 10000.0;
    int freq_dim = 64;

    void validate() const;
    // Backbone block (1-based "after block k") each fusion block follows, non-decreasing.
    std::vector<int> placement(int n_blocks) const;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void from_json(const nlohmann::json& j, FusionConfig& c);

struct TimestepPair {
    Real t_a = 0.0;
    Real t_v = 0.0;

    void validate() const;
};

// Position of token n on the shared temporal axis: n for video frames, n * eta_v / eta_a for audio tokens.
Real tau(Index n, Modality modality, Real eta_a, Real eta_v);

// Token layout both streams share inside a fusion block.
struct FusionLayout {
    Index audio_tokens = 0;
    Index video_tokens = 0;
    Index video_tokens_per_frame = 1;
    Real eta_a = 1.0;  // audio tokens per second
    Real eta_v = 1.0;  // video frames per second

    static FusionLayout from(const TokenSequence& audio, const TokenSequence& video);
    Index video_frames() const { return video_tokens / video_tokens_per_frame; }
    // Temporal rotary angles; all tokens of one frame share the frame's position.
    Matrix audio_angles(Real theta_base, int head_dim, Real tau_offset = 0.0) const;
    Matrix video_angles(Real theta_base, int head_dim, Real tau_offset = 0.0) const;
};

struct FusionModalityParams {
    Dense ada;  // silu(cond) -> (shift1, scale1 | gate1 | shift2, scale2 | gate2)
    Dense proj;
    AttentionParams attn;
    Mlp mlp;
};

struct FusionBlockParams {
    TimestepEmbedder temb;
    Dense cond1;  // [temb(t_a) | temb(t_v)] -> D
    Dense cond2;
    FusionModalityParams audio;
    FusionModalityParams video;
};

class FusionStack {
public:
    FusionStack(FusionConfig cfg, const BackboneConfig& audio, const BackboneConfig& video, std::uint64_t seed);
    FusionStack(const FusionStack&) = delete;
    FusionStack& operator=(const FusionStack&) = delete;

    const FusionConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    int size() const { return static_cast<int>(blocks_.size()); }
    // Directions this parameter set serves (both when shared across tasks).
    const std::set<Direction>& directions() const { return directions_; }

    std::pair<ad::Var, ad::Var> block_forward(int index, ad::Var x_a, ad::Var x_v, const TimestepPair& ts,
                                              const FusionLayout& layout) const;

    // Per-head pre-softmax joint attention logits over [audio; video] tokens, for inspection.
    std::vector<Matrix> joint_logits(int index, const Matrix& x_a, const Matrix& x_v, const TimestepPair& ts,
                                     const FusionLayout& layout, Real tau_offset = 0.0) const;

    // Direct-alignment variant: pooled conditioning features mapped onto generated tokens, projected and added.
    ad::Var align_inject(int index, Direction dir, ad::Var x_gen, ad::Var x_cond, const FusionLayout& layout) const;
    // Concat-to-text variant: one text token per conditioning temporal position.
    ad::Var conditioning_text(Direction dir, ad::Var cond_final, const FusionLayout& layout) const;

    const FusionBlockParams& block_params(int i) const { return blocks_[static_cast<std::size_t>(i)]; }

private:
    struct Prepared {
        ad::Var h_a, h_v;
        ad::Var q_a, k_a, v_a, q_v, k_v, v_v;
        ad::Var mods_a, mods_v;
    };
    Prepared prepare(int index, ad::Var x_a, ad::Var x_v, const TimestepPair& ts, const FusionLayout& layout,
                     Real tau_offset) const;

    FusionConfig cfg_;
    Index dim_a_;
    Index dim_v_;
    ad::ParamStore params_;
    std::vector<FusionBlockParams> blocks_;
    std::set<Direction> directions_;
    std::map<std::pair<int, Direction>, Dense> align_;  // (placement, direction) -> projection cond -> gen width
    std::map<Direction, Dense> cond_text_;
};

// How fusion outputs are written back to the two streams.
struct StreamPair {
    ad::Var audio;
    ad::Var video;
};
// Both streams take their fusion outputs unless the injection mode keeps the conditioning stream static.
StreamPair reinject(const StreamPair& current, const StreamPair& fused, Injection injection, Direction dir);

// Inputs seen by every backbone block, recorded for inspection.
struct LinkedTrace {
    std::vector<Matrix> audio_block_inputs;
    std::vector<Matrix> video_block_inputs;
    Index generated_text_tokens = 0;
};

class LinkedModel {
public:
    LinkedModel(std::shared_ptr<const Backbone> audio, std::shared_ptr<const Backbone> video,
                std::shared_ptr<FusionStack> fusion, Direction direction);

    Direction direction() const { return direction_; }
    Modality generated() const { return generated_modality(direction_); }
    const Backbone& audio() const { return *audio_; }
    const Backbone& video() const { return *video_; }
    const Backbone& backbone(Modality m) const { return m == Modality::audio ? *audio_ : *video_; }
    FusionStack& fusion() { return *fusion_; }
    const FusionStack& fusion() const { return *fusion_; }
    std::shared_ptr<FusionStack> fusion_ptr() const { return fusion_; }

    // Velocity of the generated modality. Conditioning input is expected to be already noised.
    ad::Var forward(ad::Tape& tape, const TokenSequence& noised_gen, const TokenSequence& noised_cond,
                    const TimestepPair& ts, const Prompt& gen_prompt, const Prompt& cond_prompt,
                    LinkedTrace* trace = nullptr) const;
    Matrix velocity(const TokenSequence& noised_gen, const TokenSequence& noised_cond, const TimestepPair& ts,
                    const Prompt& gen_prompt, const Prompt& cond_prompt) const;

    TimestepPair timesteps(Real t_gen, Real t_cond) const;

private:
    std::shared_ptr<const Backbone> audio_;
    std::shared_ptr<const Backbone> video_;
    std::shared_ptr<FusionStack> fusion_;
    Direction direction_;
    std::vector<int> placement_;
};

}  // namespace avlink
