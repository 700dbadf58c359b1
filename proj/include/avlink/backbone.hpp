// SPDX-License-Identifier: Apache-2.0
//
// Modality-generic diffusion transformer: token embedding, rotary positions
// (1D for audio, 3D for video), adaLN-Zero blocks with QK-normalised self
// attention, text cross attention and an MLP, and a velocity head.

#pragma once

#include "avlink/autodiff.hpp"
#include "avlink/layers.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace avlink {

// Token layout of a patchified video: frames x rows x columns.
struct VideoGrid {
    int frames = 0;
    int rows = 0;
    int cols = 0;

    Index tokens() const { return static_cast<Index>(frames) * rows * cols; }
    Index tokens_per_frame() const { return static_cast<Index>(rows) * cols; }
    bool operator==(const VideoGrid&) const = default;
};

struct TokenSequence {
    Matrix data;  // T x D
    Modality modality = Modality::audio;
    Real eta = 1.0;                   // tokens per second of media time
    std::optional<VideoGrid> grid;    // video only
    Real frame_rate = 0.0;            // video only: frames per second (temporal positions per second)

    void validate() const;
    Index tokens() const { return data.rows(); }
    Index channels() const { return data.cols(); }
    // Number of distinct temporal positions (frames for video, tokens for audio).
    Index temporal_length() const;
    Index temporal_index(Index token) const;
    // Temporal positions per second.
    Real temporal_rate() const;
    // Same metadata, different payload.
    TokenSequence with_data(Matrix d) const;
};

// Dense video clip, layout [F, H, W, C] row-major.
struct VideoFrames {
    int frames = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<Real> data;

    VideoFrames() = default;
    VideoFrames(int f, int h, int w, int c) : frames(f), height(h), width(w), channels(c), data(std::size_t(f) * h * w * c, 0.0) {}
    Real& at(int f, int y, int x, int c) { return data[((std::size_t(f) * height + y) * width + x) * channels + c]; }
    Real at(int f, int y, int x, int c) const { return data[((std::size_t(f) * height + y) * width + x) * channels + c]; }
    bool operator==(const VideoFrames&) const = default;
};

// Tokens ordered frame-major, then row, then column; token channels ordered (patch row, patch col, channel).
TokenSequence patchify_video(const VideoFrames& frames, int patch, Real fps);
VideoFrames unpatchify_video(const TokenSequence& tokens, int patch, int channels);

// Rotates consecutive channel pairs of x (T x Dh) by angles (T x Dh/2).
Matrix rope_rotate(const Matrix& x, const Matrix& angles);
// angle(n, k) = position(n) * theta_base^(-2k / head_dim)
Matrix rope_angles_1d(const Eigen::VectorXd& positions, Real theta_base, int head_dim);
// Channel pairs split into three equal contiguous groups for (frame, row, column).
Matrix rope_angles_3d(const VideoGrid& grid, Real theta_base, int head_dim);

struct BackboneConfig {
    Modality modality = Modality::audio;
    int n_blocks = 6;
    int hidden = 64;
    int heads = 4;
    int mlp_hidden = 256;
    int patch = 2;
    Real rope_theta_base = 10000.0;
    int text_vocab = 8;
    int text_dim = 32;
    int in_channels = 4;
    int freq_dim = 64;

    int head_dim() const { return hidden / heads; }
    void validate() const;

    static BackboneConfig toy(Modality m);
    // Appendix-scale numbers kept for reference; too large to train here.
    static BackboneConfig full_scale(Modality m);
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// Prompt token ids. std::nullopt means no text at all (cross attention is
// skipped); a dropped prompt is represented by {kNullToken}.
using Prompt = std::optional<std::vector<int>>;
inline constexpr int kNullToken = 0;
inline Prompt null_prompt() { return std::vector<int>{kNullToken}; }

struct ActivationTrace {
    std::vector<Matrix> per_block;
};

struct BlockParams {
    Dense ada;  // silu(cond) -> 9 x hidden: (shift, scale, gate) for self, cross, mlp
    AttentionParams self_attn;
    AttentionParams cross_attn;
    Mlp mlp;
};

class Backbone {
public:
    Backbone(BackboneConfig cfg, std::uint64_t seed);
    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;

    const BackboneConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    void freeze() { params_.set_frozen(true); }
    bool frozen() const { return params_.frozen(); }

    // Running state of one forward pass, shared by lockstep callers.
    struct State {
        ad::Var x;
        ad::Var cond_silu;
        std::optional<ad::Var> text;
        Matrix angles;
    };

    State begin(ad::Tape& tape, const TokenSequence& x_t, Real t, const Prompt& prompt) const;
    ad::Var block(ad::Tape& tape, int index, const State& s, ad::Var x) const;
    ad::Var head(ad::Tape& tape, const State& s, ad::Var x) const;
    ad::Var text_tokens(ad::Tape& tape, const std::vector<int>& ids) const;
    ad::Var timestep_embedding(ad::Tape& tape, Real t) const { return temb_(tape, t); }

    struct Output {
        ad::Var velocity;
        std::optional<ActivationTrace> trace;
    };
    Output forward(ad::Tape& tape, const TokenSequence& x_t, Real t, const Prompt& prompt, bool taps = false) const;
    // Convenience no-grad velocity.
    Matrix velocity(const TokenSequence& x_t, Real t, const Prompt& prompt) const;

    Matrix rope_angles(const TokenSequence& x) const;
    const BlockParams& block_params(int i) const { return blocks_[static_cast<std::size_t>(i)]; }

    // Output of the head applied straight to the embedded input (all residual branches removed).
    Matrix residual_free_output(const TokenSequence& x_t, Real t) const;

private:
    BackboneConfig cfg_;
    ad::ParamStore params_;
    Dense embed_;
    TimestepEmbedder temb_;
    ad::Parameter* text_table_ = nullptr;
    std::vector<BlockParams> blocks_;
    Dense final_ada_;  // silu(cond) -> (shift, scale)
    Dense final_out_;
};

}  // namespace avlink
