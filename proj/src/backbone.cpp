// SPDX-License-Identifier: Apache-2.0
#include "avlink/backbone.hpp"

#include <cmath>

namespace avlink {

namespace {

constexpr const char* kMod = "backbone";

}  // namespace

// ---- TokenSequence ----------------------------------------------------------------

void TokenSequence::validate() const {
    if (data.rows() < 1) throw ContractError(kMod, "token sequence is empty");
    if (data.cols() < 2 || data.cols() % 2 != 0)
        throw ContractError(kMod, "token width must be even and >= 2, got " + std::to_string(data.cols()));
    if (!(eta > 0.0)) throw ContractError(kMod, "tokens-per-second must be positive");
    if (modality == Modality::video) {
        if (grid && grid->tokens() != data.rows())
            throw ContractError(kMod, "video grid holds " + std::to_string(grid->tokens()) + " tokens, data has " +
                                          std::to_string(data.rows()));
        if (!(frame_rate > 0.0)) throw ContractError(kMod, "video frame rate must be positive");
    }
}

Index TokenSequence::temporal_length() const {
    if (modality == Modality::video && grid) return grid->frames;
    return data.rows();
}

Index TokenSequence::temporal_index(Index token) const {
    if (modality == Modality::video && grid) return token / grid->tokens_per_frame();
    return token;
}

Real TokenSequence::temporal_rate() const { return modality == Modality::video ? frame_rate : eta; }

TokenSequence TokenSequence::with_data(Matrix d) const {
    TokenSequence out = *this;
    out.data = std::move(d);
    return out;
}

// ---- patchify -----------------------------------------------------------------------

TokenSequence patchify_video(const VideoFrames& v, int patch, Real fps) {
    if (patch < 1) throw ContractError(kMod, "patch must be >= 1");
    if (v.height % patch != 0 || v.width % patch != 0)
        throw ContractError(kMod, "frame " + std::to_string(v.height) + "x" + std::to_string(v.width) +
                                      " not divisible by patch " + std::to_string(patch));
    const VideoGrid grid{v.frames, v.height / patch, v.width / patch};
    const Index dim = static_cast<Index>(v.channels) * patch * patch;
    Matrix data(grid.tokens(), dim);
    for (int f = 0; f < grid.frames; ++f)
        for (int r = 0; r < grid.rows; ++r)
            for (int c = 0; c < grid.cols; ++c) {
                const Index tok = (static_cast<Index>(f) * grid.rows + r) * grid.cols + c;
                Index ch = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int k = 0; k < v.channels; ++k) data(tok, ch++) = v.at(f, r * patch + py, c * patch + px, k);
            }
    TokenSequence out;
    out.data = std::move(data);
    out.modality = Modality::video;
    out.frame_rate = fps;
    out.eta = fps * static_cast<Real>(grid.tokens_per_frame());
    out.grid = grid;
    return out;
}

VideoFrames unpatchify_video(const TokenSequence& tokens, int patch, int channels) {
    if (!tokens.grid) throw ContractError(kMod, "unpatchify needs a video grid");
    const VideoGrid& g = *tokens.grid;
    if (tokens.data.cols() != static_cast<Index>(channels) * patch * patch)
        throw ContractError(kMod, "token width does not match patch and channel count");
    VideoFrames v(g.frames, g.rows * patch, g.cols * patch, channels);
    for (int f = 0; f < g.frames; ++f)
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                const Index tok = (static_cast<Index>(f) * g.rows + r) * g.cols + c;
                Index ch = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int k = 0; k < channels; ++k) v.at(f, r * patch + py, c * patch + px, k) = tokens.data(tok, ch++);
            }
    return v;
}

// ---- rotary --------------------------------------------------------------------------

Matrix rope_rotate(const Matrix& x, const Matrix& angles) {
    if (x.cols() % 2 != 0) throw ContractError(kMod, "rope_rotate: odd channel count " + std::to_string(x.cols()));
    if (angles.rows() != x.rows() || angles.cols() != x.cols() / 2)
        throw ContractError(kMod, "rope_rotate: angles " + shape_str(angles) + " do not match " + shape_str(x));
    Matrix y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r)
        for (Index k = 0; k < x.cols() / 2; ++k) {
            const Real c = std::cos(angles(r, k));
            const Real s = std::sin(angles(r, k));
            const Real a = x(r, 2 * k);
            const Real b = x(r, 2 * k + 1);
            y(r, 2 * k) = a * c - b * s;
            y(r, 2 * k + 1) = a * s + b * c;
        }
    return y;
}

Matrix rope_angles_1d(const Eigen::VectorXd& positions, Real theta_base, int head_dim) {
    if (head_dim < 2 || head_dim % 2 != 0)
        throw ContractError(kMod, "rope head dim must be even, got " + std::to_string(head_dim));
    const int pairs = head_dim / 2;
    Matrix a(positions.size(), pairs);
    for (int k = 0; k < pairs; ++k) {
        const Real freq = std::pow(theta_base, -2.0 * k / static_cast<Real>(head_dim));
        a.col(k) = positions * freq;
    }
    return a;
}

Matrix rope_angles_3d(const VideoGrid& grid, Real theta_base, int head_dim) {
    if (head_dim < 2 || head_dim % 2 != 0)
        throw ContractError(kMod, "rope head dim must be even, got " + std::to_string(head_dim));
    const int pairs = head_dim / 2;
    if (pairs % 3 != 0) {
        const int padded = (pairs / 3 + 1) * 3 * 2;
        throw ContractError(kMod, "3D rope needs head_dim/2 divisible by 3 (head_dim " + std::to_string(head_dim) +
                                      "); pad head_dim to " + std::to_string(padded));
    }
    const int group = pairs / 3;
    const Index n = grid.tokens();
    Eigen::VectorXd pf(n), pr(n), pc(n);
    for (int f = 0; f < grid.frames; ++f)
        for (int r = 0; r < grid.rows; ++r)
            for (int c = 0; c < grid.cols; ++c) {
                const Index tok = (static_cast<Index>(f) * grid.rows + r) * grid.cols + c;
                pf(tok) = f;
                pr(tok) = r;
                pc(tok) = c;
            }
    Matrix a(n, pairs);
    a.leftCols(group) = rope_angles_1d(pf, theta_base, 2 * group);
    a.middleCols(group, group) = rope_angles_1d(pr, theta_base, 2 * group);
    a.rightCols(group) = rope_angles_1d(pc, theta_base, 2 * group);
    return a;
}

// ---- config ----------------------------------------------------------------------------

void BackboneConfig::validate() const {
    if (n_blocks < 1) throw ConfigError(kMod, "n_blocks must be >= 1");
    if (patch < 1) throw ConfigError(kMod, "patch must be >= 1");
    if (heads < 1 || hidden % heads != 0) throw ConfigError(kMod, "hidden must be divisible by heads");
    if (head_dim() % 2 != 0) throw ConfigError(kMod, "per-head dim must be even");
    if (modality == Modality::video && (head_dim() / 2) % 3 != 0)
        throw ConfigError(kMod, "video backbone: head_dim/2 must be divisible by 3 for 3D rope (head_dim " +
                                    std::to_string(head_dim()) + ")");
    if (text_vocab < 1 || text_dim < 1 || mlp_hidden < 1 || in_channels < 1) throw ConfigError(kMod, "non-positive width");
    if (freq_dim < 2 || freq_dim % 2 != 0) throw ConfigError(kMod, "freq_dim must be even");
}

BackboneConfig BackboneConfig::toy(Modality m) {
    BackboneConfig c;
    c.modality = m;
    if (m == Modality::video) {
        // 3D rope needs head_dim/2 divisible by 3, which no head count of a 64-wide stream allows.
        c.hidden = 48;
        c.heads = 2;
        c.mlp_hidden = 192;
        c.in_channels = 4;
    }
    return c;
}

BackboneConfig BackboneConfig::full_scale(Modality m) {
    BackboneConfig c;
    c.modality = m;
    c.n_blocks = 24;
    c.hidden = 1024;
    c.heads = 16;
    c.mlp_hidden = 4096;
    c.patch = 2;
    c.text_dim = 1024;
    c.freq_dim = 256;
    return c;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"modality", to_string(c.modality)},
                       {"n_blocks", c.n_blocks},
                       {"hidden", c.hidden},
                       {"heads", c.heads},
                       {"mlp_hidden", c.mlp_hidden},
                       {"patch", c.patch},
                       {"rope_theta_base", c.rope_theta_base},
                       {"text_vocab", c.text_vocab},
                       {"text_dim", c.text_dim},
                       {"in_channels", c.in_channels},
                       {"freq_dim", c.freq_dim}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c.modality = modality_from_string(j.at("modality").get<std::string>());
    j.at("n_blocks").get_to(c.n_blocks);
    j.at("hidden").get_to(c.hidden);
    j.at("heads").get_to(c.heads);
    j.at("mlp_hidden").get_to(c.mlp_hidden);
    j.at("patch").get_to(c.patch);
    j.at("rope_theta_base").get_to(c.rope_theta_base);
    j.at("text_vocab").get_to(c.text_vocab);
    j.at("text_dim").get_to(c.text_dim);
    j.at("in_channels").get_to(c.in_channels);
    j.at("freq_dim").get_to(c.freq_dim);
}

// ---- Backbone --------------------------------------------------------------------------

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::stream(seed, Stream::init);
    const Index h = cfg_.hidden;
    embed_ = make_dense(params_, "embed", cfg_.in_channels, h, rng);
    temb_ = make_timestep_embedder(params_, "temb", cfg_.freq_dim, cfg_.hidden, rng);
    Matrix table(cfg_.text_vocab, cfg_.text_dim);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = rng.truncated_normal(0.02);
    text_table_ = &params_.add("text_table", std::move(table));
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string p = "block" + std::to_string(b);
        BlockParams bp;
        bp.ada = make_dense(params_, p + ".ada", h, 9 * h, rng);
        // Gate columns (2, 5, 8) start at zero: adaLN-Zero.
        for (int g : {2, 5, 8}) bp.ada.weight->value.middleCols(g * h, h).setZero();
        bp.self_attn = make_attention(params_, p + ".self", h, h, h, cfg_.heads, rng);
        bp.cross_attn = make_attention(params_, p + ".cross", h, cfg_.text_dim, h, cfg_.heads, rng);
        bp.mlp = make_mlp(params_, p + ".mlp", h, cfg_.mlp_hidden, h, rng);
        blocks_.push_back(bp);
    }
    final_ada_ = make_dense(params_, "final.ada", h, 2 * h, rng);
    final_out_ = make_dense(params_, "final.out", h, cfg_.in_channels, rng);
}

Matrix Backbone::rope_angles(const TokenSequence& x) const {
    if (cfg_.modality == Modality::video) {
        if (!x.grid) throw ContractError(kMod, "video tokens need a grid for 3D rope");
        return rope_angles_3d(*x.grid, cfg_.rope_theta_base, cfg_.head_dim());
    }
    Eigen::VectorXd pos = Eigen::VectorXd::LinSpaced(x.tokens(), 0.0, static_cast<Real>(x.tokens() - 1));
    if (x.tokens() == 1) pos.setZero();
    return rope_angles_1d(pos, cfg_.rope_theta_base, cfg_.head_dim());
}

ad::Var Backbone::text_tokens(ad::Tape& tape, const std::vector<int>& ids) const {
    if (ids.empty()) throw ContractError(kMod, "prompt must hold at least one token");
    std::vector<Index> idx;
    for (int id : ids) {
        if (id < 0 || id >= cfg_.text_vocab) throw ContractError(kMod, "prompt token " + std::to_string(id) + " out of vocabulary");
        idx.push_back(id);
    }
    return ad::gather_rows(tape.param(*text_table_), std::move(idx));
}

Backbone::State Backbone::begin(ad::Tape& tape, const TokenSequence& x_t, Real t, const Prompt& prompt) const {
    x_t.validate();
    if (x_t.modality != cfg_.modality) throw ContractError(kMod, "modality mismatch between tokens and backbone");
    if (x_t.channels() != cfg_.in_channels)
        throw ContractError(kMod, "expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                                      std::to_string(x_t.channels()));
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError(kMod, "flow time outside [0,1]");
    State s;
    s.x = embed_(tape.constant(x_t.data));
    s.cond_silu = ad::silu(temb_(tape, t));
    if (prompt) s.text = text_tokens(tape, *prompt);
    s.angles = rope_angles(x_t);
    return s;
}

ad::Var Backbone::block(ad::Tape&, int index, const State& s, ad::Var x) const {
    const BlockParams& bp = blocks_.at(static_cast<std::size_t>(index));
    const Index h = cfg_.hidden;
    ad::Var mods = bp.ada(s.cond_silu);
    auto chunk = [&](int i) { return ad::slice_cols(mods, i * h, h); };

    // Parallel branches: all three read the same normalised input.
    ad::Var xn = ad::layer_norm(x);
    ad::Var hsa = modulate(xn, chunk(0), chunk(1));
    ad::Var out = ad::add(x, ad::mul_row(bp.self_attn.forward(hsa, hsa, &s.angles, &s.angles), chunk(2)));
    if (s.text) {
        ad::Var hca = modulate(xn, chunk(3), chunk(4));
        out = ad::add(out, ad::mul_row(bp.cross_attn.forward(hca, *s.text, nullptr, nullptr), chunk(5)));
    }
    ad::Var hm = modulate(xn, chunk(6), chunk(7));
    x = ad::add(out, ad::mul_row(bp.mlp(hm), chunk(8)));
    check_finite(x, kMod, "block " + std::to_string(index));
    return x;
}

ad::Var Backbone::head(ad::Tape&, const State& s, ad::Var x) const {
    ad::Var mods = final_ada_(s.cond_silu);
    const Index h = cfg_.hidden;
    ad::Var y = modulate(ad::layer_norm(x), ad::slice_cols(mods, 0, h), ad::slice_cols(mods, h, h));
    return final_out_(y);
}

Backbone::Output Backbone::forward(ad::Tape& tape, const TokenSequence& x_t, Real t, const Prompt& prompt,
                                   bool taps) const {
    State s = begin(tape, x_t, t, prompt);
    ad::Var x = s.x;
    Output out;
    if (taps) out.trace = ActivationTrace{};
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        x = block(tape, b, s, x);
        if (taps) out.trace->per_block.push_back(x.value());
    }
    out.velocity = head(tape, s, x);
    return out;
}

Matrix Backbone::velocity(const TokenSequence& x_t, Real t, const Prompt& prompt) const {
    ad::Tape tape(false);
    return forward(tape, x_t, t, prompt).velocity.value();
}

Matrix Backbone::residual_free_output(const TokenSequence& x_t, Real t) const {
    ad::Tape tape(false);
    State s = begin(tape, x_t, t, std::nullopt);
    return head(tape, s, s.x).value();
}

}  // namespace avlink
