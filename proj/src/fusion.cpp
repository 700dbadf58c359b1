// SPDX-License-Identifier: Apache-2.0
#include "avlink/fusion.hpp"

#include <array>
#include <cmath>

namespace avlink {

namespace {

constexpr const char* kMod = "fusion";

template <typename E, std::size_t N>
E enum_from(const std::string& s, const std::array<E, N>& values, const char* what) {
    for (E v : values)
        if (s == to_string(v)) return v;
    std::string valid;
    for (E v : values) valid += std::string(valid.empty() ? "" : "|") + to_string(v);
    throw ConfigError(kMod, "unknown " + std::string(what) + " '" + s + "' (expected " + valid + ")");
}

}  // namespace

const char* to_string(Arrangement a) { return a == Arrangement::interleaved ? "interleaved" : "after_block"; }

const char* to_string(Injection i) {
    switch (i) {
        case Injection::fusion_block: return "fusion_block";
        case Injection::concat_to_text: return "concat_to_text";
        case Injection::direct_alignment: return "direct_alignment";
        case Injection::symmetric_cross_attention: return "symmetric_cross_attention";
        case Injection::no_reinjection: return "no_reinjection";
    }
    return "?";
}

const char* to_string(Direction d) { return d == Direction::v2a ? "v2a" : "a2v"; }

Arrangement arrangement_from_string(const std::string& s) {
    return enum_from(s, std::array{Arrangement::interleaved, Arrangement::after_block}, "arrangement");
}

Injection injection_from_string(const std::string& s) {
    return enum_from(s,
                     std::array{Injection::fusion_block, Injection::concat_to_text, Injection::direct_alignment,
                                Injection::symmetric_cross_attention, Injection::no_reinjection},
                     "injection");
}

Direction direction_from_string(const std::string& s) {
    return enum_from(s, std::array{Direction::v2a, Direction::a2v}, "direction");
}

Real default_t_cond(Direction d) { return d == Direction::v2a ? 0.96 : 0.8; }

// ---- config ----------------------------------------------------------------------

void FusionConfig::validate() const {
    if (n_fusion < 1) throw ConfigError(kMod, "n_fusion must be >= 1");
    if (heads < 1 || common_dim % heads != 0) throw ConfigError(kMod, "common_dim must be divisible by heads");
    if ((common_dim / heads) % 2 != 0) throw ConfigError(kMod, "fusion head dim must be even");
    if (!(t_cond >= 0.0 && t_cond <= 1.0)) throw ConfigError(kMod, "t_cond must lie in [0,1]");
    if (mlp_hidden < 1 || freq_dim < 2 || freq_dim % 2 != 0) throw ConfigError(kMod, "bad fusion widths");
}

std::vector<int> FusionConfig::placement(int n_blocks) const {
    std::vector<int> out;
    if (arrangement == Arrangement::interleaved) {
        if (n_fusion > n_blocks)
            throw ConfigError(kMod, "interleaving " + std::to_string(n_fusion) + " fusion blocks needs at least as many backbone blocks");
        for (int i = 0; i < n_fusion; ++i) out.push_back((i + 1) * n_blocks / n_fusion);
    } else {
        if (after_block < 1 || after_block > n_blocks)
            throw ConfigError(kMod, "after_block must lie in [1, " + std::to_string(n_blocks) + "]");
        out.assign(static_cast<std::size_t>(n_fusion), after_block);
    }
    return out;
}

void to_json(nlohmann::json& j, const FusionConfig& c) {
    j = nlohmann::json{{"n_fusion", c.n_fusion},
                       {"common_dim", c.common_dim},
                       {"heads", c.heads},
                       {"mlp_hidden", c.mlp_hidden},
                       {"arrangement", to_string(c.arrangement)},
                       {"after_block", c.after_block},
                       {"injection", to_string(c.injection)},
                       {"direction", to_string(c.direction)},
                       {"shared_params_across_tasks", c.shared_params_across_tasks},
                       {"t_cond", c.t_cond},
                       {"rope_theta_base", c.rope_theta_base},
                       {"freq_dim", c.freq_dim}};
}

void from_json(const nlohmann::json& j, FusionConfig& c) {
    j.at("n_fusion").get_to(c.n_fusion);
    j.at("common_dim").get_to(c.common_dim);
    j.at("heads").get_to(c.heads);
    j.at("mlp_hidden").get_to(c.mlp_hidden);
    c.arrangement = arrangement_from_string(j.at("arrangement").get<std::string>());
    j.at("after_block").get_to(c.after_block);
    c.injection = injection_from_string(j.at("injection").get<std::string>());
    c.direction = direction_from_string(j.at("direction").get<std::string>());
    j.at("shared_params_across_tasks").get_to(c.shared_params_across_tasks);
    j.at("t_cond").get_to(c.t_cond);
    j.at("rope_theta_base").get_to(c.rope_theta_base);
    j.at("freq_dim").get_to(c.freq_dim);
}

void TimestepPair::validate() const {
    if (!(t_a >= 0.0 && t_a <= 1.0 && t_v >= 0.0 && t_v <= 1.0))
        throw ContractError(kMod, "timesteps must lie in [0,1]");
}

// ---- temporal alignment ------------------------------------------------------------

Real tau(Index n, Modality modality, Real eta_a, Real eta_v) {
    if (!(eta_a > 0.0 && eta_v > 0.0)) throw ContractError(kMod, "tau: token rates must be positive");
    if (n < 0) throw ContractError(kMod, "tau: negative index");
    const Real pos = static_cast<Real>(n);
    return modality == Modality::video ? pos : pos * eta_v / eta_a;
}

FusionLayout FusionLayout::from(const TokenSequence& audio, const TokenSequence& video) {
    if (audio.modality != Modality::audio || video.modality != Modality::video)
        throw ContractError(kMod, "fusion layout needs one audio and one video sequence");
    if (!video.grid) throw ContractError(kMod, "video sequence has no grid");
    FusionLayout l;
    l.audio_tokens = audio.tokens();
    l.video_tokens = video.tokens();
    l.video_tokens_per_frame = video.grid->tokens_per_frame();
    l.eta_a = audio.eta;
    l.eta_v = video.frame_rate;
    return l;
}

Matrix FusionLayout::audio_angles(Real theta_base, int head_dim, Real tau_offset) const {
    Eigen::VectorXd pos(audio_tokens);
    for (Index n = 0; n < audio_tokens; ++n) pos(n) = tau(n, Modality::audio, eta_a, eta_v) + tau_offset;
    return rope_angles_1d(pos, theta_base, head_dim);
}

Matrix FusionLayout::video_angles(Real theta_base, int head_dim, Real tau_offset) const {
    Eigen::VectorXd pos(video_tokens);
    for (Index i = 0; i < video_tokens; ++i) pos(i) = tau(i / video_tokens_per_frame, Modality::video, eta_a, eta_v) + tau_offset;
    return rope_angles_1d(pos, theta_base, head_dim);
}

// ---- FusionStack -------------------------------------------------------------------

namespace {

FusionModalityParams make_modality(ad::ParamStore& store, const std::string& name, Index dm, const FusionConfig& c,
                                   Rng& rng) {
    const Index d = c.common_dim;
    FusionModalityParams p;
    p.ada = make_dense(store, name + ".ada", d, 3 * dm + 3 * d, rng);
    p.ada.weight->value.middleCols(2 * dm, d).setZero();          // gate1
    p.ada.weight->value.middleCols(2 * dm + 3 * d, dm).setZero();  // gate2
    p.proj = make_dense(store, name + ".proj", dm, d, rng);
    p.attn = make_attention(store, name + ".attn", d, d, d, c.heads, rng);
    p.mlp = make_mlp(store, name + ".mlp", d, c.mlp_hidden, dm, rng);
    return p;
}

}  // namespace

FusionStack::FusionStack(FusionConfig cfg, const BackboneConfig& audio, const BackboneConfig& video,
                         std::uint64_t seed)
    : cfg_(cfg), dim_a_(audio.hidden), dim_v_(video.hidden) {
    cfg_.validate();
    if (audio.modality != Modality::audio || video.modality != Modality::video)
        throw ConfigError(kMod, "fusion stack needs an audio and a video backbone config");
    if (audio.n_blocks != video.n_blocks)
        throw ConfigError(kMod, "backbone depths differ (" + std::to_string(audio.n_blocks) + " vs " +
                                    std::to_string(video.n_blocks) + ")");
    cfg_.placement(audio.n_blocks);
    if (cfg_.shared_params_across_tasks)
        directions_ = {Direction::v2a, Direction::a2v};
    else
        directions_ = {cfg_.direction};

    Rng rng = Rng::stream(seed, Stream::init, 0xf5);
    const Index d = cfg_.common_dim;
    switch (cfg_.injection) {
        case Injection::fusion_block:
        case Injection::symmetric_cross_attention:
        case Injection::no_reinjection:
            for (int i = 0; i < cfg_.n_fusion; ++i) {
                const std::string p = "fusion" + std::to_string(i);
                FusionBlockParams b;
                b.temb = make_timestep_embedder(params_, p + ".temb", cfg_.freq_dim, static_cast<int>(d), rng);
                b.cond1 = make_dense(params_, p + ".cond1", 2 * d, d, rng);
                b.cond2 = make_dense(params_, p + ".cond2", d, d, rng);
                b.audio = make_modality(params_, p + ".audio", dim_a_, cfg_, rng);
                b.video = make_modality(params_, p + ".video", dim_v_, cfg_, rng);
                blocks_.push_back(std::move(b));
            }
            break;
        case Injection::direct_alignment:
            for (Direction dir : directions_)
                for (int i = 0; i < cfg_.n_fusion; ++i) {
                    const Index din = dir == Direction::v2a ? dim_v_ : dim_a_;
                    const Index dout = dir == Direction::v2a ? dim_a_ : dim_v_;
                    align_[{i, dir}] = make_dense(params_, "align" + std::to_string(i) + "." + to_string(dir), din, dout,
                                                  rng, InitSpec{0.0, true});
                }
            break;
        case Injection::concat_to_text:
            for (Direction dir : directions_) {
                const Index din = dir == Direction::v2a ? dim_v_ : dim_a_;
                const Index dout = dir == Direction::v2a ? audio.text_dim : video.text_dim;
                cond_text_[dir] = make_dense(params_, std::string("cond_text.") + to_string(dir), din, dout, rng);
            }
            break;
    }
}

FusionStack::Prepared FusionStack::prepare(int index, ad::Var x_a, ad::Var x_v, const TimestepPair& ts,
                                           const FusionLayout& layout, Real tau_offset) const {
    if (blocks_.empty()) throw ContractError(kMod, "injection mode has no fusion blocks");
    const FusionBlockParams& b = blocks_.at(static_cast<std::size_t>(index));
    if (x_a.cols() != dim_a_ || x_v.cols() != dim_v_)
        throw ContractError(kMod, "fusion input widths " + std::to_string(x_a.cols()) + "/" + std::to_string(x_v.cols()) +
                                      " do not match backbones " + std::to_string(dim_a_) + "/" + std::to_string(dim_v_));
    if (x_a.rows() != layout.audio_tokens || x_v.rows() != layout.video_tokens)
        throw ContractError(kMod, "fusion input lengths do not match the layout");
    ts.validate();
    ad::Tape& tape = *x_a.tape;
    const int dh = cfg_.common_dim / cfg_.heads;

    std::array<ad::Var, 2> te{b.temb(tape, ts.t_a), b.temb(tape, ts.t_v)};
    ad::Var cs = ad::silu(b.cond2(ad::silu(b.cond1(ad::concat_cols(te)))));

    const Matrix ang_a = layout.audio_angles(cfg_.rope_theta_base, dh, tau_offset);
    const Matrix ang_v = layout.video_angles(cfg_.rope_theta_base, dh, tau_offset);

    Prepared p;
    p.mods_a = b.audio.ada(cs);
    p.mods_v = b.video.ada(cs);
    auto project = [&](const FusionModalityParams& m, ad::Var x, ad::Var mods, Index dm) {
        return m.proj(modulate(ad::layer_norm(x), ad::slice_cols(mods, 0, dm), ad::slice_cols(mods, dm, dm)));
    };
    p.h_a = project(b.audio, x_a, p.mods_a, dim_a_);
    p.h_v = project(b.video, x_v, p.mods_v, dim_v_);
    p.q_a = b.audio.attn.queries(p.h_a, &ang_a);
    p.k_a = b.audio.attn.keys(p.h_a, &ang_a);
    p.v_a = b.audio.attn.values(p.h_a);
    p.q_v = b.video.attn.queries(p.h_v, &ang_v);
    p.k_v = b.video.attn.keys(p.h_v, &ang_v);
    p.v_v = b.video.attn.values(p.h_v);
    return p;
}

std::pair<ad::Var, ad::Var> FusionStack::block_forward(int index, ad::Var x_a, ad::Var x_v, const TimestepPair& ts,
                                                       const FusionLayout& layout) const {
    const FusionBlockParams& b = blocks_.at(static_cast<std::size_t>(index));
    Prepared p = prepare(index, x_a, x_v, ts, layout, 0.0);
    const Index d = cfg_.common_dim;

    ad::Var o_a, o_v;
    if (cfg_.injection == Injection::symmetric_cross_attention) {
        o_a = ad::attention(p.q_a, p.k_v, p.v_v, cfg_.heads);
        o_v = ad::attention(p.q_v, p.k_a, p.v_a, cfg_.heads);
    } else {
        std::array<ad::Var, 2> q{p.q_a, p.q_v}, k{p.k_a, p.k_v}, v{p.v_a, p.v_v};
        ad::Var o = ad::attention(ad::concat_rows(q), ad::concat_rows(k), ad::concat_rows(v), cfg_.heads);
        o_a = ad::slice_rows(o, 0, layout.audio_tokens);
        o_v = ad::slice_rows(o, layout.audio_tokens, layout.video_tokens);
    }

    auto finish = [&](const FusionModalityParams& m, ad::Var x, ad::Var h, ad::Var o, ad::Var mods, Index dm) {
        ad::Var h2 = ad::add(h, ad::mul_row(m.attn.o(o), ad::slice_cols(mods, 2 * dm, d)));
        ad::Var y = m.mlp(modulate(ad::layer_norm(h2), ad::slice_cols(mods, 2 * dm + d, d),
                                   ad::slice_cols(mods, 2 * dm + 2 * d, d)));
        return ad::add(x, ad::mul_row(y, ad::slice_cols(mods, 2 * dm + 3 * d, dm)));
    };
    ad::Var xa = finish(b.audio, x_a, p.h_a, o_a, p.mods_a, dim_a_);
    ad::Var xv = finish(b.video, x_v, p.h_v, o_v, p.mods_v, dim_v_);
    check_finite(xa, kMod, "fusion block " + std::to_string(index) + " (audio)");
    check_finite(xv, kMod, "fusion block " + std::to_string(index) + " (video)");
    return {xa, xv};
}

std::vector<Matrix> FusionStack::joint_logits(int index, const Matrix& x_a, const Matrix& x_v, const TimestepPair& ts,
                                              const FusionLayout& layout, Real tau_offset) const {
    ad::Tape tape(false);
    Prepared p = prepare(index, tape.constant(x_a), tape.constant(x_v), ts, layout, tau_offset);
    Matrix q(layout.audio_tokens + layout.video_tokens, cfg_.common_dim);
    Matrix k(q.rows(), q.cols());
    q << p.q_a.value(), p.q_v.value();
    k << p.k_a.value(), p.k_v.value();
    return ad::attention_logits(q, k, cfg_.heads);
}

namespace {

// Rows of the pooled conditioning sequence (one per temporal position) feeding each generated token.
struct TemporalMap {
    std::vector<Index> pool_segment;  // cond token -> cond temporal position
    Index cond_positions = 0;
    std::vector<Index> resample_segment;  // cond position -> gen position (downsampling), empty if upsampling
    std::vector<Index> gather;            // gen position -> cond position (upsampling)
    Index gen_positions = 0;
    std::vector<Index> token_position;  // gen token -> gen position
};

TemporalMap temporal_map(Direction dir, const FusionLayout& l) {
    TemporalMap m;
    const bool v2a = dir == Direction::v2a;
    const Index cond_tokens = v2a ? l.video_tokens : l.audio_tokens;
    const Index gen_tokens = v2a ? l.audio_tokens : l.video_tokens;
    const Index cond_tpf = v2a ? l.video_tokens_per_frame : 1;
    const Index gen_tpf = v2a ? 1 : l.video_tokens_per_frame;
    const Real cond_rate = v2a ? l.eta_v : l.eta_a;
    const Real gen_rate = v2a ? l.eta_a : l.eta_v;
    m.cond_positions = cond_tokens / cond_tpf;
    m.gen_positions = gen_tokens / gen_tpf;
    for (Index i = 0; i < cond_tokens; ++i) m.pool_segment.push_back(i / cond_tpf);
    for (Index i = 0; i < gen_tokens; ++i) m.token_position.push_back(i / gen_tpf);
    constexpr Real kEps = 1e-9;
    if (m.gen_positions >= m.cond_positions) {
        for (Index g = 0; g < m.gen_positions; ++g) {
            const Real t = static_cast<Real>(g) / gen_rate;
            m.gather.push_back(std::clamp<Index>(static_cast<Index>(std::floor(t * cond_rate + kEps)), 0, m.cond_positions - 1));
        }
    } else {
        for (Index c = 0; c < m.cond_positions; ++c) {
            const Real t = static_cast<Real>(c) / cond_rate;
            m.resample_segment.push_back(std::clamp<Index>(static_cast<Index>(std::floor(t * gen_rate + kEps)), 0, m.gen_positions - 1));
        }
    }
    return m;
}

}  // namespace

ad::Var FusionStack::align_inject(int index, Direction dir, ad::Var x_gen, ad::Var x_cond,
                                  const FusionLayout& layout) const {
    auto it = align_.find({index, dir});
    if (it == align_.end()) throw ContractError(kMod, "no direct-alignment projection for this placement/direction");
    const TemporalMap m = temporal_map(dir, layout);
    ad::Var pooled = ad::segment_mean(x_cond, m.pool_segment, m.cond_positions);
    ad::Var resampled = m.resample_segment.empty() ? ad::gather_rows(pooled, m.gather)
                                                   : ad::segment_mean(pooled, m.resample_segment, m.gen_positions);
    ad::Var per_token = ad::gather_rows(it->second(resampled), m.token_position);
    return ad::add(x_gen, per_token);
}

ad::Var FusionStack::conditioning_text(Direction dir, ad::Var cond_final, const FusionLayout& layout) const {
    auto it = cond_text_.find(dir);
    if (it == cond_text_.end()) throw ContractError(kMod, "no concat-to-text projection for this direction");
    const TemporalMap m = temporal_map(dir, layout);
    return it->second(ad::segment_mean(cond_final, m.pool_segment, m.cond_positions));
}

StreamPair reinject(const StreamPair& current, const StreamPair& fused, Injection injection, Direction dir) {
    if (injection != Injection::no_reinjection) return fused;
    // Conditioning stream stays a static feature extractor.
    return dir == Direction::v2a ? StreamPair{fused.audio, current.video} : StreamPair{current.audio, fused.video};
}

// ---- LinkedModel -------------------------------------------------------------------

LinkedModel::LinkedModel(std::shared_ptr<const Backbone> audio, std::shared_ptr<const Backbone> video,
                         std::shared_ptr<FusionStack> fusion, Direction direction)
    : audio_(std::move(audio)), video_(std::move(video)), fusion_(std::move(fusion)), direction_(direction) {
    if (!audio_ || !video_ || !fusion_) throw ConfigError(kMod, "linked model needs two backbones and a fusion stack");
    if (audio_->config().modality != Modality::audio || video_->config().modality != Modality::video)
        throw ConfigError(kMod, "backbone modalities swapped");
    if (audio_->config().n_blocks != video_->config().n_blocks)
        throw ConfigError(kMod, "backbone depths differ (" + std::to_string(audio_->config().n_blocks) + " vs " +
                                    std::to_string(video_->config().n_blocks) + ")");
    if (!audio_->frozen() || !video_->frozen()) throw ConfigError(kMod, "linked backbones must be frozen");
    if (!fusion_->directions().count(direction_))
        throw ConfigError(kMod, std::string("fusion parameters were not built for direction ") + to_string(direction_));
    placement_ = fusion_->config().placement(audio_->config().n_blocks);
}

TimestepPair LinkedModel::timesteps(Real t_gen, Real t_cond) const {
    return direction_ == Direction::v2a ? TimestepPair{t_gen, t_cond} : TimestepPair{t_cond, t_gen};
}

ad::Var LinkedModel::forward(ad::Tape& tape, const TokenSequence& noised_gen, const TokenSequence& noised_cond,
                             const TimestepPair& ts, const Prompt& gen_prompt, const Prompt& cond_prompt,
                             LinkedTrace* trace) const {
    if (noised_gen.modality != generated() || noised_cond.modality == generated())
        throw ContractError(kMod, std::string("direction ") + to_string(direction_) + " expects generated " +
                                      to_string(generated()) + " tokens");
    ts.validate();
    const bool v2a = direction_ == Direction::v2a;
    const TokenSequence& a_seq = v2a ? noised_gen : noised_cond;
    const TokenSequence& v_seq = v2a ? noised_cond : noised_gen;
    const Prompt& a_prompt = v2a ? gen_prompt : cond_prompt;
    const Prompt& v_prompt = v2a ? cond_prompt : gen_prompt;
    const FusionLayout layout = FusionLayout::from(a_seq, v_seq);
    const Injection inj = fusion_->config().injection;
    const int n_blocks = audio_->config().n_blocks;

    Backbone::State sa = audio_->begin(tape, a_seq, ts.t_a, a_prompt);
    Backbone::State sv = video_->begin(tape, v_seq, ts.t_v, v_prompt);
    Backbone::State& s_gen = v2a ? sa : sv;
    Backbone::State& s_cond = v2a ? sv : sa;
    if (inj == Injection::concat_to_text) {
        const Backbone& b_gen = backbone(generated());
        const Backbone& b_cond = backbone(conditioning_modality(direction_));
        ad::Var xc = s_cond.x;
        for (int b = 0; b < n_blocks; ++b) xc = b_cond.block(tape, b, s_cond, xc);
        ad::Var ctext = fusion_->conditioning_text(direction_, xc, layout);
        if (s_gen.text) {
            std::array<ad::Var, 2> parts{*s_gen.text, ctext};
            s_gen.text = ad::concat_rows(parts);
        } else {
            s_gen.text = ctext;
        }
        if (trace) trace->generated_text_tokens = s_gen.text->rows();
        ad::Var xg = s_gen.x;
        for (int b = 0; b < n_blocks; ++b) {
            if (trace) (v2a ? trace->audio_block_inputs : trace->video_block_inputs).push_back(xg.value());
            xg = b_gen.block(tape, b, s_gen, xg);
        }
        return b_gen.head(tape, s_gen, xg);
    }

    StreamPair x{sa.x, sv.x};
    std::size_t fi = 0;
    for (int b = 0; b < n_blocks; ++b) {
        if (trace) {
            trace->audio_block_inputs.push_back(x.audio.value());
            trace->video_block_inputs.push_back(x.video.value());
        }
        x.audio = audio_->block(tape, b, sa, x.audio);
        x.video = video_->block(tape, b, sv, x.video);
        for (; fi < placement_.size() && placement_[fi] == b + 1; ++fi) {
            const int idx = static_cast<int>(fi);
            if (inj == Injection::direct_alignment) {
                ad::Var& gen = v2a ? x.audio : x.video;
                gen = fusion_->align_inject(idx, direction_, gen, v2a ? x.video : x.audio, layout);
            } else {
                auto [ya, yv] = fusion_->block_forward(idx, x.audio, x.video, ts, layout);
                x = reinject(x, StreamPair{ya, yv}, inj, direction_);
            }
        }
    }
    if (trace) trace->generated_text_tokens = s_gen.text ? s_gen.text->rows() : 0;
    ad::Var v_audio = audio_->head(tape, sa, x.audio);
    ad::Var v_video = video_->head(tape, sv, x.video);
    return v2a ? v_audio : v_video;
}

Matrix LinkedModel::velocity(const TokenSequence& noised_gen, const TokenSequence& noised_cond, const TimestepPair& ts,
                             const Prompt& gen_prompt, const Prompt& cond_prompt) const {
    ad::Tape tape(false);
    return forward(tape, noised_gen, noised_cond, ts, gen_prompt, cond_prompt).value();
}

}  // namespace avlink
