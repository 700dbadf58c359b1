// SPDX-License-Identifier: Apache-2.0
#include "avlink/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

namespace avlink {

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    const int workers = std::min(threads, n);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

namespace {

constexpr const char* kMod = "train";

void say(const TrainHooks& h, const std::string& msg) {
    if (h.log) h.log(msg);
}

std::string fmt(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

// ---- optimizer ---------------------------------------------------------------------

AdamW::AdamW(std::vector<ad::Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const ad::Parameter* p : params_) {
        if (p->frozen) throw ContractError(kMod, "frozen parameter " + p->name + " handed to the optimizer");
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

bool AdamW::step(const ad::Gradients& grads, Real lr) {
    if (grads.size() != params_.size()) throw ContractError(kMod, "gradient list does not match optimizer parameters");
    if (!grads.all_finite()) return false;
    ++t_;
    const Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Matrix& p = params_[i]->value;
        const Matrix& g = grads[i];
        p *= 1.0 - lr * cfg_.weight_decay;
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const auto mhat = m_[i].array() / bc1;
        const auto vhat = v_[i].array() / bc2;
        p.array() -= lr * mhat / (vhat.sqrt() + cfg_.eps);
    }
    return true;
}

Real lr_schedule(long step, Real lr, long warmup) {
    if (step < 0) throw ContractError(kMod, "negative step");
    if (warmup <= 0 || step >= warmup) return lr;
    return lr * static_cast<Real>(step) / static_cast<Real>(warmup);
}

// ---- config ---------------------------------------------------------------------------

const char* to_string(TCondMode m) { return m == TCondMode::fixed ? "fixed" : "uniform"; }

TCondMode t_cond_mode_from_string(const std::string& s) {
    if (s == "fixed") return TCondMode::fixed;
    if (s == "uniform") return TCondMode::uniform;
    throw ConfigError(kMod, "unknown t_cond_mode '" + s + "' (expected fixed|uniform)");
}

void TrainConfig::validate() const {
    auto prob = [](Real p) { return p >= 0.0 && p <= 1.0; };
    if (!(optim.lr > 0.0)) throw ConfigError(kMod, "lr must be positive");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0))
        throw ConfigError(kMod, "betas must lie in [0,1)");
    if (!(optim.eps > 0.0) || optim.weight_decay < 0.0) throw ConfigError(kMod, "bad eps or weight decay");
    if (!prob(drop_text_base) || !prob(drop_gen_prompt) || !prob(drop_cond_prompt))
        throw ConfigError(kMod, "dropout probabilities must lie in [0,1]");
    if (total_steps < 1) throw ConfigError(kMod, "total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError(kMod, "warmup must lie in [0, total_steps]");
    if (batch < 1) throw ConfigError(kMod, "batch must be >= 1");
    if (threads < 1) throw ConfigError(kMod, "threads must be >= 1");
    t_dist_base.validate();
    t_dist_fusion.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr", c.optim.lr},
                       {"beta1", c.optim.beta1},
                       {"beta2", c.optim.beta2},
                       {"eps", c.optim.eps},
                       {"weight_decay", c.optim.weight_decay},
                       {"warmup_steps", c.warmup_steps},
                       {"total_steps", c.total_steps},
                       {"batch", c.batch},
                       {"t_dist_base", {{"location", c.t_dist_base.location}, {"scale", c.t_dist_base.scale}}},
                       {"t_dist_fusion", {{"location", c.t_dist_fusion.location}, {"scale", c.t_dist_fusion.scale}}},
                       {"drop_text_base", c.drop_text_base},
                       {"drop_gen_prompt", c.drop_gen_prompt},
                       {"drop_cond_prompt", c.drop_cond_prompt},
                       {"t_cond_mode", to_string(c.t_cond_mode)},
                       {"seed", c.seed},
                       {"threads", c.threads},
                       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("lr").get_to(c.optim.lr);
    j.at("beta1").get_to(c.optim.beta1);
    j.at("beta2").get_to(c.optim.beta2);
    j.at("eps").get_to(c.optim.eps);
    j.at("weight_decay").get_to(c.optim.weight_decay);
    j.at("warmup_steps").get_to(c.warmup_steps);
    j.at("total_steps").get_to(c.total_steps);
    j.at("batch").get_to(c.batch);
    j.at("t_dist_base").at("location").get_to(c.t_dist_base.location);
    j.at("t_dist_base").at("scale").get_to(c.t_dist_base.scale);
    j.at("t_dist_fusion").at("location").get_to(c.t_dist_fusion.location);
    j.at("t_dist_fusion").at("scale").get_to(c.t_dist_fusion.scale);
    j.at("drop_text_base").get_to(c.drop_text_base);
    j.at("drop_gen_prompt").get_to(c.drop_gen_prompt);
    j.at("drop_cond_prompt").get_to(c.drop_cond_prompt);
    c.t_cond_mode = t_cond_mode_from_string(j.at("t_cond_mode").get<std::string>());
    j.at("seed").get_to(c.seed);
    j.at("threads").get_to(c.threads);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
}

// ---- data plumbing -----------------------------------------------------------------------

EncodedDataset encode_dataset(const Dataset& d) {
    const Codec codec{d.config};
    EncodedDataset e;
    for (const AVSample& s : d.samples) {
        e.audio.push_back(codec.audio(s));
        e.video.push_back(codec.video(s));
        e.audio_prompt.push_back(s.audio_prompt);
        e.video_prompt.push_back(s.video_prompt);
    }
    return e;
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    if (n == 0) throw ContractError(kMod, "empty dataset");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_.engine());
}

std::size_t BatchSampler::next() {
    if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_.engine());
        pos_ = 0;
    }
    return order_[pos_++];
}

// ---- base training ------------------------------------------------------------------------

BaseTrainResult train_base(const BackboneConfig& model_cfg, const EncodedDataset& data, const TrainConfig& cfg,
                           const TrainHooks& hooks) {
    cfg.validate();
    if (data.size() == 0) throw ContractError(kMod, "empty dataset");
    const Modality m = model_cfg.modality;
    BaseTrainResult res;
    res.model = std::make_unique<Backbone>(model_cfg, cfg.seed);
    Backbone& model = *res.model;
    AdamW opt(model.params().trainable(), cfg.optim);

    BatchSampler sampler(data.size(), derive_seed(cfg.seed, Stream::batch));
    Rng noise_rng = Rng::stream(cfg.seed, Stream::gen_noise);
    Rng t_rng = Rng::stream(cfg.seed, Stream::timestep);
    Rng drop_rng = Rng::stream(cfg.seed, Stream::dropout);

    struct Item {
        std::size_t index;
        Matrix x0;
        Real t;
        bool dropped;
    };
    const int B = cfg.batch;
    for (long step = 0; step < cfg.total_steps; ++step) {
        std::vector<Item> items;
        int dropped = 0;
        for (int b = 0; b < B; ++b) {
            Item it;
            it.index = sampler.next();
            const TokenSequence& x1 = data.tokens(m, it.index);
            it.x0 = noise_rng.normal_matrix(x1.tokens(), x1.channels());
            it.t = flow::sample_t(cfg.t_dist_base, t_rng);
            it.dropped = drop_rng.bernoulli(cfg.drop_text_base);
            dropped += it.dropped;
            items.push_back(std::move(it));
        }
        res.dropped_total += dropped;
        res.draws_total += B;

        std::vector<ad::Gradients> grads(static_cast<std::size_t>(B));
        std::vector<Real> losses(static_cast<std::size_t>(B));
        parallel_for(B, cfg.threads, [&](int b) {
            const Item& it = items[static_cast<std::size_t>(b)];
            const TokenSequence& x1 = data.tokens(m, it.index);
            ad::Tape tape;
            const Prompt prompt = it.dropped ? null_prompt() : data.prompt(m, it.index);
            auto out = model.forward(tape, x1.with_data(flow::interpolate(it.x0, x1.data, it.t)), it.t, prompt);
            ad::Var loss = ad::mse(out.velocity, flow::velocity_target(it.x0, x1.data));
            tape.backward(loss);
            grads[static_cast<std::size_t>(b)] = ad::Gradients(opt.params());
            grads[static_cast<std::size_t>(b)].collect(tape, 1.0 / B);
            losses[static_cast<std::size_t>(b)] = loss.value()(0, 0);
        });
        ad::Gradients total(opt.params());
        Real loss = 0.0;
        for (int b = 0; b < B; ++b) {
            total.add(grads[static_cast<std::size_t>(b)]);
            loss += losses[static_cast<std::size_t>(b)] / B;
        }
        const Real lr = lr_schedule(step, cfg.optim.lr, cfg.warmup_steps);
        const bool ok = std::isfinite(loss) && opt.step(total, lr);
        if (!ok) say(hooks, "step " + std::to_string(step) + ": non-finite loss or gradient, update skipped");
        res.log.push_back(BaseLogRow{step, loss, lr, dropped, !ok});
        if (hooks.on_step) hooks.on_step(step + 1);
        if (hooks.base_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            hooks.base_checkpoint(step + 1, *res.model);
    }
    return res;
}

// ---- fusion training -------------------------------------------------------------------------

Real draw_t_cond(const FusionConfig& f, Direction dir, TCondMode mode, Rng& rng) {
    if (mode == TCondMode::uniform) return rng.uniform();
    return dir == f.direction ? f.t_cond : default_t_cond(dir);
}

FusionTrainResult train_fusion(std::shared_ptr<const Backbone> audio, std::shared_ptr<const Backbone> video,
                               const FusionConfig& fusion_cfg, const EncodedDataset& data, const TrainConfig& cfg,
                               const TrainHooks& hooks, std::shared_ptr<FusionStack> init) {
    cfg.validate();
    if (data.size() == 0) throw ContractError(kMod, "empty dataset");
    if (!audio || !video) throw ContractError(kMod, "fusion training needs both backbones");
    if (!audio->frozen() || !video->frozen()) throw ContractError(kMod, "backbones must be frozen before fusion training");

    FusionTrainResult res;
    res.audio_params_before = params_digest(audio->params());
    res.video_params_before = params_digest(video->params());
    res.fusion = init ? std::move(init) : std::make_shared<FusionStack>(fusion_cfg, audio->config(), video->config(), cfg.seed);
    FusionStack& fusion = *res.fusion;

    std::vector<Direction> dirs(fusion.directions().begin(), fusion.directions().end());
    std::vector<LinkedModel> linked;
    for (Direction d : dirs) linked.emplace_back(audio, video, res.fusion, d);

    AdamW opt(fusion.params().trainable(), cfg.optim);
    BatchSampler sampler(data.size(), derive_seed(cfg.seed, Stream::batch));
    Rng noise_rng = Rng::stream(cfg.seed, Stream::gen_noise);
    Rng cond_rng = Rng::stream(cfg.seed, Stream::cond_noise);
    Rng t_rng = Rng::stream(cfg.seed, Stream::timestep);
    Rng drop_rng = Rng::stream(cfg.seed, Stream::dropout);

    struct Item {
        std::size_t index;
        Matrix x0;
        Matrix eps;
        Real t_gen;
        Real t_cond;
        bool drop_gen;
        bool drop_cond;
    };
    const int B = cfg.batch;
    for (long step = 0; step < cfg.total_steps; ++step) {
        // Shared parameters alternate tasks step by step.
        const std::size_t di = dirs.size() == 1 ? 0 : static_cast<std::size_t>(step % 2);
        const LinkedModel& model = linked[di];
        const Direction dir = dirs[di];
        const Modality g = generated_modality(dir);
        const Modality c = conditioning_modality(dir);

        std::vector<Item> items;
        FusionLogRow row{step, dir, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, false};
        for (int b = 0; b < B; ++b) {
            Item it;
            it.index = sampler.next();
            const TokenSequence& x1 = data.tokens(g, it.index);
            const TokenSequence& xc = data.tokens(c, it.index);
            it.x0 = noise_rng.normal_matrix(x1.tokens(), x1.channels());
            it.eps = cond_rng.normal_matrix(xc.tokens(), xc.channels());
            it.t_gen = flow::sample_t(cfg.t_dist_fusion, t_rng);
            it.t_cond = draw_t_cond(fusion.config(), dir, cfg.t_cond_mode, t_rng);
            it.drop_gen = drop_rng.bernoulli(cfg.drop_gen_prompt);
            it.drop_cond = drop_rng.bernoulli(cfg.drop_cond_prompt);
            row.t_gen_mean += it.t_gen / B;
            row.t_cond_mean += it.t_cond / B;
            row.dropped_gen += it.drop_gen;
            row.dropped_cond += it.drop_cond;
            row.dropped_both += it.drop_gen && it.drop_cond;
            res.t_cond_draws.push_back(it.t_cond);
            items.push_back(std::move(it));
        }

        std::vector<ad::Gradients> grads(static_cast<std::size_t>(B));
        std::vector<Real> losses(static_cast<std::size_t>(B));
        parallel_for(B, cfg.threads, [&](int b) {
            const Item& it = items[static_cast<std::size_t>(b)];
            const TokenSequence& x1 = data.tokens(g, it.index);
            const TokenSequence& xc = data.tokens(c, it.index);
            ad::Tape tape;
            const Prompt gp = it.drop_gen ? null_prompt() : data.prompt(g, it.index);
            const Prompt cp = it.drop_cond ? null_prompt() : data.prompt(c, it.index);
            ad::Var v = model.forward(tape, x1.with_data(flow::interpolate(it.x0, x1.data, it.t_gen)),
                                      xc.with_data(flow::interpolate(it.eps, xc.data, it.t_cond)),
                                      model.timesteps(it.t_gen, it.t_cond), gp, cp);
            ad::Var loss = ad::mse(v, flow::velocity_target(it.x0, x1.data));
            tape.backward(loss);
            grads[static_cast<std::size_t>(b)] = ad::Gradients(opt.params());
            grads[static_cast<std::size_t>(b)].collect(tape, 1.0 / B);
            losses[static_cast<std::size_t>(b)] = loss.value()(0, 0);
        });
        ad::Gradients total(opt.params());
        for (int b = 0; b < B; ++b) {
            total.add(grads[static_cast<std::size_t>(b)]);
            row.loss += losses[static_cast<std::size_t>(b)] / B;
        }
        row.lr = lr_schedule(step, cfg.optim.lr, cfg.warmup_steps);
        const bool ok = std::isfinite(row.loss) && opt.step(total, row.lr);
        row.skipped = !ok;
        if (!ok) say(hooks, "step " + std::to_string(step) + ": non-finite loss or gradient, update skipped");
        res.log.push_back(row);
        if (hooks.on_step) hooks.on_step(step + 1);
        if (hooks.fusion_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            hooks.fusion_checkpoint(step + 1, *res.fusion);
    }

    res.audio_params_after = params_digest(audio->params());
    res.video_params_after = params_digest(video->params());
    if (res.audio_params_before != res.audio_params_after || res.video_params_before != res.video_params_after)
        throw Error(kMod, "frozen backbone parameters changed during fusion training");
    return res;
}

// ---- logs ---------------------------------------------------------------------------------------

void write_base_log(const std::filesystem::path& path, const std::vector<BaseLogRow>& rows) {
    std::string s = "step,loss,lr,dropped_text,skipped\n";
    for (const auto& r : rows)
        s += std::to_string(r.step) + "," + fmt(r.loss) + "," + fmt(r.lr) + "," + std::to_string(r.dropped_text) + "," +
             (r.skipped ? "1" : "0") + "\n";
    write_file_atomic(path, s);
}

void write_fusion_log(const std::filesystem::path& path, const std::vector<FusionLogRow>& rows) {
    std::string s = "step,direction,loss,lr,t_gen_mean,t_cond_mean,dropped_gen,dropped_cond,dropped_both,skipped\n";
    for (const auto& r : rows)
        s += std::to_string(r.step) + "," + to_string(r.direction) + "," + fmt(r.loss) + "," + fmt(r.lr) + "," +
             fmt(r.t_gen_mean) + "," + fmt(r.t_cond_mean) + "," + std::to_string(r.dropped_gen) + "," +
             std::to_string(r.dropped_cond) + "," + std::to_string(r.dropped_both) + "," + (r.skipped ? "1" : "0") + "\n";
    write_file_atomic(path, s);
}

}  // namespace avlink
