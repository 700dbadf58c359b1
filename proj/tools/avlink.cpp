// SPDX-License-Identifier: Apache-2.0
//
// avlink: command-line entry point. Every subcommand loads the run config
// (defaults < --config file < --set overrides < --seed), creates a run
// directory and writes its outputs there.

#include "avlink/checkpoint.hpp"
#include "avlink/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace avlink;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string run_root;
};

struct Checkpoints {
    std::string audio;
    std::string video;
    std::string fusion;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON run config");
    app->add_option("--set", c.sets, "dotted-path override key=value (repeatable)");
    app->add_option("--seed", c.seed, "run seed");
    app->add_option("--run-root", c.run_root, "parent of the run directory (default $AVLINK_RUN_ROOT or ./runs)");
}

void add_checkpoints(CLI::App* app, Checkpoints& k, bool fusion) {
    app->add_option("--audio-ckpt", k.audio, "audio backbone checkpoint")->required();
    app->add_option("--video-ckpt", k.video, "video backbone checkpoint")->required();
    if (fusion) app->add_option("--fusion-ckpt", k.fusion, "fusion checkpoint")->required();
}

RunConfig load(const Common& c) {
    std::vector<std::string> sets = c.sets;
    if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
    return load_run_config(c.config, sets);
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) throw FormatError("cli", std::string(what) + " not found: " + path);
}

std::shared_ptr<Backbone> backbone_from(const std::string& path, Modality expect) {
    require_file(path, "checkpoint");
    std::shared_ptr<Backbone> b(load_backbone(path).release());
    if (b->config().modality != expect)
        throw FormatError("cli", path + " holds a " + to_string(b->config().modality) + " backbone, expected " + to_string(expect));
    b->freeze();
    return b;
}

struct Loaded {
    std::shared_ptr<Backbone> audio;
    std::shared_ptr<Backbone> video;
    std::shared_ptr<FusionStack> fusion;
};

Loaded load_linked(const Checkpoints& k) {
    Loaded l;
    l.audio = backbone_from(k.audio, Modality::audio);
    l.video = backbone_from(k.video, Modality::video);
    require_file(k.fusion, "checkpoint");
    l.fusion.reset(load_fusion(k.fusion, file_digest(k.audio), file_digest(k.video)).release());
    return l;
}

LinkedModel linked_for(const Loaded& l, const RunConfig& cfg) {
    const FusionConfig& f = l.fusion->config();
    Direction dir = cfg.fusion.direction;
    if (!f.shared_params_across_tasks && f.direction != dir)
        throw ConfigError("cli", std::string("fusion checkpoint serves ") + to_string(f.direction) + ", config asks for " + to_string(dir));
    return LinkedModel(l.audio, l.video, l.fusion, dir);
}

Dataset dataset_from(const std::string& path) {
    require_file(path, "dataset");
    return read_dataset(path);
}

void write_json(RunDir& run, const std::string& name, const json& j) {
    write_file_atomic(run.file(name), j.dump(2) + "\n");
    run.record_digest(name);
}

TrainHooks hooks_for(RunDir& run) {
    TrainHooks h;
    h.log = [&run](const std::string& s) {
        run.log(s);
        std::cerr << s << '\n';
    };
    return h;
}

// ---- subcommands --------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::string& split, int n) {
    RunConfig cfg = load(c);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "gen-data", cfg);
    const bool eval = split == "eval";
    const std::size_t count = n > 0 ? static_cast<std::size_t>(n) : static_cast<std::size_t>(eval ? cfg.n_eval : cfg.n_train);
    const Dataset d = generate_dataset(cfg.data, cfg.seed, count, eval ? kEvalIndexOffset : 0);
    write_dataset(run.file("data.avd"), d);
    run.record_digest("data.avd");
    run.log("wrote " + std::to_string(count) + " " + split + " clips");
    std::cout << run.file("data.avd").string() << '\n';
    return 0;
}

int cmd_train_base(const Common& c, const std::string& modality, const std::string& data) {
    RunConfig cfg = load(c);
    const Modality m = modality_from_string(modality);
    const Dataset d = dataset_from(data);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "train-base", cfg);
    TrainHooks hooks = hooks_for(run);
    hooks.base_checkpoint = [&run](long step, const Backbone& b) {
        save_backbone(run.file("backbone-step" + std::to_string(step) + ".ckpt"), b);
    };
    const auto res = run_train_base(cfg, m, encode_dataset(d), hooks);
    save_backbone(run.file("backbone.ckpt"), *res.model);
    write_base_log(run.file("loss.csv"), res.log);
    run.record_digest("backbone.ckpt");
    run.record_digest("loss.csv");
    write_json(run, "summary.json", {{"modality", to_string(m)}, {"steps", res.log.size()}, {"final_loss", res.log.back().loss},
                                     {"params_digest", to_hex(params_digest(res.model->params()))}});
    std::cout << run.file("backbone.ckpt").string() << '\n';
    return 0;
}

int cmd_train_fusion(const Common& c, const Checkpoints& k, const std::string& data, const std::string& audio_digest,
                     const std::string& video_digest) {
    RunConfig cfg = load(c);
    auto audio = backbone_from(k.audio, Modality::audio);
    auto video = backbone_from(k.video, Modality::video);
    const Digest da = file_digest(k.audio), dv = file_digest(k.video);
    if (!audio_digest.empty() && audio_digest != to_hex(da))
        throw FormatError("cli", "audio backbone digest mismatch: expected " + audio_digest + ", " + k.audio + " has " + to_hex(da));
    if (!video_digest.empty() && video_digest != to_hex(dv))
        throw FormatError("cli", "video backbone digest mismatch: expected " + video_digest + ", " + k.video + " has " + to_hex(dv));
    const Dataset d = dataset_from(data);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "train-fusion", cfg);
    TrainHooks hooks = hooks_for(run);
    hooks.fusion_checkpoint = [&](long step, const FusionStack& f) {
        save_fusion(run.file("fusion-step" + std::to_string(step) + ".ckpt"), f, audio->config(), video->config(), da, dv);
    };
    const auto res = run_train_fusion(cfg, cfg.fusion, audio, video, encode_dataset(d), hooks);
    save_fusion(run.file("fusion.ckpt"), *res.fusion, audio->config(), video->config(), da, dv);
    write_fusion_log(run.file("loss.csv"), res.log);
    run.record_digest("fusion.ckpt");
    run.record_digest("loss.csv");
    write_json(run, "summary.json", {{"direction", to_string(cfg.fusion.direction)},
                                     {"injection", to_string(cfg.fusion.injection)},
                                     {"steps", res.log.size()},
                                     {"final_loss", res.log.back().loss},
                                     {"audio_ckpt", to_hex(da)},
                                     {"video_ckpt", to_hex(dv)},
                                     {"audio_params_unchanged", res.audio_params_before == res.audio_params_after},
                                     {"video_params_unchanged", res.video_params_before == res.video_params_after}});
    std::cout << run.file("fusion.ckpt").string() << '\n';
    return 0;
}

int cmd_generate(const Common& c, const Checkpoints& k, const std::string& data, int index, bool diagnostics) {
    RunConfig cfg = load(c);
    const Loaded l = load_linked(k);
    const LinkedModel model = linked_for(l, cfg);
    DatasetReader reader(data);
    if (index < 0 || static_cast<std::uint64_t>(index) >= reader.size())
        throw ContractError("cli", "sample index " + std::to_string(index) + " outside " + data);
    AVSample clip = reader.at(static_cast<std::uint64_t>(index));
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "generate", cfg);
    GenerateOptions opts = generate_options(cfg);
    opts.verify_condition = true;
    const Generated g = generate_for(model, cfg, clip, opts, derive_seed(cfg.seed, Stream::eval, static_cast<std::uint64_t>(index)));
    const SampleScore score = score_generated(cfg, model.direction(), clip, g.tokens);
    const Codec codec{reader.config()};
    AVSample out = clip;
    if (model.generated() == Modality::audio)
        out.audio = codec.decode_audio(g.tokens);
    else
        out.video = codec.decode_video(g.tokens);
    write_dataset(run.file("generated.avd"), Dataset{reader.config(), {out}});
    run.record_digest("generated.avd");
    if (diagnostics) {
        write_step_diagnostics(run.file("steps.csv"), g.steps);
        run.record_digest("steps.csv");
    }
    write_json(run, "summary.json", {{"direction", to_string(model.direction())}, {"index", index}, {"t_cond", g.t_cond},
                                     {"score", score.score}, {"reference_events", score.reference},
                                     {"detected_events", score.detected}});
    std::cout << run.file("generated.avd").string() << '\n';
    return 0;
}

int cmd_eval(const Common& c, const Checkpoints& k, const std::string& data, int samples, const std::string& group,
             const std::string& variant) {
    RunConfig cfg = load(c);
    const Loaded l = load_linked(k);
    const LinkedModel model = linked_for(l, cfg);
    const Dataset d = dataset_from(data);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "eval", cfg);
    EvalOptions o;
    o.samples = samples;
    const EvalSummary s = evaluate(model, cfg, d, o);
    write_ablation_csv(run.file("metrics.csv"),
                       {AblationRow{group, variant, to_string(s.direction), s.metric, s.score, s.baseline, s.samples}});
    run.record_digest("metrics.csv");
    write_json(run, "report.json", to_json(s));
    std::printf("%s %s %.4f (random %.4f, %d clips)\n", to_string(s.direction), s.metric.c_str(), s.score, s.baseline, s.samples);
    return 0;
}

int cmd_sweep(const Common& c, const Checkpoints& k, const std::string& data) {
    RunConfig cfg = load(c);
    const Loaded l = load_linked(k);
    const LinkedModel model = linked_for(l, cfg);
    const Dataset d = dataset_from(data);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "sweep", cfg);
    const auto rows = run_sweep(model, cfg, d);
    write_sweep_csv(run.file("sweep.csv"), rows);
    write_sweep_svg(run.file("sweep.svg"), rows, std::string(to_string(model.direction())) + " score vs t_cond");
    run.record_digest("sweep.csv");
    for (const auto& r : rows) std::printf("%.4f %.4f\n", r.t_cond, r.score);
    return 0;
}

// Scalar probe: weighted sum of the outputs so every output entry gets a distinct gradient.
ad::Var probe(ad::Var y, std::uint64_t seed) {
    Rng rng(seed);
    return ad::weighted_sum(y, rng.normal_matrix(y.rows(), y.cols()));
}

int cmd_grad_check(const Common& c, const std::string& target, bool inject) {
    RunConfig cfg = load(c);
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "grad-check", cfg);
    const Real tol = 1e-4;
    json report = json::object();
    bool ok = true;
    GradCheckOptions opts;
    opts.inject_fault = inject;
    opts.seed = cfg.seed;

    auto record = [&](const std::string& name, const GradCheckReport& r) {
        report[name] = {{"max_rel_error", r.max_rel_error}, {"worst_param", r.worst_param}, {"worst_index", r.worst_index},
                        {"checked", r.checked}, {"analytic", r.worst_analytic}, {"numeric", r.worst_numeric},
                        {"pass", r.max_rel_error <= tol}};
        ok = ok && r.max_rel_error <= tol;
        std::printf("%s max rel error %.3e at %s[%ld] (%zu entries)\n", name.c_str(), r.max_rel_error, r.worst_param.c_str(),
                    static_cast<long>(r.worst_index), r.checked);
    };

    // Small configs keep the check fast; every parameter tensor is sampled.
    BackboneConfig ac = cfg.audio;
    BackboneConfig vc = cfg.video;
    ac.n_blocks = vc.n_blocks = 1;
    const TokenSequence a = Codec{cfg.data}.audio_layout().with_data(Rng(cfg.seed + 1).normal_matrix(cfg.data.audio_tokens(), ac.in_channels));
    const TokenSequence v = Codec{cfg.data}.video_layout().with_data(Rng(cfg.seed + 2).normal_matrix(Codec{cfg.data}.video_layout().tokens(), vc.in_channels));

    if (target == "block" || target == "all") {
        Backbone b(ac, cfg.seed);
        // Zero-initialised gates hide the branch gradients; perturb every parameter first.
        Rng rng(cfg.seed + 3);
        for (auto* p : b.params().all()) p->value += 0.1 * rng.normal_matrix(p->value.rows(), p->value.cols());
        const Prompt prompt = std::vector<int>{1};
        record("dit_block", grad_check([&](ad::Tape& t) { return probe(b.forward(t, a, 0.37, prompt).velocity, 11); },
                                       b.params().all(), opts));
    }
    if (target == "fusion" || target == "all") {
        auto ab = std::make_shared<Backbone>(ac, cfg.seed);
        auto vb = std::make_shared<Backbone>(vc, cfg.seed + 1);
        ab->freeze();
        vb->freeze();
        FusionConfig f = cfg.fusion;
        f.n_fusion = 1;
        FusionStack fs_(f, ac, vc, cfg.seed + 2);
        Rng rng(cfg.seed + 4);
        for (auto* p : fs_.params().all()) p->value += 0.1 * rng.normal_matrix(p->value.rows(), p->value.cols());
        const FusionLayout layout = FusionLayout::from(a, v);
        const TimestepPair ts{0.3, 0.9};
        // Fusion blocks read hidden states, not tokens.
        const Matrix ha = Rng(cfg.seed + 5).normal_matrix(a.tokens(), ac.hidden);
        const Matrix hv = Rng(cfg.seed + 6).normal_matrix(v.tokens(), vc.hidden);
        record("fusion_block", grad_check([&](ad::Tape& t) {
                                             auto [ya, yv] = fs_.block_forward(0, t.constant(ha), t.constant(hv), ts, layout);
                                             return ad::add(probe(ya, 12), probe(yv, 13));
                                         },
                                         fs_.params().all(), opts));
    }
    if (report.empty()) throw ConfigError("cli", "grad-check target must be block, fusion or all");
    write_json(run, "grad_check.json", report);
    return ok ? 0 : 1;
}

int cmd_inspect(const Common& c, const std::string& path) {
    RunConfig cfg = load(c);
    require_file(path, "file");
    const std::string head = read_file(path, "cli").substr(0, 8);
    json info;
    if (head == "AVLKDATA") {
        DatasetReader r(path);
        info = {{"kind", "dataset"}, {"records", r.size()}, {"config", r.config()}, {"config_digest", config_digest(r.config())}};
    } else {
        const CheckpointInfo ci = inspect_checkpoint(path);
        json refs = json::array();
        for (const auto& d : ci.references) refs.push_back(to_hex(d));
        json shapes = json::object();
        std::size_t count = 0;
        for (const auto& [name, rc] : ci.shapes) {
            shapes[name] = {rc.first, rc.second};
            count += static_cast<std::size_t>(rc.first * rc.second);
        }
        info = {{"kind", "checkpoint"}, {"tag", ci.tag}, {"config", ci.config}, {"config_digest", to_hex(ci.config_digest)},
                {"references", refs}, {"parameters", count}, {"shapes", shapes}};
    }
    info["file_digest"] = to_hex(file_digest(path));
    RunDir run = RunDir::create(RunDir::default_root(c.run_root), "inspect-ckpt", cfg);
    write_json(run, "info.json", info);
    std::cout << info.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"avlink: link frozen audio and video flow models"};
    app.require_subcommand(1);

    Common common;
    Checkpoints ckpt;
    std::string split = "train", modality, data, audio_digest, video_digest, target = "all", group = "eval", variant = "default";
    int n = 0, index = 0, samples = -1;
    bool diagnostics = false, inject = false;
    std::string inspect_path;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    add_common(gen, common);
    gen->add_option("--split", split, "train or eval")->check(CLI::IsMember({"train", "eval"}));
    gen->add_option("--n", n, "clip count (default n_train / n_eval)");

    auto* tb = app.add_subcommand("train-base", "train one backbone");
    add_common(tb, common);
    tb->add_option("--modality", modality, "audio or video")->required()->check(CLI::IsMember({"audio", "video"}));
    tb->add_option("--data", data, "training dataset")->required();

    auto* tf = app.add_subcommand("train-fusion", "train fusion blocks over two frozen backbones");
    add_common(tf, common);
    add_checkpoints(tf, ckpt, false);
    tf->add_option("--data", data, "training dataset")->required();
    tf->add_option("--audio-digest", audio_digest, "expected SHA-256 of the audio checkpoint");
    tf->add_option("--video-digest", video_digest, "expected SHA-256 of the video checkpoint");

    auto* ge = app.add_subcommand("generate", "generate one clip's missing modality");
    add_common(ge, common);
    add_checkpoints(ge, ckpt, true);
    ge->add_option("--data", data, "dataset holding the conditioning clip")->required();
    ge->add_option("--index", index, "clip index");
    ge->add_flag("--diagnostics", diagnostics, "write per-step norms to steps.csv");

    auto* ev = app.add_subcommand("eval", "score generation on held-out clips");
    add_common(ev, common);
    add_checkpoints(ev, ckpt, true);
    ev->add_option("--data", data, "held-out dataset")->required();
    ev->add_option("--samples", samples, "clips to score (default all)");
    ev->add_option("--group", group, "ablation group column");
    ev->add_option("--variant", variant, "ablation variant column");

    auto* sw = app.add_subcommand("sweep", "score generation across conditioning times");
    add_common(sw, common);
    add_checkpoints(sw, ckpt, true);
    sw->add_option("--data", data, "held-out dataset")->required();

    auto* gc = app.add_subcommand("grad-check", "compare autodiff with finite differences");
    add_common(gc, common);
    gc->add_option("--target", target, "block, fusion or all")->check(CLI::IsMember({"block", "fusion", "all"}));
    gc->add_flag("--inject-fault", inject, "corrupt one analytic gradient entry");

    auto* in = app.add_subcommand("inspect-ckpt", "describe a checkpoint or dataset file");
    add_common(in, common);
    in->add_option("path", inspect_path, "file to inspect")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_data(common, split, n);
        if (*tb) return cmd_train_base(common, modality, data);
        if (*tf) return cmd_train_fusion(common, ckpt, data, audio_digest, video_digest);
        if (*ge) return cmd_generate(common, ckpt, data, index, diagnostics);
        if (*ev) return cmd_eval(common, ckpt, data, samples, group, variant);
        if (*sw) return cmd_sweep(common, ckpt, data);
        if (*gc) return cmd_grad_check(common, target, inject);
        if (*in) return cmd_inspect(common, inspect_path);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: [cli] " << e.what() << '\n';
        return 2;
    }
    return 1;
}
