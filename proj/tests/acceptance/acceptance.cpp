// Acceptance checks. Prints one PASS/FAIL/WARN line per criterion and exits
// non-zero if any hard criterion fails. Soft criteria only warn.

#include "avlink/checkpoint.hpp"
#include "avlink/pipeline.hpp"

#include <CLI11.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

using namespace avlink;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- pinned tolerances --------------------------------------------------------------------
constexpr Real kExactTol = 1e-12;        // endpoints, constant-field Euler, rope norms
constexpr Real kTauTol = 1e-9;
constexpr Real kShiftTol = 1e-6;
constexpr Real kIdentityTol = 1e-6;
constexpr Real kGradTol = 1e-4;
constexpr Real kConvergenceSlack = 2.0;  // error ratio within 2x of the step ratio
constexpr Real kV2AThreshold = 0.8;
constexpr Real kA2VThreshold = 0.7;
constexpr Real kSweepLo = 0.8;
constexpr Real kSweepHi = 0.98;
constexpr long kFrozenSteps = 200;
constexpr long kMaxSteps = 3000;

struct Outcome {
    int id = 0;
    std::string name;
    bool pass = false;
    bool soft = false;
    std::string detail;
    double seconds = 0.0;
};

Outcome outcome(int id, std::string name) {
    Outcome o;
    o.id = id;
    o.name = std::move(name);
    return o;
}

std::vector<Outcome> g_outcomes;

void report(Outcome o) {
    const char* tag = o.pass ? "PASS" : (o.soft ? "WARN" : "FAIL");
    std::printf("criterion %2d [%s] %s: %s (%.1f s)\n", o.id, tag, o.name.c_str(), o.detail.c_str(), o.seconds);
    std::fflush(stdout);
    g_outcomes.push_back(std::move(o));
}

class Timer {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void progress(const std::string& s) {
    std::fprintf(stderr, "  %s\n", s.c_str());
    std::fflush(stderr);
}

void perturb(ad::ParamStore& s, Real scale, std::uint64_t seed) {
    Rng rng(seed);
    for (ad::Parameter* p : s.all()) p->value += scale * rng.normal_matrix(p->value.rows(), p->value.cols());
}

Real max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

// ---- 1: flow math --------------------------------------------------------------------------

void criterion_flow() {
    Timer timer;
    Outcome o = outcome(1, "flow-math suite");
    Rng rng(1);
    const Matrix x0 = rng.normal_matrix(16, 8);
    const Matrix x1 = rng.normal_matrix(16, 8);
    const Real endpoint_err = std::max(max_abs(flow::interpolate(x0, x1, 0.0) - x0), max_abs(flow::interpolate(x0, x1, 1.0) - x1));

    // Constant field: exact after any number of steps.
    const Matrix c = rng.normal_matrix(16, 8);
    Real const_err = 0.0;
    for (int steps : {1, 7, 64}) {
        const Matrix out = flow::euler_sample([&](const Matrix&, Real) { return c; }, x0, steps);
        const Matrix exact = x0 + c;
        const_err = std::max(const_err, max_abs(out - exact) / max_abs(exact));
    }

    // dx/dt = x from x(0) = 1: global error of Euler is first order.
    auto err = [](int steps) {
        Matrix one = Matrix::Ones(1, 1);
        const Matrix out = flow::euler_sample([](const Matrix& x, Real) { return x; }, one, steps);
        return std::abs(out(0, 0) - std::exp(1.0));
    };
    bool order_ok = true;
    std::string ratios;
    for (auto [a, b] : {std::pair{16, 64}, std::pair{64, 256}, std::pair{256, 1024}}) {
        const Real ratio = err(a) / err(b);
        const Real step_ratio = static_cast<Real>(b) / a;
        order_ok = order_ok && ratio >= step_ratio / kConvergenceSlack && ratio <= step_ratio * kConvergenceSlack;
        ratios += fmt("%d/%d:%.3f ", a, b, ratio);
    }

    // fm_loss gradient against central differences.
    const Matrix v = rng.normal_matrix(16, 8);
    const Matrix g = flow::fm_loss_grad(v, x0, x1);
    Real grad_err = 0.0;
    const Real h = 1e-6;
    for (Index i = 0; i < v.size(); ++i) {
        Matrix vp = v, vm = v;
        vp.data()[i] += h;
        vm.data()[i] -= h;
        const Real fd = (flow::fm_loss(vp, x0, x1) - flow::fm_loss(vm, x0, x1)) / (2 * h);
        grad_err = std::max(grad_err, std::abs(fd - g.data()[i]) / std::max({std::abs(fd), std::abs(g.data()[i]), 1e-12}));
    }

    o.pass = endpoint_err == 0.0 && const_err <= kExactTol && order_ok && grad_err <= kGradTol;
    o.seconds = timer.seconds();
    o.pass = o.pass && o.seconds < 10.0;
    o.detail = fmt("endpoint err %.1e, constant-field rel err %.1e, error ratios %sfm_loss grad rel err %.1e", endpoint_err,
                   const_err, ratios.c_str(), grad_err);
    report(o);
}

// ---- 2: rope / tau alignment ------------------------------------------------------------------

BackboneConfig small_backbone(Modality m, const DataGenConfig& data, int blocks) {
    BackboneConfig b = desk_backbone(m, data);
    b.n_blocks = blocks;
    return b;
}

TokenSequence random_tokens(const TokenSequence& layout, std::uint64_t seed) {
    return layout.with_data(Rng(seed).normal_matrix(layout.tokens(), layout.channels()));
}

void criterion_rope_tau() {
    Timer timer;
    Outcome o = outcome(2, "rope / tau alignment");
    const RunConfig cfg = RunConfig::desk();
    Rng rng(2);

    Real norm_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix x = rng.normal_matrix(32, 16);
        const Matrix ang = 100.0 * rng.normal_matrix(32, 8);
        const Matrix y = rope_rotate(x, ang);
        for (Index r = 0; r < x.rows(); ++r)
            for (Index k = 0; k < 8; ++k) {
                const Real a = std::hypot(x(r, 2 * k), x(r, 2 * k + 1));
                const Real b = std::hypot(y(r, 2 * k), y(r, 2 * k + 1));
                norm_err = std::max(norm_err, std::abs(a - b) / std::max(a, 1e-300));
            }
    }

    // Every media time that falls on both token grids maps to the same tau.
    const Real eta_a = 24.0, eta_v = 6.0, duration = 5.16;
    Real tau_err = 0.0;
    int aligned = 0;
    for (Index n = 0; n < static_cast<Index>(std::llround(duration * eta_a)); ++n) {
        const Real t = n / eta_a;
        const Real k = t * eta_v;
        if (std::abs(k - std::round(k)) > 1e-12) continue;
        ++aligned;
        tau_err = std::max(tau_err, std::abs(tau(n, Modality::audio, eta_a, eta_v) -
                                             tau(static_cast<Index>(std::llround(k)), Modality::video, eta_a, eta_v)));
    }

    // Joint attention logits do not depend on a global temporal offset.
    const Codec codec{cfg.data};
    const BackboneConfig ac = small_backbone(Modality::audio, cfg.data, 2);
    const BackboneConfig vc = small_backbone(Modality::video, cfg.data, 2);
    FusionConfig f = cfg.fusion;
    f.n_fusion = 1;
    FusionStack stack(f, ac, vc, 3);
    perturb(stack.params(), 0.1, 4);
    const TokenSequence a = random_tokens(codec.audio_layout(), 5);
    const TokenSequence v = random_tokens(codec.video_layout(), 6);
    const FusionLayout layout = FusionLayout::from(a, v);
    const Matrix ha = Rng(7).normal_matrix(a.tokens(), ac.hidden);
    const Matrix hv = Rng(8).normal_matrix(v.tokens(), vc.hidden);
    const TimestepPair ts{0.4, 0.96};
    const auto base = stack.joint_logits(0, ha, hv, ts, layout, 0.0);
    Real shift_err = 0.0;
    for (Real off : {1.0, 7.25, 123.5}) {
        const auto shifted = stack.joint_logits(0, ha, hv, ts, layout, off);
        for (std::size_t h = 0; h < base.size(); ++h) shift_err = std::max(shift_err, max_abs(base[h] - shifted[h]));
    }

    o.seconds = timer.seconds();
    o.pass = norm_err <= kExactTol && aligned == 31 && tau_err <= kTauTol && shift_err <= kShiftTol && o.seconds < 10.0;
    o.detail = fmt("rope norm rel err %.1e, %d aligned times with max tau err %.1e, logit shift err %.1e", norm_err, aligned,
                   tau_err, shift_err);
    report(o);
}

// ---- 3: identity at init -------------------------------------------------------------------------

void criterion_identity() {
    Timer timer;
    Outcome o = outcome(3, "identity at init");
    const RunConfig cfg = RunConfig::desk();
    const Codec codec{cfg.data};
    auto audio = std::make_shared<Backbone>(cfg.audio, 11);
    auto video = std::make_shared<Backbone>(cfg.video, 12);
    perturb(audio->params(), 0.05, 13);
    perturb(video->params(), 0.05, 14);
    audio->freeze();
    video->freeze();
    const TokenSequence a = random_tokens(codec.audio_layout(), 15);
    const TokenSequence v = random_tokens(codec.video_layout(), 16);
    const Prompt pa = std::vector<int>{1};
    const Prompt pv = std::vector<int>{2};

    Real worst = 0.0;
    int combos = 0;
    for (Arrangement arr : {Arrangement::interleaved, Arrangement::after_block})
        for (Injection inj : {Injection::fusion_block, Injection::symmetric_cross_attention, Injection::direct_alignment})
            for (Direction dir : {Direction::v2a, Direction::a2v}) {
                FusionConfig f = cfg.fusion;
                f.arrangement = arr;
                f.injection = inj;
                f.direction = dir;
                f.t_cond = default_t_cond(dir);
                auto stack = std::make_shared<FusionStack>(f, cfg.audio, cfg.video, 17);
                LinkedModel m(audio, video, stack, dir);
                const bool v2a = dir == Direction::v2a;
                const TokenSequence& gen = v2a ? a : v;
                const TokenSequence& cond = v2a ? v : a;
                const Prompt& gp = v2a ? pa : pv;
                const Prompt& cp = v2a ? pv : pa;
                const Matrix linked = m.velocity(gen, cond, m.timesteps(0.3, f.t_cond), gp, cp);
                const Matrix alone = (v2a ? *audio : *video).velocity(gen, 0.3, gp);
                worst = std::max(worst, max_abs(linked - alone));
                ++combos;
            }
    o.seconds = timer.seconds();
    o.pass = worst <= kIdentityTol && o.seconds < 30.0;
    o.detail = fmt("%d arrangement x injection x direction combinations, max |linked - backbone| %.1e", combos, worst);
    report(o);
}

// ---- 4: frozen invariance -------------------------------------------------------------------------

void criterion_frozen() {
    Timer timer;
    Outcome o = outcome(4, "frozen invariance");
    RunConfig cfg = RunConfig::desk();
    cfg.n_train = 64;
    cfg.fusion_train.total_steps = kFrozenSteps;
    cfg.fusion_train.warmup_steps = 20;
    auto audio = std::make_shared<Backbone>(cfg.audio, 21);
    auto video = std::make_shared<Backbone>(cfg.video, 22);
    perturb(audio->params(), 0.05, 23);
    perturb(video->params(), 0.05, 24);
    audio->freeze();
    video->freeze();
    const Digest a0 = params_digest(audio->params());
    const Digest v0 = params_digest(video->params());
    const EncodedDataset data = encode_dataset(train_split(cfg));

    const FusionTrainResult r = run_train_fusion(cfg, cfg.fusion, audio, video, data);
    const bool hashes_ok = params_digest(audio->params()) == a0 && params_digest(video->params()) == v0 &&
                           r.audio_params_after == a0 && r.video_params_after == v0;

    // Tape audit: frozen leaves never register a gradient.
    LinkedModel m(audio, video, r.fusion, Direction::v2a);
    const Codec codec{cfg.data};
    ad::Tape tape;
    ad::Var y = m.forward(tape, random_tokens(codec.audio_layout(), 25), random_tokens(codec.video_layout(), 26),
                          m.timesteps(0.5, 0.96), std::vector<int>{1}, std::vector<int>{1});
    tape.backward(ad::weighted_sum(y, Rng(27).normal_matrix(y.rows(), y.cols())));
    std::size_t frozen_with_grad = 0, frozen_total = 0, fusion_with_grad = 0;
    for (const Backbone* b : {static_cast<const Backbone*>(audio.get()), static_cast<const Backbone*>(video.get())})
        for (const ad::Parameter* p : b->params().all()) {
            ++frozen_total;
            frozen_with_grad += tape.param_grad(*p) != nullptr;
        }
    for (const ad::Parameter* p : r.fusion->params().all()) fusion_with_grad += tape.param_grad(*p) != nullptr;

    o.seconds = timer.seconds();
    o.pass = hashes_ok && frozen_with_grad == 0 && fusion_with_grad > 0 && o.seconds < 300.0;
    o.detail = fmt("%ld fusion steps, backbone hashes %s, %zu of %zu frozen tensors hold a gradient, %zu fusion tensors do",
                   kFrozenSteps, hashes_ok ? "unchanged" : "CHANGED", frozen_with_grad, frozen_total, fusion_with_grad);
    report(o);
}

// ---- 5: gradient integrity -------------------------------------------------------------------------

void criterion_grad() {
    Timer timer;
    Outcome o = outcome(5, "gradient integrity");
    RunConfig cfg = RunConfig::desk();
    cfg.data.duration = 1.0;
    cfg.data.max_events = 2;
    const Codec codec{cfg.data};
    const BackboneConfig ac = small_backbone(Modality::audio, cfg.data, 1);
    const BackboneConfig vc = small_backbone(Modality::video, cfg.data, 1);
    const TokenSequence a = random_tokens(codec.audio_layout(), 31);
    const TokenSequence v = random_tokens(codec.video_layout(), 32);
    GradCheckOptions opts;
    opts.per_param = 256;
    opts.seed = 33;
    auto probe = [](ad::Var y, std::uint64_t seed) { return ad::weighted_sum(y, Rng(seed).normal_matrix(y.rows(), y.cols())); };

    Backbone b(ac, 34);
    perturb(b.params(), 0.1, 35);
    const Prompt prompt = std::vector<int>{1};
    const GradCheckReport rb =
        grad_check([&](ad::Tape& t) { return probe(b.forward(t, a, 0.37, prompt).velocity, 36); }, b.params().all(), opts);

    FusionConfig f = cfg.fusion;
    f.n_fusion = 1;
    FusionStack stack(f, ac, vc, 37);
    perturb(stack.params(), 0.1, 38);
    const FusionLayout layout = FusionLayout::from(a, v);
    const Matrix ha = Rng(39).normal_matrix(a.tokens(), ac.hidden);
    const Matrix hv = Rng(40).normal_matrix(v.tokens(), vc.hidden);
    const GradCheckReport rf = grad_check(
        [&](ad::Tape& t) {
            auto [ya, yv] = stack.block_forward(0, t.constant(ha), t.constant(hv), TimestepPair{0.3, 0.9}, layout);
            return ad::add(probe(ya, 41), probe(yv, 42));
        },
        stack.params().all(), opts);

    o.seconds = timer.seconds();
    o.pass = rb.max_rel_error <= kGradTol && rf.max_rel_error <= kGradTol && o.seconds < 120.0;
    o.detail = fmt("DiT block max rel err %.1e over %zu entries (%zu tensors); fusion block %.1e over %zu entries (%zu tensors)",
                   rb.max_rel_error, rb.checked, b.params().size(), rf.max_rel_error, rf.checked, stack.params().size());
    report(o);
}

// ---- 9: determinism through the command-line pipeline ------------------------------------------------

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult cli(const fs::path& root, const std::string& args) {
    const std::string cmd = "AVLINK_RUN_ROOT='" + root.string() + "' '" AVLINK_CLI_PATH "' " + args + " 2>/dev/null";
    CliResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::string bytes_of(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

// Runs gen-data, train-base x2, train-fusion, generate and eval; returns the artifacts compared across runs.
std::map<std::string, std::string> cli_pipeline(const fs::path& root, const std::string& sets) {
    std::map<std::string, std::string> out;
    auto step = [&](const std::string& args) {
        CliResult r = cli(root, args + sets);
        if (r.code != 0) throw Error("acceptance", "command failed: avlink " + args);
        return r;
    };
    const std::string train = first_line(step("gen-data --split train").out);
    const std::string eval = first_line(step("gen-data --split eval").out);
    const std::string audio = first_line(step("train-base --modality audio --data " + train).out);
    const std::string video = first_line(step("train-base --modality video --data " + train).out);
    const std::string fusion = first_line(step("train-fusion --audio-ckpt " + audio + " --video-ckpt " + video + " --data " + train).out);
    const std::string ck = " --audio-ckpt " + audio + " --video-ckpt " + video + " --fusion-ckpt " + fusion;
    const std::string gen = first_line(step("generate" + ck + " --data " + eval + " --index 0 --diagnostics").out);
    step("eval" + ck + " --data " + eval);
    out["train data"] = bytes_of(train);
    out["audio loss.csv"] = bytes_of(fs::path(audio).parent_path() / "loss.csv");
    out["video loss.csv"] = bytes_of(fs::path(video).parent_path() / "loss.csv");
    out["fusion loss.csv"] = bytes_of(fs::path(fusion).parent_path() / "loss.csv");
    out["fusion.ckpt"] = bytes_of(fusion);
    out["generated.avd"] = bytes_of(gen);
    out["steps.csv"] = bytes_of(fs::path(gen).parent_path() / "steps.csv");
    for (const auto& e : fs::directory_iterator(root))
        if (e.path().filename().string().ends_with("-eval")) out["metrics.csv"] = bytes_of(e.path() / "metrics.csv");
    return out;
}

void criterion_determinism(const fs::path& work) {
    Timer timer;
    Outcome o = outcome(9, "determinism");
    // Desk architecture, fewer clips and steps.
    const std::string sets =
        " --set n_train=32 --set n_eval=4 --set base_train.total_steps=40 --set base_train.warmup_steps=10"
        " --set fusion_train.total_steps=40 --set fusion_train.warmup_steps=10 --set infer.steps=16"
        " --set base_train.threads=1 --set fusion_train.threads=1 --set eval.threads=1 --set eval.baseline_trials=20";
    try {
        fs::remove_all(work / "det_a");
        fs::remove_all(work / "det_b");
        const auto a = cli_pipeline(work / "det_a", sets);
        const auto b = cli_pipeline(work / "det_b", sets);
        std::vector<std::string> differ;
        for (const auto& [k, v] : a)
            if (!b.count(k) || b.at(k) != v || v.empty()) differ.push_back(k);
        o.pass = differ.empty() && a.size() == 8;
        std::string names;
        for (const auto& [k, v] : a) names += k + " ";
        o.detail = differ.empty() ? "two runs byte-identical in: " + names
                                  : "differs: " + std::accumulate(differ.begin(), differ.end(), std::string(),
                                                                  [](std::string s, const std::string& x) { return s + x + " "; });
    } catch (const std::exception& e) {
        o.detail = e.what();
    }
    o.seconds = timer.seconds();
    report(o);
}

// ---- 6, 7, 8, 10: end to end -------------------------------------------------------------------------

struct E2E {
    RunConfig cfg;
    Dataset train;
    Dataset eval;
    EncodedDataset encoded;
    std::shared_ptr<Backbone> audio;
    std::shared_ptr<Backbone> video;
    fs::path out;
    std::vector<AblationRow> ablation;
    json summary = json::object();
};

TrainHooks progress_hooks(const std::string& label, long total) {
    TrainHooks h;
    h.log = progress;
    auto timer = std::make_shared<Timer>();
    h.on_step = [label, total, timer](long s) {
        if (s % 250 == 0 || s == total) progress(fmt("%s step %ld/%ld %.0f s", label.c_str(), s, total, timer->seconds()));
    };
    return h;
}

void prepare(E2E& e) {
    Timer timer;
    e.train = train_split(e.cfg);
    e.eval = eval_split(e.cfg);
    e.encoded = encode_dataset(e.train);
    for (Modality m : {Modality::audio, Modality::video}) {
        const std::string label = std::string("base ") + to_string(m);
        BaseTrainResult r = run_train_base(e.cfg, m, e.encoded, progress_hooks(label, e.cfg.base_train.total_steps));
        write_base_log(e.out / (label.substr(5) + "_base_loss.csv"), r.log);
        save_backbone(e.out / (label.substr(5) + ".ckpt"), *r.model);
        std::shared_ptr<Backbone> b(r.model.release());
        b->freeze();
        (m == Modality::audio ? e.audio : e.video) = b;
    }
    progress(fmt("base backbones trained in %.0f s", timer.seconds()));
}

std::shared_ptr<FusionStack> train_variant(E2E& e, const std::string& name, const FusionConfig& f, const RunConfig& cfg) {
    Timer timer;
    const FusionTrainResult r =
        run_train_fusion(cfg, f, e.audio, e.video, e.encoded, progress_hooks("fusion " + name, cfg.fusion_train.total_steps));
    write_fusion_log(e.out / ("fusion_" + name + "_loss.csv"), r.log);
    progress(fmt("fusion %s trained in %.0f s", name.c_str(), timer.seconds()));
    return r.fusion;
}

EvalSummary eval_variant(E2E& e, const std::string& group, const std::string& variant, const LinkedModel& m) {
    Timer timer;
    const EvalSummary s = evaluate(m, e.cfg, e.eval);
    e.ablation.push_back(AblationRow{group, variant, to_string(s.direction), s.metric, s.score, s.baseline, s.samples});
    e.summary[group + "/" + variant + "/" + to_string(s.direction)] = to_json(s);
    progress(fmt("%s/%s %s %s %.4f (random %.4f) in %.0f s", group.c_str(), variant.c_str(), to_string(s.direction),
                 s.metric.c_str(), s.score, s.baseline, timer.seconds()));
    return s;
}

void write_reports(const E2E& e) {
    write_ablation_csv(e.out / "ablation.csv", e.ablation);
    json j = e.summary;
    j["config"] = e.cfg;
    write_file_atomic(e.out / "e2e_report.json", j.dump(2) + "\n");
}

void criteria_e2e(const fs::path& out, const std::set<int>& only) {
    E2E e;
    e.cfg = RunConfig::desk();
    e.out = out;
    Timer total;
    prepare(e);

    std::optional<EvalSummary> fixed_v2a;
    if (only.count(6) || only.count(10)) {
        Timer t;
        FusionConfig f = e.cfg.fusion;
        auto stack = train_variant(e, "v2a", f, e.cfg);
        save_fusion(out / "fusion_v2a.ckpt", *stack, e.cfg.audio, e.cfg.video, file_digest(out / "audio.ckpt"),
                    file_digest(out / "video.ckpt"));
        fixed_v2a = eval_variant(e, "timestep", "fixed", LinkedModel(e.audio, e.video, stack, Direction::v2a));
        Outcome o = outcome(6, "end-to-end V2A onset accuracy");
        o.pass = fixed_v2a->score >= kV2AThreshold;
        o.detail = fmt("onset ACC %.4f (threshold %.2f) vs random-placement baseline %.4f; %zu onsets detected for %zu events "
                       "over %d clips; cumulative %.0f s",
                       fixed_v2a->score, kV2AThreshold, fixed_v2a->baseline, fixed_v2a->detected_events,
                       fixed_v2a->reference_events, fixed_v2a->samples, total.seconds());
        o.seconds = t.seconds();
        report(o);
    }
    if (only.count(7)) {
        Timer t;
        FusionConfig f = e.cfg.fusion;
        f.direction = Direction::a2v;
        f.t_cond = default_t_cond(Direction::a2v);
        auto stack = train_variant(e, "a2v", f, e.cfg);
        const EvalSummary s = eval_variant(e, "timestep", "fixed", LinkedModel(e.audio, e.video, stack, Direction::a2v));
        Outcome o = outcome(7, "end-to-end A2V video alignment");
        o.seconds = t.seconds();
        o.pass = s.score >= kA2VThreshold;
        o.detail = fmt("alignment %.4f (threshold %.2f) vs random-frame baseline %.4f; %zu frames lit for %zu events over %d "
                       "clips; cumulative %.0f s",
                       s.score, kA2VThreshold, s.baseline, s.detected_events, s.reference_events, s.samples, total.seconds());
        report(o);
    }
    if (only.count(8)) {
        Timer t;
        RunConfig cu = e.cfg;
        cu.fusion_train.t_cond_mode = TCondMode::uniform;
        auto stack = train_variant(e, "v2a_uniform", cu.fusion, cu);
        const LinkedModel m(e.audio, e.video, stack, Direction::v2a);
        const auto rows = run_sweep(m, cu, e.eval);
        write_sweep_csv(out / "sweep.csv", rows);
        write_sweep_svg(out / "sweep.svg", rows, "V2A onset ACC vs t_cond (uniform-t_cond training)");
        std::size_t best = 0;
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (rows[i].score > rows[best].score) best = i;
        Real at_one = -1.0;
        std::string curve;
        for (const auto& r : rows) {
            if (r.t_cond == 1.0) at_one = r.score;
            curve += fmt("%.2f:%.3f ", r.t_cond, r.score);
        }
        const Real arg = rows[best].t_cond;
        Outcome o = outcome(8, "t_cond sweep shape (soft)");
        o.soft = true;
        o.seconds = t.seconds();
        o.pass = arg >= kSweepLo && arg <= kSweepHi && at_one <= rows[best].score;
        o.detail = fmt("argmax t_cond %.2f (expected in [%.2f, %.2f]), score(1.0) %.3f <= max %.3f; curve %s", arg, kSweepLo,
                       kSweepHi, at_one, rows[best].score, curve.c_str());
        e.ablation.push_back(AblationRow{"timestep", "uniform_at_0.96", "v2a", "onset_acc",
                                         [&] {
                                             for (const auto& r : rows)
                                                 if (r.t_cond == 0.96) return r.score;
                                             return -1.0;
                                         }(),
                                         0.0, cu.eval.sweep_samples});
        report(o);
    }
    if (only.count(10)) {
        Timer t;
        FusionConfig nr = e.cfg.fusion;
        nr.injection = Injection::no_reinjection;
        auto stack = train_variant(e, "v2a_no_reinjection", nr, e.cfg);
        const EvalSummary s_nr = eval_variant(e, "injection", "no_reinjection", LinkedModel(e.audio, e.video, stack, Direction::v2a));

        RunConfig cs = e.cfg;
        cs.fusion_train.total_steps = std::min(kMaxSteps, 3 * e.cfg.fusion_train.total_steps / 2);
        FusionConfig sh = cs.fusion;
        sh.shared_params_across_tasks = true;
        auto shared = train_variant(e, "shared", sh, cs);
        const EvalSummary s_v = eval_variant(e, "task_params", "shared", LinkedModel(e.audio, e.video, shared, Direction::v2a));
        const EvalSummary s_a = eval_variant(e, "task_params", "shared", LinkedModel(e.audio, e.video, shared, Direction::a2v));

        const Real fixed = fixed_v2a ? fixed_v2a->score : 0.0;
        const Real margin = fixed - s_nr.score;
        Outcome o = outcome(10, "ablation differentials (soft)");
        o.soft = true;
        o.seconds = t.seconds();
        o.pass = margin > 0.0 && s_v.score >= kV2AThreshold && s_a.score >= kA2VThreshold;
        o.detail = fmt("fusion_block %.4f vs no_reinjection %.4f (margin %+.4f); shared params (%ld steps, alternating) "
                       "V2A %.4f, A2V %.4f vs separate V2A %.4f",
                       fixed, s_nr.score, margin, cs.fusion_train.total_steps, s_v.score, s_a.score, fixed);
        report(o);
    }
    write_reports(e);
    progress(fmt("end-to-end checks took %.0f s", total.seconds()));
}

std::set<int> parse_only(const std::string& s) {
    std::set<int> out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, ',');)
        if (!part.empty()) out.insert(std::stoi(part));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"avlink acceptance checks"};
    std::string only_s = "1,2,3,4,5,6,7,8,9,10";
    std::string out_s = "acceptance_artifacts";
    app.add_option("--only", only_s, "comma-separated criterion numbers");
    app.add_option("--out", out_s, "artifact directory");
    CLI11_PARSE(app, argc, argv);
    const std::set<int> only = parse_only(only_s);
    const fs::path out = fs::absolute(out_s);
    fs::create_directories(out);

    try {
        if (only.count(1)) criterion_flow();
        if (only.count(2)) criterion_rope_tau();
        if (only.count(3)) criterion_identity();
        if (only.count(4)) criterion_frozen();
        if (only.count(5)) criterion_grad();
        if (only.count(9)) criterion_determinism(out);
        if (only.count(6) || only.count(7) || only.count(8) || only.count(10)) criteria_e2e(out, only);
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 2;
    }

    int hard_fail = 0, warn = 0;
    for (const auto& o : g_outcomes) {
        hard_fail += !o.pass && !o.soft;
        warn += !o.pass && o.soft;
    }
    std::printf("summary: %zu criteria run, %d hard failures, %d soft warnings\n", g_outcomes.size(), hard_fail, warn);
    json j = json::array();
    for (const auto& o : g_outcomes)
        j.push_back({{"criterion", o.id}, {"name", o.name}, {"pass", o.pass}, {"soft", o.soft}, {"detail", o.detail}, {"seconds", o.seconds}});
    std::string tag;
    for (int i : only) tag += std::to_string(i) + "_";
    write_file_atomic(out / ("criteria_" + tag + "report.json"), j.dump(2) + "\n");
    return hard_fail ? 1 : 0;
}
