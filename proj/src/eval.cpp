// SPDX-License-Identifier: Apache-2.0
#include "avlink/eval.hpp"

#include "avlink/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

namespace avlink {

namespace {

constexpr const char* kMod = "eval";

std::string fmt(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::vector<Real> detect_onsets(const std::vector<Real>& wave, Real sample_rate, Real threshold, Real refractory) {
    if (!(threshold > 0.0)) throw ContractError(kMod, "onset threshold must be positive");
    if (!(sample_rate > 0.0) || refractory < 0.0) throw ContractError(kMod, "bad detector parameters");
    std::vector<Real> out;
    bool above = false;
    Real last = -1e300;
    for (std::size_t i = 0; i < wave.size(); ++i) {
        const bool now = std::abs(wave[i]) >= threshold;
        const Real t = static_cast<Real>(i) / sample_rate;
        if (now && !above && t - last >= refractory) {
            out.push_back(t);
            last = t;
        }
        above = now;
    }
    return out;
}

OnsetReport onset_accuracy(std::vector<Real> detected, std::vector<Real> reference, Real tolerance) {
    if (tolerance < 0.0) throw ContractError(kMod, "tolerance must be non-negative");
    std::sort(detected.begin(), detected.end());
    std::sort(reference.begin(), reference.end());
    OnsetReport r;
    r.tolerance = tolerance;
    std::vector<bool> used(detected.size(), false);
    std::size_t lo = 0;
    constexpr Real kSlack = 1e-9;  // absorbs rounding in t = k / rate
    for (Real ref : reference) {
        while (lo < detected.size() && (used[lo] || detected[lo] < ref - tolerance - kSlack)) ++lo;
        for (std::size_t j = lo; j < detected.size() && detected[j] <= ref + tolerance + kSlack; ++j) {
            if (used[j]) continue;
            used[j] = true;
            r.matched.emplace_back(ref, detected[j]);
            break;
        }
    }
    r.false_positives = detected.size() - r.matched.size();
    r.accuracy = static_cast<Real>(r.matched.size()) / static_cast<Real>(std::max<std::size_t>(reference.size(), 1));
    r.detected = std::move(detected);
    r.reference = std::move(reference);
    return r;
}

Real signature_energy(const DataGenConfig& cfg) {
    Real s = 0.0;
    for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) s += visual_signature(cfg, 0, y, x);
    return s / (cfg.height * cfg.width);
}

Real alignment_score_video(const VideoFrames& video, const std::vector<Real>& events, Real fps, Real energy_threshold) {
    if (!(fps > 0.0) || !(energy_threshold > 0.0)) throw ContractError(kMod, "bad alignment parameters");
    if (events.empty()) return 0.0;
    const std::size_t per_frame = static_cast<std::size_t>(video.height) * video.width * video.channels;
    int hits = 0;
    for (Real t : events) {
        const long k = std::lround(t * fps);
        if (k < 0 || k >= video.frames) continue;
        Real e = 0.0;
        for (std::size_t i = 0; i < per_frame; ++i) e += std::max(video.data[static_cast<std::size_t>(k) * per_frame + i], 0.0);
        e /= static_cast<Real>(per_frame);
        hits += e >= energy_threshold;
    }
    return static_cast<Real>(hits) / static_cast<Real>(events.size());
}

Real random_onset_baseline(const std::vector<std::vector<Real>>& references, const DataGenConfig& cfg, Real tolerance,
                           int trials, std::uint64_t seed) {
    if (references.empty() || trials < 1) throw ContractError(kMod, "baseline needs references and trials");
    Rng rng = Rng::stream(seed, Stream::eval, 0xba5e);
    const auto n_samples = static_cast<std::uint64_t>(cfg.audio_length());
    Real total = 0.0;
    for (int k = 0; k < trials; ++k)
        for (const auto& ref : references) {
            std::vector<Real> det;
            for (std::size_t i = 0; i < ref.size(); ++i) det.push_back(static_cast<Real>(rng.below(n_samples)) / cfg.audio_sample_rate);
            total += onset_accuracy(det, ref, tolerance).accuracy;
        }
    return total / (static_cast<Real>(trials) * static_cast<Real>(references.size()));
}

Real random_frame_baseline(const std::vector<std::vector<Real>>& references, const DataGenConfig& cfg, int trials,
                           std::uint64_t seed) {
    if (references.empty() || trials < 1) throw ContractError(kMod, "baseline needs references and trials");
    Rng rng = Rng::stream(seed, Stream::eval, 0xf7a3);
    const int frames = cfg.frames();
    std::vector<int> order(static_cast<std::size_t>(frames));
    Real total = 0.0;
    for (int k = 0; k < trials; ++k)
        for (const auto& ref : references) {
            if (ref.empty()) continue;
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng.engine());
            const std::set<int> lit(order.begin(), order.begin() + static_cast<long>(std::min<std::size_t>(ref.size(), order.size())));
            int hits = 0;
            for (Real t : ref) hits += lit.count(static_cast<int>(std::lround(t * cfg.fps))) > 0;
            total += static_cast<Real>(hits) / static_cast<Real>(ref.size());
        }
    return total / (static_cast<Real>(trials) * static_cast<Real>(references.size()));
}

std::vector<int> lit_frames(const VideoFrames& video, Real energy_threshold) {
    const std::size_t per_frame = static_cast<std::size_t>(video.height) * video.width * video.channels;
    std::vector<int> out;
    for (int f = 0; f < video.frames; ++f) {
        Real e = 0.0;
        for (std::size_t i = 0; i < per_frame; ++i) e += std::max(video.data[static_cast<std::size_t>(f) * per_frame + i], 0.0);
        if (e / static_cast<Real>(per_frame) >= energy_threshold) out.push_back(f);
    }
    return out;
}

namespace {

// Ridders' extrapolation of central differences over a shrinking step.
Real ridders(const std::function<Real(Real)>& central, Real h) {
    constexpr int kTab = 10;
    constexpr Real kShrink = 2.0;
    Real a[kTab][kTab];
    a[0][0] = central(h);
    Real best = a[0][0];
    Real err = std::numeric_limits<Real>::infinity();
    for (int i = 1; i < kTab; ++i) {
        h /= kShrink;
        a[0][i] = central(h);
        Real fac = kShrink * kShrink;
        for (int j = 1; j <= i; ++j) {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= kShrink * kShrink;
            const Real e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
            if (e <= err) {
                err = e;
                best = a[j][i];
            }
        }
        if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * err) break;
    }
    return best;
}

}  // namespace

GradCheckReport grad_check(const std::function<ad::Var(ad::Tape&)>& fn, const std::vector<ad::Parameter*>& params,
                           const GradCheckOptions& opts) {
    if (!(opts.eps > 0.0)) throw ContractError(kMod, "grad_check eps must be positive");
    ad::Tape tape;
    ad::Var out = fn(tape);
    if (out.rows() != 1 || out.cols() != 1) throw ContractError(kMod, "grad_check needs a scalar function");
    tape.backward(out);

    auto eval = [&]() {
        ad::Tape t(false);
        return fn(t).value()(0, 0);
    };
    Rng rng = Rng::stream(opts.seed, Stream::eval, 0x9c);
    GradCheckReport rep;
    bool fault_pending = opts.inject_fault;
    for (ad::Parameter* p : params) {
        const Matrix* g = tape.param_grad(*p);
        const Index n = p->value.size();
        const int k = static_cast<int>(std::min<Index>(opts.per_param, n));
        for (int s = 0; s < k; ++s) {
            const Index i = k == n ? s : static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
            Real analytic = g ? g->data()[i] : 0.0;
            if (fault_pending) {
                analytic += 1.0;
                fault_pending = false;
            }
            Real& w = p->value.data()[i];
            const Real saved = w;
            auto central = [&](Real h) {
                w = saved + h;
                const Real fp = eval();
                w = saved - h;
                const Real fm = eval();
                return (fp - fm) / (2.0 * h);
            };
            const Real numeric = ridders(central, opts.eps);
            w = saved;
            const Real rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opts.floor});
            ++rep.checked;
            if (rel > rep.max_rel_error || rep.worst_index < 0) {
                rep.max_rel_error = rel;
                rep.worst_param = p->name;
                rep.worst_index = i;
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::string s = std::string(kAblationHeader) + "\n";
    for (const auto& r : rows)
        s += r.group + "," + r.variant + "," + r.direction + "," + r.metric + "," + fmt(r.score) + "," + fmt(r.baseline) +
             "," + std::to_string(r.samples) + "\n";
    write_file_atomic(path, s);
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
    std::string s = std::string(kSweepHeader) + "\n";
    for (const auto& r : rows) s += fmt(r.t_cond) + "," + fmt(r.score) + "\n";
    write_file_atomic(path, s);
}

void write_sweep_svg(const std::filesystem::path& path, const std::vector<SweepRow>& rows, const std::string& title) {
    const Real W = 480, H = 320, L = 50, R = 20, T = 30, B = 40;
    auto px = [&](Real t) { return L + t * (W - L - R); };
    auto py = [&](Real s) { return H - B - std::clamp(s, 0.0, 1.0) * (H - T - B); };
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(W) + "\" height=\"" + fmt(H) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
    s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(H - B) + "\" x2=\"" + fmt(W - R) + "\" y2=\"" + fmt(H - B) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(T) + "\" x2=\"" + fmt(L) + "\" y2=\"" + fmt(H - B) + "\" stroke=\"black\"/>\n";
    for (Real v : {0.0, 0.5, 1.0}) {
        s += "<text x=\"" + fmt(px(v)) + "\" y=\"" + fmt(H - B + 16) + "\" text-anchor=\"middle\" font-size=\"11\">" + fmt(v) + "</text>\n";
        s += "<text x=\"" + fmt(L - 6) + "\" y=\"" + fmt(py(v) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" + fmt(v) + "</text>\n";
    }
    s += "<text x=\"" + fmt(W / 2) + "\" y=\"" + fmt(H - 6) + "\" text-anchor=\"middle\" font-size=\"12\">t_cond</text>\n";
    std::string pts;
    for (const auto& r : rows) pts += fmt(px(r.t_cond)) + "," + fmt(py(r.score)) + " ";
    s += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (const auto& r : rows)
        s += "<circle cx=\"" + fmt(px(r.t_cond)) + "\" cy=\"" + fmt(py(r.score)) + "\" r=\"3\" fill=\"steelblue\"/>\n";
    s += "</svg>\n";
    write_file_atomic(path, s);
}

}  // namespace avlink
