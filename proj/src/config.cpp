// SPDX-License-Identifier: Apache-2.0
#include "avlink/config.hpp"

#include "avlink/io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace avlink {

namespace {
constexpr const char* kMod = "config";
using nlohmann::json;
}  // namespace

BackboneConfig desk_backbone(Modality m, const DataGenConfig& data) {
    BackboneConfig c = BackboneConfig::toy(m);
    c.n_blocks = 6;
    c.heads = 2;
    c.freq_dim = 64;
    if (m == Modality::audio) {
        c.hidden = 32;
        c.in_channels = data.audio_channels();
    } else {
        c.hidden = 24;
        c.in_channels = data.video_channels();
        c.patch = data.video_patch;
    }
    c.mlp_hidden = 4 * c.hidden;
    return c;
}

RunConfig RunConfig::desk() {
    RunConfig c;
    c.data.audio_gain = 4.0;
    c.data.video_gain = 4.0;
    c.audio = desk_backbone(Modality::audio, c.data);
    c.video = desk_backbone(Modality::video, c.data);
    c.fusion.common_dim = 32;
    c.fusion.heads = 2;
    c.fusion.mlp_hidden = 128;
    c.fusion.freq_dim = 32;
    c.base_train.total_steps = 2000;
    c.base_train.warmup_steps = 200;
    c.fusion_train = c.base_train;
    c.fusion_train.optim.lr = 1e-3;
    return c;
}

void RunConfig::validate() const {
    data.validate();
    audio.validate();
    video.validate();
    fusion.validate();
    base_train.validate();
    fusion_train.validate();
    infer.guidance.validate();
    if (audio.modality != Modality::audio || video.modality != Modality::video)
        throw ConfigError(kMod, "audio/video sections carry the wrong modality");
    if (audio.in_channels != data.audio_channels())
        throw ConfigError(kMod, "audio.in_channels must equal the audio codec width " + std::to_string(data.audio_channels()));
    if (video.in_channels != data.video_channels())
        throw ConfigError(kMod, "video.in_channels must equal the video codec width " + std::to_string(data.video_channels()));
    if (video.patch != data.video_patch) throw ConfigError(kMod, "video.patch must equal data.video_patch");
    if (audio.n_blocks != video.n_blocks) throw ConfigError(kMod, "audio and video backbones need the same depth");
    if (n_train < 1 || n_eval < 1) throw ConfigError(kMod, "n_train and n_eval must be >= 1");
    if (infer.t_cond && !(*infer.t_cond >= 0.0 && *infer.t_cond <= 1.0))
        throw ConfigError(kMod, "infer.t_cond must lie in [0,1]");
    if (eval.detector.threshold <= 0.0) throw ConfigError(kMod, "eval.detector.threshold must be > 0");
    if (eval.detector.refractory < 0.0) throw ConfigError(kMod, "eval.detector.refractory must be >= 0");
    if (eval.baseline_trials < 1 || eval.sweep_samples < 1 || eval.threads < 1) throw ConfigError(kMod, "eval counts must be >= 1");
    if (eval.sweep_grid.empty()) throw ConfigError(kMod, "eval.sweep_grid is empty");
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"seed", c.seed},
             {"data", c.data},
             {"n_train", c.n_train},
             {"n_eval", c.n_eval},
             {"audio", c.audio},
             {"video", c.video},
             {"fusion", c.fusion},
             {"base_train", c.base_train},
             {"fusion_train", c.fusion_train}};
    j["infer"] = json{{"weight", c.infer.guidance.weight},
                      {"steps", c.infer.guidance.steps},
                      {"t_cond", c.infer.t_cond ? json(*c.infer.t_cond) : json(nullptr)},
                      {"resample_cond_noise", c.infer.resample_cond_noise}};
    j["eval"] = json{{"threshold", c.eval.detector.threshold},
                     {"refractory", c.eval.detector.refractory},
                     {"onset_tolerance", c.eval.onset_tolerance},
                     {"baseline_trials", c.eval.baseline_trials},
                     {"sweep_samples", c.eval.sweep_samples},
                     {"threads", c.eval.threads},
                     {"sweep_grid", c.eval.sweep_grid}};
}

void from_json(const json& j, RunConfig& c) {
    j.at("seed").get_to(c.seed);
    j.at("data").get_to(c.data);
    j.at("n_train").get_to(c.n_train);
    j.at("n_eval").get_to(c.n_eval);
    j.at("audio").get_to(c.audio);
    j.at("video").get_to(c.video);
    j.at("fusion").get_to(c.fusion);
    j.at("base_train").get_to(c.base_train);
    j.at("fusion_train").get_to(c.fusion_train);
    const json& inf = j.at("infer");
    inf.at("weight").get_to(c.infer.guidance.weight);
    inf.at("steps").get_to(c.infer.guidance.steps);
    if (inf.at("t_cond").is_null())
        c.infer.t_cond.reset();
    else
        c.infer.t_cond = inf.at("t_cond").get<Real>();
    inf.at("resample_cond_noise").get_to(c.infer.resample_cond_noise);
    const json& ev = j.at("eval");
    ev.at("threshold").get_to(c.eval.detector.threshold);
    ev.at("refractory").get_to(c.eval.detector.refractory);
    ev.at("onset_tolerance").get_to(c.eval.onset_tolerance);
    ev.at("baseline_trials").get_to(c.eval.baseline_trials);
    ev.at("sweep_samples").get_to(c.eval.sweep_samples);
    ev.at("threads").get_to(c.eval.threads);
    ev.at("sweep_grid").get_to(c.eval.sweep_grid);
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::vector<std::string> nearest_keys(const std::string& key, const std::vector<std::string>& candidates, std::size_t n) {
    std::vector<std::pair<std::size_t, std::string>> scored;
    for (const auto& c : candidates) {
        // Compare against the full path and its last component so "fusion.tcond" finds "fusion.t_cond".
        std::size_t d = edit_distance(key, c);
        const auto dot = c.rfind('.');
        if (dot != std::string::npos) d = std::min(d, edit_distance(key, c.substr(dot + 1)) + 1);
        scored.emplace_back(d, c);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < scored.size() && i < n; ++i) out.push_back(scored[i].second);
    return out;
}

namespace {

void collect(const json& doc, const std::string& prefix, std::vector<std::string>& out) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object())
            collect(*it, path, out);
        else
            out.push_back(path);
    }
}

[[noreturn]] void unknown_key(const std::string& key, const json& root) {
    const auto near = nearest_keys(key, leaf_paths(root));
    std::string msg = "unknown key '" + key + "'; nearest valid keys:";
    for (const auto& k : near) msg += " " + k;
    throw ConfigError(kMod, msg);
}

void merge_into(json& base, const json& user, const std::string& prefix, const json& root) {
    if (!user.is_object()) throw ConfigError(kMod, "section '" + prefix + "' must be an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) unknown_key(path, root);
        json& slot = base[it.key()];
        if (slot.is_object())
            merge_into(slot, *it, path, root);
        else
            slot = *it;
    }
}

}  // namespace

std::vector<std::string> leaf_paths(const json& doc) {
    std::vector<std::string> out;
    collect(doc, "", out);
    return out;
}

json merge_strict(const json& base, const json& user) {
    json out = base;
    merge_into(out, user, "", base);
    return out;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(kMod, "override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &doc;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i])) unknown_key(key, doc);
        node = &(*node)[parts[i]];
    }
    if (node->is_object()) throw ConfigError(kMod, "override '" + key + "' names a section, not a value");
    *node = value;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = RunConfig::desk();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError(kMod, "cannot open config file " + path);
        json user = json::parse(in, nullptr, false);
        if (user.is_discarded()) throw ConfigError(kMod, "config file " + path + " is not valid JSON");
        doc = merge_strict(doc, user);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    RunConfig c;
    try {
        c = doc.get<RunConfig>();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(kMod, std::string("bad value type: ") + e.what());
    }
    c.validate();
    return c;
}

std::string config_digest(const RunConfig& c) { return to_hex(sha256(json(c).dump())); }

}  // namespace avlink
