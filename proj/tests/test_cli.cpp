#include "avlink/common.hpp"

#include <catch_amalgamated.hpp>

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

const fs::path& root() {
    static const fs::path p = [] {
        fs::path r = fs::temp_directory_path() / ("avlink_cli_" + std::to_string(::getpid()));
        fs::remove_all(r);
        fs::create_directories(r);
        return r;
    }();
    return p;
}

// Small models and few steps so the whole pipeline runs in seconds.
const char* kTiny =
    " --set data.duration=2.0 --set n_eval=2"
    " --set audio.hidden=8 --set audio.heads=1 --set audio.mlp_hidden=16 --set audio.n_blocks=2"
    " --set video.hidden=12 --set video.heads=1 --set video.mlp_hidden=16 --set video.n_blocks=2"
    " --set fusion.common_dim=8 --set fusion.heads=1 --set fusion.mlp_hidden=16 --set fusion.n_fusion=2"
    " --set fusion.freq_dim=8 --set audio.freq_dim=8 --set video.freq_dim=8"
    " --set base_train.total_steps=3 --set base_train.warmup_steps=1 --set base_train.batch=2"
    " --set fusion_train.total_steps=3 --set fusion_train.warmup_steps=1 --set fusion_train.batch=2"
    " --set infer.steps=2 --set eval.baseline_trials=5 --set eval.sweep_samples=1 --set eval.sweep_grid=[0.5,0.96]";

Result run(const std::string& args) {
    const std::string cmd = "AVLINK_RUN_ROOT='" + root().string() + "' '" AVLINK_CLI_PATH "' " + args + " 2>&1";
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::string read_text(const fs::path& p) {
    std::ifstream is(p);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

struct Pipeline {
    std::string train, eval, audio, video, fusion;
};

// Built once and shared by the cases below.
const Pipeline& pipeline() {
    static const Pipeline p = [] {
        Pipeline q;
        Result r = run(std::string("gen-data --split train --n 4") + kTiny);
        REQUIRE(r.code == 0);
        q.train = first_line(r.out);
        r = run(std::string("gen-data --split eval") + kTiny);
        REQUIRE(r.code == 0);
        q.eval = first_line(r.out);
        r = run("train-base --modality audio --data " + q.train + kTiny);
        INFO(r.out);
        REQUIRE(r.code == 0);
        q.audio = first_line(r.out);
        r = run("train-base --modality video --data " + q.train + kTiny);
        REQUIRE(r.code == 0);
        q.video = first_line(r.out);
        r = run("train-fusion --audio-ckpt " + q.audio + " --video-ckpt " + q.video + " --data " + q.train + kTiny);
        INFO(r.out);
        REQUIRE(r.code == 0);
        q.fusion = first_line(r.out);
        return q;
    }();
    return p;
}

std::string ckpts(const Pipeline& p) {
    return " --audio-ckpt " + p.audio + " --video-ckpt " + p.video + " --fusion-ckpt " + p.fusion;
}

}  // namespace

TEST_CASE("gen-data writes a dataset that inspect can read") {
    Result r = run("gen-data --split train --n 8");
    REQUIRE(r.code == 0);
    const std::string path = first_line(r.out);
    REQUIRE(fs::exists(path));
    const fs::path dir = fs::path(path).parent_path();
    REQUIRE(fs::exists(dir / "config.json"));
    REQUIRE(fs::exists(dir / "run.log"));
    REQUIRE(read_text(dir / "digest.txt").find("data.avd ") != std::string::npos);
    REQUIRE(dir.filename().string().ends_with("-gen-data"));

    r = run("inspect-ckpt " + path);
    REQUIRE(r.code == 0);
    const auto info = nlohmann::json::parse(r.out);
    REQUIRE(info["kind"] == "dataset");
    REQUIRE(info["records"] == 8);
}

TEST_CASE("unknown config keys fail with suggestions") {
    Result r = run("gen-data --n 1 --set fusion.tcond=0.5");
    REQUIRE(r.code != 0);
    REQUIRE(r.out.find("fusion.t_cond") != std::string::npos);
    r = run("gen-data --n 1 --set video.patch=2");
    REQUIRE(r.code != 0);
    REQUIRE(r.out.find("video.patch") != std::string::npos);
}

TEST_CASE("missing checkpoints are named in the error") {
    const Result r = run("generate --audio-ckpt /nonexistent/a.ckpt --video-ckpt /nonexistent/v.ckpt"
                         " --fusion-ckpt /nonexistent/f.ckpt --data /nonexistent/d.avd");
    REQUIRE(r.code != 0);
    REQUIRE(r.out.find("checkpoint not found: /nonexistent/a.ckpt") != std::string::npos);
}

TEST_CASE("tiny pipeline runs end to end") {
    const Pipeline& p = pipeline();
    REQUIRE(fs::exists(p.audio));
    REQUIRE(fs::exists(fs::path(p.audio).parent_path() / "loss.csv"));
    REQUIRE(fs::exists(p.fusion));

    Result r = run("inspect-ckpt " + p.fusion);
    REQUIRE(r.code == 0);
    const auto info = nlohmann::json::parse(r.out);
    REQUIRE(info["tag"] == "FUSN");
    REQUIRE(info["references"].size() == 2);

    r = run("generate" + ckpts(p) + " --data " + p.eval + " --index 1 --diagnostics" + kTiny);
    INFO(r.out);
    REQUIRE(r.code == 0);
    const fs::path gen_dir = fs::path(first_line(r.out)).parent_path();
    REQUIRE(fs::exists(gen_dir / "generated.avd"));
    REQUIRE(fs::exists(gen_dir / "steps.csv"));

    r = run("eval" + ckpts(p) + " --data " + p.eval + " --group timestep --variant fixed" + kTiny);
    INFO(r.out);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("v2a onset_acc") != std::string::npos);

    r = run("sweep" + ckpts(p) + " --data " + p.eval + kTiny);
    INFO(r.out);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("0.9600") != std::string::npos);
}

TEST_CASE("fusion training refuses mismatched backbone digests") {
    const Pipeline& p = pipeline();
    const std::string wrong(64, '0');
    const Result r = run("train-fusion --audio-ckpt " + p.audio + " --video-ckpt " + p.video + " --data " + p.train +
                         " --audio-digest " + wrong + kTiny);
    REQUIRE(r.code != 0);
    REQUIRE(r.out.find("digest mismatch") != std::string::npos);

    // A fusion checkpoint cannot be used with swapped backbones.
    const Result g = run("eval --audio-ckpt " + p.video + " --video-ckpt " + p.audio + " --fusion-ckpt " + p.fusion +
                         " --data " + p.eval + kTiny);
    REQUIRE(g.code != 0);
}

TEST_CASE("grad-check passes and detects an injected fault") {
    const std::string small = " --set audio.hidden=8 --set audio.heads=1 --set video.hidden=12 --set video.heads=1"
                              " --set data.duration=0.5 --set data.max_events=1";
    Result r = run("grad-check --target all" + small);
    INFO(r.out);
    REQUIRE(r.code == 0);
    r = run("grad-check --target block --inject-fault" + small);
    REQUIRE(r.code == 1);
}
