#include "avlink/checkpoint.hpp"

#include <catch_amalgamated.hpp>

#include <unistd.h>

#include <fstream>

using namespace avlink;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("avlink_ckpt_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

BackboneConfig tiny(Modality m) {
    BackboneConfig c;
    c.modality = m;
    c.n_blocks = 2;
    c.hidden = 12;
    c.heads = 1;
    c.mlp_hidden = 24;
    c.text_vocab = 4;
    c.text_dim = 8;
    c.in_channels = 4;
    c.freq_dim = 16;
    return c;
}

FusionConfig tiny_fusion() {
    FusionConfig f;
    f.n_fusion = 2;
    f.common_dim = 8;
    f.heads = 2;
    f.mlp_hidden = 16;
    f.freq_dim = 8;
    return f;
}

void perturb(ad::ParamStore& s, std::uint64_t seed) {
    Rng rng(seed);
    for (ad::Parameter* p : s.all())
        for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.1 * rng.normal();
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("backbone checkpoints round trip at float32 precision") {
    const fs::path dir = temp_dir("bb");
    Backbone b(tiny(Modality::audio), 1);
    perturb(b.params(), 2);
    save_backbone(dir / "a.ckpt", b);
    auto back = load_backbone(dir / "a.ckpt");
    REQUIRE(back->params().size() == b.params().size());
    for (ad::Parameter* p : b.params().all()) {
        ad::Parameter* q = back->params().find(p->name);
        REQUIRE(q != nullptr);
        REQUIRE(q->value.rows() == p->value.rows());
        REQUIRE(q->value.cols() == p->value.cols());
        for (Index i = 0; i < p->value.size(); ++i)
            REQUIRE(q->value.data()[i] == static_cast<Real>(static_cast<float>(p->value.data()[i])));
    }
    REQUIRE(nlohmann::json(back->config()) == nlohmann::json(b.config()));
    // A second save of the loaded model is byte identical.
    save_backbone(dir / "b.ckpt", *back);
    REQUIRE(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    REQUIRE(file_digest(dir / "a.ckpt") == file_digest(dir / "b.ckpt"));
    REQUIRE(params_digest(back->params()) != params_digest(b.params()));  // float64 vs float32 values
    fs::remove_all(dir);
}

TEST_CASE("fusion checkpoints are bound to their backbone digests") {
    const fs::path dir = temp_dir("fu");
    Backbone a(tiny(Modality::audio), 1);
    Backbone v(tiny(Modality::video), 2);
    save_backbone(dir / "a.ckpt", a);
    save_backbone(dir / "v.ckpt", v);
    const Digest da = file_digest(dir / "a.ckpt");
    const Digest dv = file_digest(dir / "v.ckpt");
    FusionStack f(tiny_fusion(), a.config(), v.config(), 3);
    perturb(f.params(), 4);
    save_fusion(dir / "f.ckpt", f, a.config(), v.config(), da, dv);

    auto back = load_fusion(dir / "f.ckpt", da, dv);
    REQUIRE(back->params().size() == f.params().size());
    for (ad::Parameter* p : f.params().all())
        REQUIRE((back->params().find(p->name)->value - p->value).cwiseAbs().maxCoeff() < 1e-6);

    try {
        load_fusion(dir / "f.ckpt", dv, da);
        FAIL("expected a digest mismatch");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("digest mismatch") != std::string::npos);
    }

    const CheckpointInfo info = inspect_checkpoint(dir / "f.ckpt");
    REQUIRE(info.tag == "FUSN");
    REQUIRE(info.references.size() == 2);
    REQUIRE(info.references[0] == da);
    REQUIRE(info.references[1] == dv);
    REQUIRE(info.shapes.size() == f.params().size());
    fs::remove_all(dir);
}

TEST_CASE("checkpoint loading reports bad files") {
    const fs::path dir = temp_dir("bad");
    try {
        load_backbone(dir / "missing.ckpt");
        FAIL("expected an error");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("checkpoint not found: ") != std::string::npos);
        REQUIRE(std::string(e.what()).find("missing.ckpt") != std::string::npos);
    }

    Backbone b(tiny(Modality::video), 5);
    save_backbone(dir / "v.ckpt", b);
    std::string bytes = slurp(dir / "v.ckpt");

    SECTION("wrong kind") {
        REQUIRE_THROWS_AS(load_fusion(dir / "v.ckpt", Digest{}, Digest{}), FormatError);
    }
    SECTION("bad magic") {
        bytes[1] ^= 0x20;
        std::ofstream(dir / "x.ckpt", std::ios::binary) << bytes;
        REQUIRE_THROWS_AS(load_backbone(dir / "x.ckpt"), FormatError);
    }
    SECTION("truncated") {
        std::ofstream(dir / "x.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        REQUIRE_THROWS_AS(load_backbone(dir / "x.ckpt"), FormatError);
    }
    SECTION("trailing bytes") {
        std::ofstream(dir / "x.ckpt", std::ios::binary) << bytes << "zz";
        REQUIRE_THROWS_AS(load_backbone(dir / "x.ckpt"), FormatError);
    }
    fs::remove_all(dir);
}
