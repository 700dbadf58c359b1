// SPDX-License-Identifier: Apache-2.0
#include "avlink/checkpoint.hpp"

#include <sstream>

namespace avlink {

namespace {

constexpr const char* kMod = "checkpoint";
constexpr char kMagic[8] = {'A', 'V', 'L', 'K', 'C', 'K', 'P', 'T'};

std::string encode(const std::string& tag, const nlohmann::json& cfg, const std::vector<Digest>& refs,
                   const ad::ParamStore& store) {
    std::ostringstream os;
    BinaryWriter w(os);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    w.bytes(tag.data(), 4);
    const std::string js = cfg.dump();
    w.str(js);
    const Digest d = sha256(js);
    w.bytes(d.data(), d.size());
    if (tag == "FUSN") {
        w.u32(static_cast<std::uint32_t>(refs.size()));
        for (const Digest& r : refs) w.bytes(r.data(), r.size());
    }
    const auto params = store.all();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const ad::Parameter* p : params) {
        w.str(p->name);
        w.u32(static_cast<std::uint32_t>(p->value.rows()));
        w.u32(static_cast<std::uint32_t>(p->value.cols()));
        w.f32_array(p->value.data(), static_cast<std::size_t>(p->value.size()));
    }
    return os.str();
}

struct Decoded {
    CheckpointInfo info;
    std::vector<std::pair<std::string, Matrix>> params;
};

Decoded decode(const std::filesystem::path& path, bool with_values) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(kMod, "checkpoint not found: " + path.string());
    BinaryReader r(is, path.string());
    char magic[8];
    r.bytes(magic, 8, "magic");
    if (!std::equal(magic, magic + 8, kMagic)) r.fail("not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    Decoded d;
    char tag[4];
    r.bytes(tag, 4, "section tag");
    d.info.tag.assign(tag, 4);
    if (d.info.tag != "BKBN" && d.info.tag != "FUSN") r.fail("unknown section tag '" + d.info.tag + "'");
    const std::string js = r.str("config", 1 << 20);
    r.bytes(d.info.config_digest.data(), 32, "config digest");
    if (sha256(js) != d.info.config_digest) r.fail("config digest mismatch: config section is corrupted");
    try {
        d.info.config = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("config is not valid JSON: ") + e.what());
    }
    if (d.info.tag == "FUSN") {
        const std::uint32_t n = r.u32("reference count");
        if (n > 16) r.fail("implausible reference count");
        d.info.references.resize(n);
        for (auto& ref : d.info.references) r.bytes(ref.data(), 32, "reference digest");
    }
    const std::uint32_t np = r.u32("parameter count");
    for (std::uint32_t i = 0; i < np; ++i) {
        std::string name = r.str("parameter name", 4096);
        const std::uint32_t rows = r.u32("rows");
        const std::uint32_t cols = r.u32("cols");
        if (static_cast<std::uint64_t>(rows) * cols > (1ull << 31)) r.fail("parameter " + name + " is implausibly large");
        d.info.shapes.push_back({name, {rows, cols}});
        Matrix m(rows, cols);
        r.f32_array(m.data(), static_cast<std::size_t>(m.size()), "parameter values");
        if (with_values) d.params.emplace_back(std::move(name), std::move(m));
    }
    char extra;
    if (is.read(&extra, 1)) r.fail("trailing bytes after parameter section");
    return d;
}

void assign(ad::ParamStore& store, const std::vector<std::pair<std::string, Matrix>>& values, const std::string& source) {
    if (values.size() != store.all().size())
        throw FormatError(kMod, source + ": holds " + std::to_string(values.size()) + " parameters, model expects " +
                                    std::to_string(store.all().size()));
    for (const auto& [name, m] : values) {
        ad::Parameter* p = store.find(name);
        if (!p) throw FormatError(kMod, source + ": unknown parameter " + name);
        if (p->value.rows() != m.rows() || p->value.cols() != m.cols())
            throw FormatError(kMod, source + ": parameter " + name + " has shape " + shape_str(m) + ", model expects " +
                                        shape_str(p->value));
        p->value = m;
    }
}

}  // namespace

Digest params_digest(const ad::ParamStore& store) {
    Sha256 h;
    for (const ad::Parameter* p : store.all()) {
        h.update(p->name.data(), p->name.size());
        const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
        h.update(shape, sizeof shape);
        h.update(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(Real));
    }
    return h.finish();
}

Digest file_digest(const std::filesystem::path& path) {
    const std::string bytes = read_file(path, kMod);
    return sha256(bytes);
}

void save_backbone(const std::filesystem::path& path, const Backbone& b) {
    write_file_atomic(path, encode("BKBN", nlohmann::json(b.config()), {}, b.params()));
}

std::unique_ptr<Backbone> load_backbone(const std::filesystem::path& path) {
    Decoded d = decode(path, true);
    if (d.info.tag != "BKBN") throw FormatError(kMod, path.string() + ": expected a backbone checkpoint, found " + d.info.tag);
    BackboneConfig cfg;
    try {
        cfg = d.info.config.get<BackboneConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(kMod, path.string() + ": bad backbone config: " + e.what());
    }
    auto b = std::make_unique<Backbone>(cfg, 0);
    assign(b->params(), d.params, path.string());
    return b;
}

void save_fusion(const std::filesystem::path& path, const FusionStack& f, const BackboneConfig& audio,
                 const BackboneConfig& video, const Digest& audio_ckpt, const Digest& video_ckpt) {
    nlohmann::json cfg{{"fusion", f.config()}, {"audio", audio}, {"video", video}};
    write_file_atomic(path, encode("FUSN", cfg, {audio_ckpt, video_ckpt}, f.params()));
}

std::unique_ptr<FusionStack> load_fusion(const std::filesystem::path& path, const Digest& audio_ckpt,
                                         const Digest& video_ckpt) {
    Decoded d = decode(path, true);
    if (d.info.tag != "FUSN") throw FormatError(kMod, path.string() + ": expected a fusion checkpoint, found " + d.info.tag);
    if (d.info.references.size() != 2) throw FormatError(kMod, path.string() + ": expected two backbone references");
    const char* names[2] = {"audio", "video"};
    const Digest given[2] = {audio_ckpt, video_ckpt};
    for (int i = 0; i < 2; ++i)
        if (d.info.references[i] != given[i])
            throw FormatError(kMod, path.string() + ": " + names[i] + " backbone digest mismatch (trained against " +
                                        to_hex(d.info.references[i]).substr(0, 16) + ", given " + to_hex(given[i]).substr(0, 16) + ")");
    FusionConfig fc;
    BackboneConfig ac, vc;
    try {
        fc = d.info.config.at("fusion").get<FusionConfig>();
        ac = d.info.config.at("audio").get<BackboneConfig>();
        vc = d.info.config.at("video").get<BackboneConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(kMod, path.string() + ": bad fusion config: " + e.what());
    }
    auto f = std::make_unique<FusionStack>(fc, ac, vc, 0);
    assign(f->params(), d.params, path.string());
    return f;
}

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) { return decode(path, false).info; }

}  // namespace avlink
