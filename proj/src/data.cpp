// SPDX-License-Identifier: Apache-2.0
#include "avlink/data.hpp"

#include "avlink/io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace avlink {

namespace {

constexpr const char* kMod = "data";
constexpr char kMagic[8] = {'A', 'V', 'L', 'K', 'D', 'A', 'T', 'A'};

}  // namespace

// ---- config ---------------------------------------------------------------------

void DataGenConfig::validate() const {
    if (!(duration > 0.0)) throw ConfigError(kMod, "duration must be positive");
    if (!(fps > 0.0 && audio_sample_rate > 0.0 && audio_token_rate > 0.0)) throw ConfigError(kMod, "rates must be positive");
    const Real w = audio_sample_rate / audio_token_rate;
    if (std::abs(w - std::round(w)) > 1e-9 || w < 1.0)
        throw ConfigError(kMod, "audio_sample_rate must be an integer multiple of audio_token_rate");
    if (height < 1 || width < 1 || channels < 1 || video_patch < 1) throw ConfigError(kMod, "bad video shape");
    if (height % video_patch != 0 || width % video_patch != 0)
        throw ConfigError(kMod, "frame size must be divisible by video_patch");
    if (min_events < 0 || max_events < min_events) throw ConfigError(kMod, "bad event count range");
    if (min_separation_frames < 1) throw ConfigError(kMod, "min_separation_frames must be >= 1");
    if (n_classes < 1 || n_classes > 4) throw ConfigError(kMod, "n_classes must lie in [1,4]");
    if ((max_events - 1) * min_separation_frames >= frames())
        throw ConfigError(kMod, "clip too short for max_events at the requested separation");
    if (audio_channels() % 2 != 0) throw ConfigError(kMod, "audio window must be even");
    if (!(audio_gain > 0.0 && video_gain > 0.0)) throw ConfigError(kMod, "codec gains must be positive");
}

int DataGenConfig::frames() const { return static_cast<int>(std::lround(duration * fps)); }
Index DataGenConfig::audio_length() const { return static_cast<Index>(std::llround(duration * audio_sample_rate)); }
int DataGenConfig::audio_window() const { return static_cast<int>(std::lround(audio_sample_rate / audio_token_rate)); }
Index DataGenConfig::audio_tokens() const { return (audio_length() + audio_window() - 1) / audio_window(); }

void to_json(nlohmann::json& j, const DataGenConfig& c) {
    j = nlohmann::json{{"duration", c.duration},
                       {"fps", c.fps},
                       {"audio_sample_rate", c.audio_sample_rate},
                       {"audio_token_rate", c.audio_token_rate},
                       {"height", c.height},
                       {"width", c.width},
                       {"channels", c.channels},
                       {"video_patch", c.video_patch},
                       {"min_events", c.min_events},
                       {"max_events", c.max_events},
                       {"min_separation_frames", c.min_separation_frames},
                       {"n_classes", c.n_classes},
                       {"audio_gain", c.audio_gain},
                       {"video_gain", c.video_gain}};
}

void from_json(const nlohmann::json& j, DataGenConfig& c) {
    j.at("duration").get_to(c.duration);
    j.at("fps").get_to(c.fps);
    j.at("audio_sample_rate").get_to(c.audio_sample_rate);
    j.at("audio_token_rate").get_to(c.audio_token_rate);
    j.at("height").get_to(c.height);
    j.at("width").get_to(c.width);
    j.at("channels").get_to(c.channels);
    j.at("video_patch").get_to(c.video_patch);
    j.at("min_events").get_to(c.min_events);
    j.at("max_events").get_to(c.max_events);
    j.at("min_separation_frames").get_to(c.min_separation_frames);
    j.at("n_classes").get_to(c.n_classes);
    j.at("audio_gain").get_to(c.audio_gain);
    j.at("video_gain").get_to(c.video_gain);
}

std::string config_digest(const DataGenConfig& cfg) { return to_hex(sha256(nlohmann::json(cfg).dump())); }

// ---- samples ----------------------------------------------------------------------

void AVSample::validate(const DataGenConfig& cfg) const {
    if (static_cast<Index>(audio.size()) != cfg.audio_length())
        throw ContractError(kMod, "audio length " + std::to_string(audio.size()) + " != " + std::to_string(cfg.audio_length()));
    if (video.frames != cfg.frames() || video.height != cfg.height || video.width != cfg.width || video.channels != cfg.channels)
        throw ContractError(kMod, "video shape does not match the data config");
    for (Real t : events)
        if (!(t >= 0.0 && t < duration)) throw ContractError(kMod, "event time " + std::to_string(t) + " outside clip");
    if (!std::is_sorted(events.begin(), events.end())) throw ContractError(kMod, "events not sorted");
}

std::vector<Real> audio_signature(int cls) {
    // Exact in float32, so container round trips are lossless.
    std::vector<Real> s;
    if (cls % 2 == 0) {
        for (int j = 0; j < 4; ++j) s.push_back(std::pow(-0.5, j));  // click
    } else {
        for (int j = 0; j < 8; ++j) s.push_back(std::pow(0.75, j));  // thud
    }
    if (cls >= 2)
        for (Real& v : s) v *= 0.75;  // quieter variants
    return s;
}

Real visual_signature(const DataGenConfig& cfg, int cls, int y, int x) {
    // One disc per class, centred in one quadrant of the frame.
    static constexpr int kQuad[4][2] = {{0, 0}, {1, 1}, {0, 1}, {1, 0}};
    const Real cy = (kQuad[cls % 4][0] + 0.5) * cfg.height / 2.0;
    const Real cx = (kQuad[cls % 4][1] + 0.5) * cfg.width / 2.0;
    const Real r = 0.4 * std::min(cfg.height, cfg.width) / 2.0;
    const Real dy = y + 0.5 - cy;
    const Real dx = x + 0.5 - cx;
    return dy * dy + dx * dx <= r * r ? 1.0 : 0.0;
}

AVSample gen_sample(const DataGenConfig& cfg, Rng& rng, int n_events) {
    cfg.validate();
    const int F = cfg.frames();
    const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_classes)));
    if (n_events < 0)
        n_events = cfg.min_events + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_events - cfg.min_events + 1)));

    std::vector<int> frames;
    for (int attempt = 0; static_cast<int>(frames.size()) < n_events; ++attempt) {
        if (attempt > 10000) throw Error(kMod, "could not place events at the requested separation");
        const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(F)));
        bool ok = std::all_of(frames.begin(), frames.end(),
                              [&](int o) { return std::abs(o - k) >= cfg.min_separation_frames; });
        if (ok && k / cfg.fps < cfg.duration) frames.push_back(k);
    }
    std::sort(frames.begin(), frames.end());
    std::vector<Real> times;
    for (int k : frames) times.push_back(k / cfg.fps);
    return render_sample(cfg, times, cls);
}

AVSample render_sample(const DataGenConfig& cfg, const std::vector<Real>& events, int cls) {
    cfg.validate();
    if (cls < 0 || cls >= cfg.n_classes) throw ContractError(kMod, "event class " + std::to_string(cls) + " out of range");
    AVSample s;
    s.duration = cfg.duration;
    s.event_class = cls;
    s.audio.assign(static_cast<std::size_t>(cfg.audio_length()), 0.0);
    s.video = VideoFrames(cfg.frames(), cfg.height, cfg.width, cfg.channels);
    const std::vector<Real> sig = audio_signature(cls);
    for (Real t : events) {
        if (!(t >= 0.0 && t < cfg.duration)) throw ContractError(kMod, "event time outside the clip");
        const int k = static_cast<int>(std::lround(t * cfg.fps));
        if (k >= cfg.frames()) throw ContractError(kMod, "event frame outside the clip");
        s.events.push_back(t);
        const Index onset = static_cast<Index>(std::llround(t * cfg.audio_sample_rate));
        for (std::size_t j = 0; j < sig.size(); ++j) {
            const Index i = onset + static_cast<Index>(j);
            if (i < cfg.audio_length()) s.audio[static_cast<std::size_t>(i)] = sig[j];
        }
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x)
                for (int c = 0; c < cfg.channels; ++c) s.video.at(k, y, x, c) = visual_signature(cfg, cls, y, x);
    }
    std::sort(s.events.begin(), s.events.end());
    s.audio_prompt = std::vector<int>{class_token(cls)};
    s.video_prompt = std::vector<int>{class_token(cls)};
    return s;
}

AVSample gen_sample_seeded(const DataGenConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    AVSample s = gen_sample(cfg, rng);
    s.seed = seed;
    return s;
}

Dataset generate_dataset(const DataGenConfig& cfg, std::uint64_t seed, std::size_t n, std::uint64_t first_index) {
    Dataset d;
    d.config = cfg;
    d.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        d.samples.push_back(gen_sample_seeded(cfg, derive_seed(seed, Stream::data, first_index + i)));
    return d;
}

// ---- codecs ------------------------------------------------------------------------

EncodedAudio encode_audio(const std::vector<Real>& waveform, int window, Real token_rate, Real gain) {
    if (window < 1 || window % 2 != 0) throw ContractError(kMod, "audio window must be even and positive");
    if (waveform.empty()) throw ContractError(kMod, "empty waveform");
    const Index n = static_cast<Index>(waveform.size());
    const Index tokens = (n + window - 1) / window;
    EncodedAudio out;
    out.padding = tokens * window - n;
    Matrix data = Matrix::Zero(tokens, window);
    for (Index i = 0; i < n; ++i) data(i / window, i % window) = gain * waveform[static_cast<std::size_t>(i)];
    out.tokens.data = std::move(data);
    out.tokens.modality = Modality::audio;
    out.tokens.eta = token_rate;
    return out;
}

std::vector<Real> decode_audio(const TokenSequence& tokens, Index padding, Real gain) {
    if (tokens.modality != Modality::audio) throw ContractError(kMod, "decode_audio needs audio tokens");
    const Index total = tokens.data.size();
    if (padding < 0 || padding >= std::max<Index>(tokens.channels(), 1) || padding > total)
        throw ContractError(kMod, "bad audio padding " + std::to_string(padding));
    std::vector<Real> w(static_cast<std::size_t>(total - padding));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = tokens.data.data()[i] / gain;  // row-major = time order
    return w;
}

TokenSequence encode_video(const VideoFrames& frames, int patch, Real fps, Real gain) {
    TokenSequence t = patchify_video(frames, patch, fps);
    if (gain != 1.0) t.data *= gain;
    return t;
}

VideoFrames decode_video(const TokenSequence& tokens, int patch, int channels, Real gain) {
    VideoFrames v = unpatchify_video(tokens, patch, channels);
    if (gain != 1.0)
        for (Real& x : v.data) x /= gain;
    return v;
}

TokenSequence Codec::audio(const AVSample& s) const {
    return encode_audio(s.audio, cfg.audio_window(), cfg.audio_token_rate, cfg.audio_gain).tokens;
}

TokenSequence Codec::video(const AVSample& s) const { return encode_video(s.video, cfg.video_patch, cfg.fps, cfg.video_gain); }

std::vector<Real> Codec::decode_audio(const TokenSequence& t) const {
    return avlink::decode_audio(t, cfg.audio_padding(), cfg.audio_gain);
}

VideoFrames Codec::decode_video(const TokenSequence& t) const {
    return avlink::decode_video(t, cfg.video_patch, cfg.channels, cfg.video_gain);
}

TokenSequence Codec::audio_layout() const {
    TokenSequence t;
    t.data = Matrix::Zero(cfg.audio_tokens(), cfg.audio_window());
    t.modality = Modality::audio;
    t.eta = cfg.audio_token_rate;
    return t;
}

TokenSequence Codec::video_layout() const {
    return encode_video(VideoFrames(cfg.frames(), cfg.height, cfg.width, cfg.channels), cfg.video_patch, cfg.fps);
}

// ---- container ----------------------------------------------------------------------

std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
    std::filesystem::path p = dataset;
    p += ".manifest";
    return p;
}

namespace {

void put_prompt(BinaryWriter& w, const Prompt& p) {
    if (!p) {
        w.i32(-1);
        return;
    }
    w.i32(static_cast<std::int32_t>(p->size()));
    for (int id : *p) w.i32(id);
}

Prompt get_prompt(BinaryReader& r, const char* field) {
    const std::int32_t n = r.i32(field);
    if (n < 0) {
        if (n != -1) r.fail(std::string(field) + " has negative length " + std::to_string(n));
        return std::nullopt;
    }
    if (n > 4096) r.fail(std::string(field) + " length " + std::to_string(n) + " is implausible");
    std::vector<int> ids(static_cast<std::size_t>(n));
    for (int& id : ids) id = r.i32(field);
    return ids;
}

std::string encode_record(const AVSample& s) {
    std::ostringstream os;
    BinaryWriter w(os);
    w.u64(s.seed);
    w.i32(s.event_class);
    w.f64(s.duration);
    w.u32(static_cast<std::uint32_t>(s.audio.size()));
    w.f32_array(s.audio.data(), s.audio.size());
    for (int d : {s.video.frames, s.video.height, s.video.width, s.video.channels}) w.u32(static_cast<std::uint32_t>(d));
    w.f32_array(s.video.data.data(), s.video.data.size());
    w.u32(static_cast<std::uint32_t>(s.events.size()));
    for (Real t : s.events) w.f64(t);
    put_prompt(w, s.audio_prompt);
    put_prompt(w, s.video_prompt);
    return os.str();
}

}  // namespace

DatasetWriter::DatasetWriter(const std::filesystem::path& path, const DataGenConfig& cfg) : path_(path), cfg_(cfg) {
    cfg_.validate();
    tmp_ = path;
    tmp_ += ".tmp";
    os_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!os_) throw Error(kMod, "cannot open " + tmp_.string() + " for writing");
    BinaryWriter w(os_);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kDatasetVersion);
    w.str(nlohmann::json(cfg_).dump());
    count_pos_ = os_.tellp();
    w.u64(0);
}

DatasetWriter::~DatasetWriter() {
    if (!closed_) {
        os_.close();
        std::error_code ec;
        std::filesystem::remove(tmp_, ec);
    }
}

void DatasetWriter::write(const AVSample& s) {
    if (closed_) throw ContractError(kMod, "write after close");
    s.validate(cfg_);
    const std::string rec = encode_record(s);
    BinaryWriter w(os_);
    w.u64(rec.size());
    w.bytes(rec.data(), rec.size());
    seeds_.push_back(s.seed);
    ++count_;
}

void DatasetWriter::close() {
    if (closed_) return;
    os_.seekp(count_pos_);
    BinaryWriter(os_).u64(count_);
    os_.close();
    if (!os_) throw Error(kMod, "failed to finalise " + tmp_.string());
    std::filesystem::rename(tmp_, path_);
    closed_ = true;

    std::ostringstream m;
    m << "format AVLKDATA " << kDatasetVersion << "\n";
    m << "config_digest " << config_digest(cfg_) << "\n";
    m << "count " << count_ << "\n";
    for (std::size_t i = 0; i < seeds_.size(); ++i) m << "seed " << i << " " << seeds_[i] << "\n";
    write_file_atomic(manifest_path(path_), m.str());
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : path_(path) {
    is_.open(path, std::ios::binary);
    if (!is_) throw FormatError(kMod, "cannot open dataset " + path.string());
    file_size_ = std::filesystem::file_size(path);
    BinaryReader r(is_, path.string());
    char magic[8];
    r.bytes(magic, sizeof magic, "magic");
    if (!std::equal(magic, magic + 8, kMagic)) r.fail("not a dataset file (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kDatasetVersion)
        r.fail("unsupported dataset version " + std::to_string(version) + " (expected " + std::to_string(kDatasetVersion) + ")");
    const std::string js = r.str("config", 1 << 16);
    try {
        cfg_ = nlohmann::json::parse(js).get<DataGenConfig>();
        cfg_.validate();
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad config header: ") + e.what());
    } catch (const ConfigError& e) {
        r.fail(std::string("bad config header: ") + e.what());
    }
    count_ = r.u64("sample count");
    data_start_ = is_.tellg();

    // Index record offsets from the length prefixes alone.
    std::uint64_t pos = static_cast<std::uint64_t>(data_start_);
    for (std::uint64_t i = 0; i < count_; ++i) {
        if (pos + 8 > file_size_) r.fail("truncated: record " + std::to_string(i) + " of " + std::to_string(count_) + " missing");
        offsets_.push_back(static_cast<std::streamoff>(pos));
        is_.seekg(static_cast<std::streamoff>(pos));
        const std::uint64_t len = r.u64("record length");
        if (len > file_size_ - pos - 8)
            r.fail("record " + std::to_string(i) + " length field " + std::to_string(len) + " runs past end of file");
        pos += 8 + len;
    }
    rewind();
}

void DatasetReader::rewind() {
    is_.clear();
    is_.seekg(data_start_);
    cursor_ = 0;
}

AVSample DatasetReader::read_record() {
    BinaryReader r(is_, path_.string() + " record " + std::to_string(cursor_));
    const std::uint64_t len = r.u64("record length");
    const std::streampos start = is_.tellg();
    AVSample s;
    s.seed = r.u64("seed");
    s.event_class = r.i32("class");
    s.duration = r.f64("duration");
    const std::uint32_t na = r.u32("audio length");
    if (static_cast<std::uint64_t>(na) * 4 > len) r.fail("audio length " + std::to_string(na) + " exceeds record size");
    s.audio.resize(na);
    r.f32_array(s.audio.data(), na, "audio");
    std::uint32_t dims[4];
    for (auto& d : dims) d = r.u32("video shape");
    const std::uint64_t nv = static_cast<std::uint64_t>(dims[0]) * dims[1] * dims[2] * dims[3];
    if (nv * 4 > len) r.fail("video shape exceeds record size");
    s.video = VideoFrames(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]), static_cast<int>(dims[3]));
    r.f32_array(s.video.data.data(), s.video.data.size(), "video");
    const std::uint32_t ne = r.u32("event count");
    if (static_cast<std::uint64_t>(ne) * 8 > len) r.fail("event count exceeds record size");
    s.events.resize(ne);
    for (Real& t : s.events) t = r.f64("event");
    s.audio_prompt = get_prompt(r, "audio prompt");
    s.video_prompt = get_prompt(r, "video prompt");
    if (static_cast<std::uint64_t>(is_.tellg() - start) != len) r.fail("record length field disagrees with contents");
    try {
        s.validate(cfg_);
    } catch (const ContractError& e) {
        r.fail(e.what());
    }
    ++cursor_;
    return s;
}

bool DatasetReader::next(AVSample& out) {
    if (cursor_ >= count_) return false;
    out = read_record();
    return true;
}

AVSample DatasetReader::at(std::uint64_t i) {
    if (i >= count_) throw ContractError(kMod, "sample index " + std::to_string(i) + " out of range (" + std::to_string(count_) + ")");
    is_.clear();
    is_.seekg(offsets_[i]);
    cursor_ = i;
    return read_record();
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) {
    DatasetWriter w(path, d.config);
    for (const auto& s : d.samples) w.write(s);
    w.close();
}

Dataset read_dataset(const std::filesystem::path& path) {
    DatasetReader r(path);
    Dataset d;
    d.config = r.config();
    AVSample s;
    while (r.next(s)) d.samples.push_back(std::move(s));
    return d;
}

}  // namespace avlink
