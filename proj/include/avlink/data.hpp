// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired audio/video events with exact onset ground truth, the
// invertible toy codecs mapping media to tokens, and the dataset container.
//
// Container layout (little endian):
//   "AVLKDATA"  u32 version  u32 len + config JSON  u64 sample count
//   per sample: u64 record bytes, then
//     u64 seed  i32 class  f64 duration
//     u32 n  f32[n]                      audio waveform
//     u32 F H W C  f32[F*H*W*C]          video frames
//     u32 n  f64[n]                      event times (s)
//     i32 n (-1 = absent)  i32[n]        audio prompt
//     i32 n (-1 = absent)  i32[n]        video prompt

#pragma once

#include "avlink/backbone.hpp"
#include "avlink/rng.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>

namespace avlink {

struct DataGenConfig {
    Real duration = 5.16;
    Real fps = 6.0;
    Real audio_sample_rate = 96.0;  // waveform samples per second
    Real audio_token_rate = 24.0;   // eta_a
    int height = 8;
    int width = 8;
    int channels = 1;
    int video_patch = 4;
    int min_events = 1;
    int max_events = 3;
    int min_separation_frames = 2;
    int n_classes = 2;
    // Fixed gains of the token codecs (tokens = gain * media).
    Real audio_gain = 1.0;
    Real video_gain = 1.0;

    void validate() const;
    int frames() const;
    Index audio_length() const;
    int audio_window() const;
    Index audio_tokens() const;
    Index audio_padding() const { return audio_tokens() * audio_window() - audio_length(); }
    int audio_channels() const { return audio_window(); }
    int video_channels() const { return channels * video_patch * video_patch; }
};

void to_json(nlohmann::json& j, const DataGenConfig& c);
void from_json(const nlohmann::json& j, DataGenConfig& c);

struct AVSample {
    std::vector<Real> audio;
    VideoFrames video;
    std::vector<Real> events;  // seconds, ascending
    int event_class = 0;
    Prompt audio_prompt;
    Prompt video_prompt;
    Real duration = 0.0;
    std::uint64_t seed = 0;

    void validate(const DataGenConfig& cfg) const;
    bool operator==(const AVSample&) const = default;
};

// Prompt token for event class c (0 is the null token).
inline int class_token(int c) { return kNullToken + 1 + c; }

// Waveform shape of one event of class c, starting at the onset sample.
std::vector<Real> audio_signature(int cls);
// Pixel intensity of the class-c visual signature at (y, x).
Real visual_signature(const DataGenConfig& cfg, int cls, int y, int x);

// Event times are drawn on the frame grid so audio and video onsets align exactly.
AVSample gen_sample(const DataGenConfig& cfg, Rng& rng, int n_events = -1);
// Clip with the given events (seconds, each mapped to frame round(t * fps)) of one class.
AVSample render_sample(const DataGenConfig& cfg, const std::vector<Real>& events, int cls);
// Per-sample seed derived from a dataset seed, so generation order does not matter.
AVSample gen_sample_seeded(const DataGenConfig& cfg, std::uint64_t seed);

struct EncodedAudio {
    TokenSequence tokens;
    Index padding = 0;  // zeros appended before framing
};

EncodedAudio encode_audio(const std::vector<Real>& waveform, int window, Real token_rate, Real gain = 1.0);
std::vector<Real> decode_audio(const TokenSequence& tokens, Index padding, Real gain = 1.0);
TokenSequence encode_video(const VideoFrames& frames, int patch, Real fps, Real gain = 1.0);
VideoFrames decode_video(const TokenSequence& tokens, int patch, int channels, Real gain = 1.0);

// Encoders bound to one data config.
struct Codec {
    DataGenConfig cfg;

    TokenSequence audio(const AVSample& s) const;
    TokenSequence video(const AVSample& s) const;
    std::vector<Real> decode_audio(const TokenSequence& t) const;
    VideoFrames decode_video(const TokenSequence& t) const;
    // Empty (all-zero) token layouts of the right shape.
    TokenSequence audio_layout() const;
    TokenSequence video_layout() const;
};

struct Dataset {
    DataGenConfig config;
    std::vector<AVSample> samples;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

class DatasetWriter {
public:
    DatasetWriter(const std::filesystem::path& path, const DataGenConfig& cfg);
    ~DatasetWriter();
    void write(const AVSample& s);
    // Patches the sample count, renames into place and writes the manifest.
    void close();
    std::uint64_t count() const { return count_; }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_;
    DataGenConfig cfg_;
    std::ofstream os_;
    std::uint64_t count_ = 0;
    std::streampos count_pos_;
    std::vector<std::uint64_t> seeds_;
    bool closed_ = false;
};

// Streams records one at a time; random access uses an offset index built from the record length prefixes.
class DatasetReader {
public:
    explicit DatasetReader(const std::filesystem::path& path);

    const DataGenConfig& config() const { return cfg_; }
    std::uint64_t size() const { return count_; }
    bool next(AVSample& out);
    AVSample at(std::uint64_t i);
    void rewind();

private:
    AVSample read_record();

    std::filesystem::path path_;
    std::ifstream is_;
    DataGenConfig cfg_;
    std::uint64_t count_ = 0;
    std::uint64_t cursor_ = 0;
    std::streampos data_start_;
    std::uintmax_t file_size_ = 0;
    std::vector<std::streampos> offsets_;
};

void write_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset read_dataset(const std::filesystem::path& path);
Dataset generate_dataset(const DataGenConfig& cfg, std::uint64_t seed, std::size_t n, std::uint64_t first_index = 0);

std::filesystem::path manifest_path(const std::filesystem::path& dataset);
std::string config_digest(const DataGenConfig& cfg);

}  // namespace avlink
