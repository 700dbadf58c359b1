// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files (little endian):
//   "AVLKCKPT"  u32 version  4-byte section tag ("BKBN" backbone, "FUSN" fusion)
//   u32 len + config JSON  32-byte SHA-256 of that JSON
//   FUSN only: u32 n + n x 32-byte SHA-256 of the referenced backbone checkpoint files (audio, video)
//   u32 parameter count, then per parameter: u32 len + name, u32 rows, u32 cols, f32[rows*cols] row-major

#pragma once

#include "avlink/backbone.hpp"
#include "avlink/fusion.hpp"
#include "avlink/io.hpp"

#include <filesystem>
#include <memory>

namespace avlink {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    std::string tag;
    nlohmann::json config;
    Digest config_digest{};
    std::vector<Digest> references;
    std::vector<std::pair<std::string, std::pair<Index, Index>>> shapes;
};

// Bit-exact digest of parameter names, shapes and in-memory values.
Digest params_digest(const ad::ParamStore& store);
// Digest of a whole file's bytes.
Digest file_digest(const std::filesystem::path& path);

void save_backbone(const std::filesystem::path& path, const Backbone& b);
std::unique_ptr<Backbone> load_backbone(const std::filesystem::path& path);

struct FusionCheckpointConfig {
    FusionConfig fusion;
    BackboneConfig audio;
    BackboneConfig video;
};

void save_fusion(const std::filesystem::path& path, const FusionStack& f, const BackboneConfig& audio,
                 const BackboneConfig& video, const Digest& audio_ckpt, const Digest& video_ckpt);
// Refuses to load when the stored backbone references differ from the given ones.
std::unique_ptr<FusionStack> load_fusion(const std::filesystem::path& path, const Digest& audio_ckpt,
                                         const Digest& video_ckpt);

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

}  // namespace avlink
