#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmrlm/unet.hpp"
#include "json.hpp"

namespace cmrlm {

/// Where a set of weights came from.
struct Provenance {
  std::string config_digest;
  int epoch = -1;
  double val_loss = 0.0;
  bool has_val_loss = false;
  /// Settings inference must reproduce (frame size, heat-map sigma, tau, ...).
  nlohmann::json settings = nlohmann::json::object();
};

struct ModelCheckpoint {
  UNet<float> model;
  Provenance provenance;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'L', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j);  // throws ConfigError

/// Layout: "CMLK", u32 version, u32 header length, JSON header, then
/// little-endian f32 tensor payloads in header-table order.
std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);  // throws LoadError

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the canonical dump of `config`, as 16 hex digits.
std::string config_digest(const nlohmann::json& config);

}  // namespace cmrlm
