#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "dpe/data.hpp"
#include "dpe/ensemble.hpp"

namespace dpe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to rebuild and evaluate a trained ensemble.
struct Checkpoint {
  EnsembleModel model;
  std::optional<Standardizer> standardizer;
};

/// Layout: 8-byte magic "DPECKPT\0", u32 version, u64 manifest length,
/// UTF-8 JSON manifest, then the payload of little-endian f64 blocks at the
/// offsets listed in the manifest.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dpe
