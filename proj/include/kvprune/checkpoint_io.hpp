#pragma once

#include "kvprune/finetune.hpp"
#include "kvprune/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace kvprune {

// Container layout (all integers little-endian):
//   "KVPR1" | u64 header_len | header JSON (UTF-8) | f64 payloads in manifest order
//   optional: "KVPR1-ADPT" | u64 header_len | adapter JSON | f64 payloads
// Manifest entries carry name, shape and byte offset relative to the payload start.
inline constexpr std::string_view kCheckpointMagic = "KVPR1";
inline constexpr std::string_view kAdapterMagic = "KVPR1-ADPT";

struct CheckpointFile {
    Checkpoint checkpoint;
    std::optional<AdapterSet> adapters;
};

std::string serialize_checkpoint(const Checkpoint & ckpt, const AdapterSet * adapters = nullptr);
CheckpointFile deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string & path, const Checkpoint & ckpt, const AdapterSet * adapters = nullptr);
CheckpointFile load_checkpoint_file(const std::string & path);
Checkpoint load_checkpoint(const std::string & path);

// FNV-1a 64 over bytes, as 16 lowercase hex digits.
std::string content_hash(std::string_view bytes);
// Hash of the serialized checkpoint (weights, config, metadata).
std::string checkpoint_hash(const Checkpoint & ckpt);
// Hash of config, channel maps and weights only.
std::string weights_hash(const Checkpoint & ckpt);

std::string read_file(const std::string & path);
void write_file(const std::string & path, std::string_view bytes);

} // namespace kvprune
