#pragma once

#include "twinseg/parameter_store.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace twinseg {

// Container layout (all integers little-endian):
//   "TWSGCKPT" | u32 format version | u64 header length | u32 header CRC-32 |
//   UTF-8 JSON header | f64 payloads in header order
// The header lists entries sorted by name with kind, shape, element offset
// and count, plus the payload CRC-32 and the writer's config hash.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointPreamble = 8 + 4 + 8 + 4;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, header_corrupt, truncated, layout, checksum };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

const char* checkpoint_error_name(CheckpointError::Kind kind);

/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path,
                     const std::string& config_hash = "");

/// Reads and verifies the whole file before building the store; on any
/// error nothing is returned.
ParameterStore load_checkpoint(const std::filesystem::path& path, std::string* config_hash = nullptr);

/// Serialised bytes, as written by save_checkpoint.
std::string encode_checkpoint(const ParameterStore& params, const std::string& config_hash = "");
ParameterStore decode_checkpoint(const std::string& bytes, std::string* config_hash = nullptr);

}  // namespace twinseg
