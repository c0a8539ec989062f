#pragma once

// "CASV" checkpoint: magic, u16 version, u32-length JSON VariantConfig, u32 entry count,
// entries (u16-length name, u8 dtype, u8 rank, u32 extents, u64 absolute offset), then
// little-endian tensor payloads. Parameters and BN buffers are both stored.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "casvit/backbone.hpp"

namespace casvit {

enum class CheckpointErrc {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  overlapping_offsets,
  bad_config,
  bad_dtype,
  missing_tensor,
  shape_mismatch,
};

const char* checkpoint_errc_name(CheckpointErrc code);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& msg)
      : std::runtime_error(std::string(checkpoint_errc_name(code)) + ": " + msg), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t offset = 0;
  std::span<const std::uint8_t> payload;
};

/// Parsed and validated view over checkpoint bytes (which must outlive it).
struct CheckpointView {
  VariantConfig config;
  std::vector<CheckpointEntry> entries;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model);
CheckpointView decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Copies every tensor of `view` into `model`, converting dtype if needed. Entries are
/// matched by name; the first tensor whose shape differs raises shape_mismatch.
template <typename T>
void assign_checkpoint(Model<T>& model, const CheckpointView& view);

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path);
/// Rebuilds the stored variant and fills it.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model, keeping its configuration.
template <typename T>
void load_checkpoint_into(Model<T>& model, const std::filesystem::path& path);

}  // namespace casvit
