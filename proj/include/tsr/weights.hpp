#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tsr/models.hpp"

namespace tsr {

class WeightFileError : public std::runtime_error {
 public:
  enum class Kind { kIo, kMagic, kVersion, kChecksum, kFormat, kSpecMismatch };

  WeightFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

std::string_view to_string(WeightFileError::Kind kind);

inline constexpr char kWeightMagic[] = "TSRW1";
inline constexpr std::uint32_t kWeightFormatVersion = 1;

/// File layout, all integers little-endian:
///   "TSRW1" | u32 version | u32 n + n bytes spec JSON | u32 entry count |
///   entries: u8 kind (0 parameter, 1 buffer) | u32 n + name | u32 rank |
///            u64 dims[rank] | f32 values[numel]
///   | u32 CRC-32 of every preceding byte.
std::vector<std::uint8_t> serialize_weights(const ModelF& model);
ModelF deserialize_weights(std::span<const std::uint8_t> bytes);

void save_weights(const ModelF& model, const std::filesystem::path& path);
ModelF load_weights(const std::filesystem::path& path);
/// Loads into an existing model; the stored spec must equal model.spec().
void load_weights_into(const std::filesystem::path& path, ModelF& model);

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(std::string_view text);

}  // namespace tsr
