#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsr/image.hpp"

namespace tsr {

class ImageIoError : public std::runtime_error {
 public:
  ImageIoError(std::string path, const std::string& detail)
      : std::runtime_error(path.empty() ? detail : path + ": " + detail), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Gray files decode to one kGray channel, everything else to RGB. Alpha is
/// dropped. 8-bit samples map to v/255, 16-bit to v/65535.
ImageBuffer decode_png(std::span<const std::uint8_t> bytes);
ImageBuffer read_png(const std::filesystem::path& path);

struct PngInfo {
  int height = 0;
  int width = 0;
};

/// Reads only the header.
PngInfo read_png_info(const std::filesystem::path& path);

/// Accepts 1 (gray) or 3 (RGB) channel images; values are clamped to [0,1].
std::vector<std::uint8_t> encode_png(const ImageBuffer& image, int bit_depth = 8);
void write_png(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth = 8);

}  // namespace tsr
