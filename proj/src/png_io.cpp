#include "tsr/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace tsr {

namespace {

struct ImageGuard {
  png_image* image;
  ~ImageGuard() { png_image_free(image); }
};

}  // namespace

ImageBuffer decode_png(std::span<const std::uint8_t> bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  ImageGuard guard{&img};
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ImageIoError("", std::string("cannot decode PNG: ") + img.message);
  }
  const bool wide = (img.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  // Request an alpha format so libpng never composites; alpha is dropped below.
  img.format = (color ? PNG_FORMAT_RGBA : PNG_FORMAT_GA) | (wide ? PNG_FORMAT_FLAG_LINEAR : 0);
  const int stored = color ? 4 : 2;
  const int channels = color ? 3 : 1;
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, raw.data(), 0, nullptr)) {
    throw ImageIoError("", std::string("cannot decode PNG: ") + img.message);
  }

  ImageBuffer out(h, w, color ? rgb_roles() : std::vector<ChannelRole>{ChannelRole::kGray});
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < channels; ++c) {
      float v;
      if (wide) {
        const auto* px = reinterpret_cast<const std::uint16_t*>(raw.data());
        v = px[i * stored + c] / 65535.0f;
      } else {
        v = raw[i * stored + c] / 255.0f;
      }
      out.plane(c)[i] = v;
    }
  }
  return out;
}

ImageBuffer read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError(path.string(), "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const ImageIoError& e) {
    throw ImageIoError(path.string(), e.what());
  }
}

std::vector<std::uint8_t> encode_png(const ImageBuffer& image, int bit_depth) {
  if (image.empty()) throw ImageIoError("", "cannot encode an empty image");
  if (image.channels() != 1 && image.channels() != 3) {
    throw ImageIoError("", "PNG output needs 1 or 3 channels, got " + std::to_string(image.channels()));
  }
  if (bit_depth != 8 && bit_depth != 16) throw ImageIoError("", "bit depth must be 8 or 16");
  const bool wide = bit_depth == 16;
  const int channels = image.channels();
  const std::size_t n = static_cast<std::size_t>(image.height()) * image.width();

  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = (channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY) | (wide ? PNG_FORMAT_FLAG_LINEAR : 0);

  std::vector<std::uint8_t> raw8;
  std::vector<std::uint16_t> raw16;
  const float top = wide ? 65535.0f : 255.0f;
  if (wide) raw16.resize(n * channels); else raw8.resize(n * channels);
  for (int c = 0; c < channels; ++c) {
    const auto plane = image.plane(c);
    for (std::size_t i = 0; i < n; ++i) {
      const float q = std::round(std::clamp(plane[i], 0.0f, 1.0f) * top);
      if (wide) raw16[i * channels + c] = static_cast<std::uint16_t>(q);
      else raw8[i * channels + c] = static_cast<std::uint8_t>(q);
    }
  }
  const void* buffer = wide ? static_cast<const void*>(raw16.data()) : static_cast<const void*>(raw8.data());

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, buffer, 0, nullptr)) {
    throw ImageIoError("", std::string("cannot encode PNG: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, buffer, 0, nullptr)) {
    throw ImageIoError("", std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth) {
  const auto bytes = encode_png(image, bit_depth);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError(path.string(), "cannot open file for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError(path.string(), "write failed");
}

PngInfo read_png_info(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  ImageGuard guard{&img};
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError(path.string(), std::string("cannot read PNG header: ") + img.message);
  }
  return {static_cast<int>(img.height), static_cast<int>(img.width)};
}

}  // namespace tsr
