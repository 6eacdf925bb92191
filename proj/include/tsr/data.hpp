#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tsr/image.hpp"

namespace tsr {

/// Cumulative stain selection: k=1 microtubules, +nucleus, +protein, +ER.
struct ChannelScheme {
  int k = 1;

  /// Throws std::invalid_argument unless 1 <= k <= 4.
  static ChannelScheme from_k(int k);
  std::vector<ChannelRole> stains() const;
};

/// The four stain roles in cumulative order.
std::vector<ChannelRole> stain_roles();

/// Composes a 4-channel stain image (stain_roles() order) to RGB:
/// R = microtubules + 0.5 ER, G = protein + 0.5 ER, B = nucleus, clamped.
/// Stains outside `scheme` are ignored.
ImageBuffer compose_rgb(const ImageBuffer& stains, ChannelScheme scheme);

struct SyntheticSample {
  ChannelScheme scheme;
  ImageBuffer stains;  // 4 channels; roles outside the scheme are zero
  ImageBuffer image;   // RGB composite
};

/// Renders one procedural confocal-style sample of size x size (size >= 64).
SyntheticSample synthesize(std::mt19937_64& rng, int size);
ImageBuffer synthesize_sample(std::mt19937_64& rng, int size);

/// Per-channel grayscale files in cumulative stain order. RGB files are
/// reduced to their channel mean. Throws ImageIoError on unreadable files or
/// mismatched sizes.
ImageBuffer load_atlas_sample(const std::vector<std::filesystem::path>& channel_paths, int k);

struct ManifestEntry {
  std::string id;
  std::vector<std::filesystem::path> channels;
};

/// Line-delimited JSON {"id": ..., "channels": [...]}; relative paths are
/// resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Separable Keys (a = -0.5) bicubic resampling with the kernel widened by
/// the scale when shrinking, output clamped to [0,1].
ImageBuffer bicubic_resize(const ImageBuffer& image, int out_height, int out_width);
/// Dimensions must be divisible by `factor`.
ImageBuffer bicubic_downsample(const ImageBuffer& image, int factor);
ImageBuffer bicubic_upsample(const ImageBuffer& image, int factor);
ImageBuffer nearest_upsample(const ImageBuffer& image, int factor);

/// Keys cubic convolution kernel.
double keys_kernel(double x, double a = -0.5);

struct TileGrid {
  std::vector<ImageBuffer> tiles;  // row-major
  int rows = 0;
  int cols = 0;
  int tile_size = 0;
  int original_height = 0;
  int original_width = 0;
  int pad_bottom = 0;
  int pad_right = 0;
};

/// Reflect-pads right/bottom to the next multiple of tile_size (>= 8) and
/// partitions row-major.
TileGrid tile(const ImageBuffer& image, int tile_size);
/// Reassembles and crops the padding. Throws std::invalid_argument on
/// inconsistent metadata.
ImageBuffer stitch(const TileGrid& grid);

/// Mirror index without edge repetition: -1 -> 1, n -> n-2.
int reflect_index(int i, int n);

struct TrainingPair {
  ImageBuffer lr;
  ImageBuffer hr;
};

/// Tiles at hr_tile and bicubic-downsamples each tile by `scale`.
std::vector<TrainingPair> make_training_pairs(const ImageBuffer& image, int hr_tile, int scale);

}  // namespace tsr
