#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsr/image.hpp"
#include "tsr/models.hpp"

namespace tsr {

/// Largest LR patch side accepted by sr_patch.
inline constexpr int kMaxPatchSide = 1024;

class InferError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Generator forward on one patch: [0,1] -> [-1,1] -> model -> [0,1], clamped.
/// One-channel input is replicated when the model expects three channels.
ImageBuffer sr_patch(const ModelF& generator, const ImageBuffer& lr_patch);

/// Maps an LR patch to its SR patch. Implementations are immutable and may be
/// called from several threads at once.
class Upscaler {
 public:
  virtual ~Upscaler() = default;
  virtual const std::string& label() const noexcept = 0;
  virtual int scale() const noexcept = 0;
  virtual ImageBuffer upscale(const ImageBuffer& lr_patch) const = 0;
};

class ModelUpscaler final : public Upscaler {
 public:
  /// Throws InferError unless `generator` carries a GeneratorSpec.
  ModelUpscaler(std::string label, std::shared_ptr<const ModelF> generator);

  const std::string& label() const noexcept override { return label_; }
  int scale() const noexcept override { return scale_; }
  ImageBuffer upscale(const ImageBuffer& lr_patch) const override { return sr_patch(*generator_, lr_patch); }
  const ModelF& model() const noexcept { return *generator_; }

 private:
  std::string label_;
  std::shared_ptr<const ModelF> generator_;
  int scale_;
};

enum class Interpolation { kNearest, kBicubic };

class InterpolationUpscaler final : public Upscaler {
 public:
  InterpolationUpscaler(Interpolation kind, int scale);

  const std::string& label() const noexcept override { return label_; }
  int scale() const noexcept override { return scale_; }
  ImageBuffer upscale(const ImageBuffer& lr_patch) const override;

 private:
  Interpolation kind_;
  int scale_;
  std::string label_;
};

/// Called once per tile with the tile index.
using TileObserver = std::function<void(std::size_t)>;

/// Tiles (reflect-padded), upscales every tile, stitches at tile * scale and
/// crops the padding: output is input dims x scale.
ImageBuffer sr_image(const Upscaler& upscaler, const ImageBuffer& lr_image, int tile_size,
                     const TileObserver& on_tile = {});
ImageBuffer sr_image(const ModelF& generator, const ImageBuffer& lr_image, int tile_size);

/// Random-access frame sequence whose dimensions are known without decoding.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::size_t size() const = 0;
  /// {height, width} of frame i.
  virtual std::pair<int, int> dims(std::size_t i) const = 0;
  virtual ImageBuffer frame(std::size_t i) const = 0;
};

class MemoryFrames final : public FrameSource {
 public:
  explicit MemoryFrames(std::vector<ImageBuffer> frames) : frames_(std::move(frames)) {}
  std::size_t size() const override { return frames_.size(); }
  std::pair<int, int> dims(std::size_t i) const override;
  ImageBuffer frame(std::size_t i) const override { return frames_.at(i); }

 private:
  std::vector<ImageBuffer> frames_;
};

/// Every *.png in a directory, in lexicographic file-name order (use
/// zero-padded numbering).
class PngFrameDirectory final : public FrameSource {
 public:
  explicit PngFrameDirectory(const std::filesystem::path& dir);
  std::size_t size() const override { return files_.size(); }
  std::pair<int, int> dims(std::size_t i) const override;
  ImageBuffer frame(std::size_t i) const override;
  const std::vector<std::filesystem::path>& files() const noexcept { return files_; }

 private:
  std::vector<std::filesystem::path> files_;
  std::vector<std::pair<int, int>> dims_;
};

struct VideoFrame {
  std::size_t index = 0;
  ImageBuffer original;
  ImageBuffer sr_crop;
  double infer_ms = 0.0;
};

using FrameSink = std::function<void(VideoFrame&&)>;

/// Checks the roi against every frame first, then for each frame in order:
/// crop, upscale, emit. Throws std::out_of_range naming the first offending
/// frame before any frame is processed.
void sr_video_roi(const Upscaler& upscaler, const FrameSource& frames, const Roi& roi, const FrameSink& sink);

/// Original frame on the left, SR crop on the right, top-aligned, zero fill.
ImageBuffer composite_side_by_side(const ImageBuffer& original, const ImageBuffer& sr_crop);

}  // namespace tsr
