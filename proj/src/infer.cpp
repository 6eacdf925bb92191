#include "tsr/infer.hpp"

#include <algorithm>
#include <chrono>

#include "tsr/data.hpp"
#include "tsr/png_io.hpp"

namespace tsr {

namespace {

const GeneratorSpec& generator_spec(const ModelF& model) {
  const auto* spec = std::get_if<GeneratorSpec>(&model.spec());
  if (spec == nullptr) throw InferError("model is not a generator");
  return *spec;
}

ImageBuffer replicate_gray(const ImageBuffer& gray, int channels) {
  std::vector<float> planar;
  planar.reserve(gray.values().size() * static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) planar.insert(planar.end(), gray.values().begin(), gray.values().end());
  return ImageBuffer(gray.height(), gray.width(), channels == 3 ? rgb_roles() : std::vector(channels, ChannelRole::kGray),
                     std::move(planar));
}

std::string roi_str(const Roi& r) {
  return std::to_string(r.x) + "," + std::to_string(r.y) + "," + std::to_string(r.w) + "," + std::to_string(r.h);
}

}  // namespace

ImageBuffer sr_patch(const ModelF& generator, const ImageBuffer& lr_patch) {
  const auto& spec = generator_spec(generator);
  if (lr_patch.empty()) throw InferError("empty input patch");
  if (lr_patch.height() > kMaxPatchSide || lr_patch.width() > kMaxPatchSide) {
    throw InferError("patch " + std::to_string(lr_patch.width()) + "x" + std::to_string(lr_patch.height()) +
                     " exceeds the " + std::to_string(kMaxPatchSide) + " pixel limit");
  }
  if (lr_patch.channels() == spec.in_channels) {
    const auto x = images_to_generator_input(std::span<const ImageBuffer>(&lr_patch, 1));
    return model_domain_to_image(generator.infer(x), 0);
  }
  if (lr_patch.channels() == 1) {
    const auto expanded = replicate_gray(lr_patch, spec.in_channels);
    const auto x = images_to_generator_input(std::span<const ImageBuffer>(&expanded, 1));
    return model_domain_to_image(generator.infer(x), 0);
  }
  throw DimensionError("sr_patch", "channels",
                       "model expects " + std::to_string(spec.in_channels) + " channels, got " +
                           std::to_string(lr_patch.channels()));
}

ModelUpscaler::ModelUpscaler(std::string label, std::shared_ptr<const ModelF> generator)
    : label_(std::move(label)), generator_(std::move(generator)) {
  if (!generator_) throw InferError("null generator");
  scale_ = generator_spec(*generator_).scale;
}

InterpolationUpscaler::InterpolationUpscaler(Interpolation kind, int scale)
    : kind_(kind), scale_(scale), label_(kind == Interpolation::kNearest ? "nearest" : "bicubic") {
  if (scale < 1) throw std::invalid_argument("scale must be >= 1");
}

ImageBuffer InterpolationUpscaler::upscale(const ImageBuffer& lr_patch) const {
  return kind_ == Interpolation::kNearest ? nearest_upsample(lr_patch, scale_) : bicubic_upsample(lr_patch, scale_);
}

ImageBuffer sr_image(const Upscaler& upscaler, const ImageBuffer& lr_image, int tile_size, const TileObserver& on_tile) {
  TileGrid grid = tile(lr_image, tile_size);
  const int s = upscaler.scale();
  for (std::size_t i = 0; i < grid.tiles.size(); ++i) {
    if (on_tile) on_tile(i);
    grid.tiles[i] = upscaler.upscale(grid.tiles[i]);
  }
  grid.tile_size *= s;
  grid.original_height *= s;
  grid.original_width *= s;
  grid.pad_bottom *= s;
  grid.pad_right *= s;
  return stitch(grid);
}

ImageBuffer sr_image(const ModelF& generator, const ImageBuffer& lr_image, int tile_size) {
  // Non-owning handle; the upscaler does not outlive this call.
  const ModelUpscaler up("model", std::shared_ptr<const ModelF>(&generator, [](const ModelF*) {}));
  return sr_image(up, lr_image, tile_size);
}

std::pair<int, int> MemoryFrames::dims(std::size_t i) const {
  const auto& f = frames_.at(i);
  return {f.height(), f.width()};
}

PngFrameDirectory::PngFrameDirectory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::directory_iterator it(dir, ec);
  if (ec) throw ImageIoError(dir.string(), "cannot list frame directory: " + ec.message());
  for (const auto& entry : it) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files_.push_back(entry.path());
  }
  std::sort(files_.begin(), files_.end());
  if (files_.empty()) throw ImageIoError(dir.string(), "no .png frames found");
  dims_.reserve(files_.size());
  for (const auto& f : files_) {
    const auto info = read_png_info(f);
    dims_.emplace_back(info.height, info.width);
  }
}

std::pair<int, int> PngFrameDirectory::dims(std::size_t i) const { return dims_.at(i); }

ImageBuffer PngFrameDirectory::frame(std::size_t i) const { return read_png(files_.at(i)); }

void sr_video_roi(const Upscaler& upscaler, const FrameSource& frames, const Roi& roi, const FrameSink& sink) {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto [h, w] = frames.dims(i);
    if (roi.x < 0 || roi.y < 0 || roi.w <= 0 || roi.h <= 0 || roi.x + roi.w > w || roi.y + roi.h > h) {
      throw std::out_of_range("frame " + std::to_string(i) + ": roi " + roi_str(roi) + " exceeds " + std::to_string(w) +
                              "x" + std::to_string(h));
    }
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    VideoFrame out;
    out.index = i;
    out.original = frames.frame(i);
    const auto start = std::chrono::steady_clock::now();
    out.sr_crop = upscaler.upscale(out.original.crop(roi));
    out.infer_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    sink(std::move(out));
  }
}

ImageBuffer composite_side_by_side(const ImageBuffer& original, const ImageBuffer& sr_crop) {
  const int h = std::max(original.height(), sr_crop.height());
  const int w = original.width() + sr_crop.width();
  const auto& roles = sr_crop.channels() >= original.channels() ? sr_crop.roles() : original.roles();
  ImageBuffer out(h, w, roles);
  for (int c = 0; c < out.channels(); ++c) {
    const int oc = std::min(c, original.channels() - 1);
    const int sc = std::min(c, sr_crop.channels() - 1);
    for (int y = 0; y < original.height(); ++y)
      for (int x = 0; x < original.width(); ++x) out.at(c, y, x) = original.at(oc, y, x);
    for (int y = 0; y < sr_crop.height(); ++y)
      for (int x = 0; x < sr_crop.width(); ++x) out.at(c, y, original.width() + x) = sr_crop.at(sc, y, x);
  }
  return out;
}

}  // namespace tsr
