#include "tsr/image.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace tsr {

std::string_view to_string(ChannelRole role) {
  switch (role) {
    case ChannelRole::kRed: return "red";
    case ChannelRole::kGreen: return "green";
    case ChannelRole::kBlue: return "blue";
    case ChannelRole::kGray: return "gray";
    case ChannelRole::kMicrotubules: return "microtubules";
    case ChannelRole::kNucleus: return "nucleus";
    case ChannelRole::kProtein: return "protein";
    case ChannelRole::kReticulum: return "reticulum";
  }
  return "unknown";
}

std::vector<ChannelRole> rgb_roles() { return {ChannelRole::kRed, ChannelRole::kGreen, ChannelRole::kBlue}; }

Roi parse_roi(std::string_view text) {
  int parts[4];
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (int i = 0; i < 4; ++i) {
    auto [next, ec] = std::from_chars(p, end, parts[i]);
    if (ec != std::errc{}) throw std::invalid_argument("roi must be x,y,w,h; got '" + std::string(text) + "'");
    p = next;
    if (i < 3) {
      if (p == end || *p != ',') throw std::invalid_argument("roi must be x,y,w,h; got '" + std::string(text) + "'");
      ++p;
    }
  }
  if (p != end) throw std::invalid_argument("roi must be x,y,w,h; got '" + std::string(text) + "'");
  if (parts[2] <= 0 || parts[3] <= 0) throw std::invalid_argument("roi width and height must be positive");
  return Roi{parts[0], parts[1], parts[2], parts[3]};
}

ImageBuffer::ImageBuffer(int height, int width, std::vector<ChannelRole> roles, float fill)
    : height_(height), width_(width), roles_(std::move(roles)) {
  if (height <= 0 || width <= 0 || roles_.empty()) throw std::invalid_argument("image dimensions must be positive");
  values_.assign(static_cast<std::size_t>(height) * width * roles_.size(), fill);
}

ImageBuffer::ImageBuffer(int height, int width, std::vector<ChannelRole> roles, std::vector<float> planar)
    : height_(height), width_(width), roles_(std::move(roles)), values_(std::move(planar)) {
  if (height <= 0 || width <= 0 || roles_.empty()) throw std::invalid_argument("image dimensions must be positive");
  if (values_.size() != static_cast<std::size_t>(height) * width * roles_.size()) {
    throw std::invalid_argument("planar buffer size does not match image dimensions");
  }
}

ImageBuffer ImageBuffer::rgb(int height, int width, float fill) { return ImageBuffer(height, width, rgb_roles(), fill); }

std::span<const float> ImageBuffer::plane(int c) const {
  return std::span<const float>(values_).subspan(static_cast<std::size_t>(c) * height_ * width_,
                                                 static_cast<std::size_t>(height_) * width_);
}

std::span<float> ImageBuffer::plane(int c) {
  return std::span<float>(values_).subspan(static_cast<std::size_t>(c) * height_ * width_,
                                           static_cast<std::size_t>(height_) * width_);
}

bool ImageBuffer::contains(const Roi& roi) const noexcept {
  return roi.x >= 0 && roi.y >= 0 && roi.w > 0 && roi.h > 0 && roi.x + roi.w <= width_ && roi.y + roi.h <= height_;
}

ImageBuffer ImageBuffer::crop(const Roi& roi) const {
  if (!contains(roi)) {
    throw std::out_of_range("roi " + std::to_string(roi.x) + "," + std::to_string(roi.y) + "," + std::to_string(roi.w) +
                            "," + std::to_string(roi.h) + " exceeds " + std::to_string(width_) + "x" +
                            std::to_string(height_) + " image");
  }
  ImageBuffer out(roi.h, roi.w, roles_);
  for (int c = 0; c < channels(); ++c)
    for (int y = 0; y < roi.h; ++y) {
      const float* src = &values_[index(c, roi.y + y, roi.x)];
      std::copy(src, src + roi.w, &out.at(c, y, 0));
    }
  return out;
}

void ImageBuffer::paste(const ImageBuffer& patch, int x, int y) {
  if (patch.channels() != channels() || !contains(Roi{x, y, patch.width(), patch.height()})) {
    throw std::out_of_range("patch does not fit at the requested position");
  }
  for (int c = 0; c < channels(); ++c)
    for (int r = 0; r < patch.height(); ++r) {
      const float* src = &patch.values_[patch.index(c, r, 0)];
      std::copy(src, src + patch.width(), &values_[index(c, y + r, x)]);
    }
}

void ImageBuffer::clamp01() {
  for (auto& v : values_) v = std::clamp(v, 0.0f, 1.0f);
}

namespace {

TensorF stack_images(std::span<const ImageBuffer> images, const char* op, float gain, float offset) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  const auto& first = images.front();
  std::vector<float> data;
  data.reserve(images.size() * first.values().size());
  for (const auto& img : images) {
    if (img.height() != first.height() || img.width() != first.width() || img.channels() != first.channels()) {
      throw DimensionError(op, "shape", "batch images must share dimensions");
    }
    for (float v : img.values()) data.push_back(gain * v + offset);
  }
  return TensorF(Shape{static_cast<std::int64_t>(images.size()), first.channels(), first.height(), first.width()},
                 std::move(data));
}

}  // namespace

TensorF images_to_generator_input(std::span<const ImageBuffer> images) {
  return stack_images(images, "images_to_generator_input", 1.0f, 0.0f);
}

TensorF images_to_model_domain(std::span<const ImageBuffer> images) {
  return stack_images(images, "images_to_model_domain", 2.0f * kModelDomainExtent, -kModelDomainExtent);
}

ImageBuffer model_domain_to_image(const TensorF& batch, std::int64_t index) {
  ImageBuffer out = tensor_to_image(batch, index);
  for (auto& v : out.values()) v = std::clamp(0.5f * (v / kModelDomainExtent + 1.0f), 0.0f, 1.0f);
  return out;
}

template <std::floating_point T>
ImageBuffer tensor_to_image(const Tensor<T>& batch, std::int64_t index) {
  if (batch.rank() != 4) throw DimensionError("tensor_to_image", "rank", "expected NCHW");
  if (index < 0 || index >= batch.dim(0)) throw std::out_of_range("batch index out of range");
  const auto c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const auto per = static_cast<std::size_t>(c * h * w);
  const auto src = batch.data().subspan(static_cast<std::size_t>(index) * per, per);
  std::vector<ChannelRole> roles = c == 3 ? rgb_roles() : std::vector<ChannelRole>(c, ChannelRole::kGray);
  return ImageBuffer(static_cast<int>(h), static_cast<int>(w), std::move(roles),
                     std::vector<float>(src.begin(), src.end()));
}

template ImageBuffer tensor_to_image<float>(const Tensor<float>&, std::int64_t);
template ImageBuffer tensor_to_image<double>(const Tensor<double>&, std::int64_t);

}  // namespace tsr
