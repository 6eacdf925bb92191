#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsr/tensor.hpp"

namespace tsr {

/// What a channel holds. Stain roles follow the atlas channel names
/// (red = microtubules, blue = nucleus, green = protein, yellow = ER).
enum class ChannelRole { kRed, kGreen, kBlue, kGray, kMicrotubules, kNucleus, kProtein, kReticulum };

std::string_view to_string(ChannelRole role);

std::vector<ChannelRole> rgb_roles();

/// Region of interest in pixel coordinates.
struct Roi {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const Roi&) const = default;
};

/// Parses "x,y,w,h".
Roi parse_roi(std::string_view text);

/// Planar (C x H x W) float image. Pixel values are nominally in [0, 1].
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int height, int width, std::vector<ChannelRole> roles, float fill = 0.0f);
  ImageBuffer(int height, int width, std::vector<ChannelRole> roles, std::vector<float> planar);

  static ImageBuffer rgb(int height, int width, float fill = 0.0f);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return static_cast<int>(roles_.size()); }
  bool empty() const noexcept { return values_.empty(); }
  const std::vector<ChannelRole>& roles() const noexcept { return roles_; }

  float at(int c, int y, int x) const { return values_[index(c, y, x)]; }
  float& at(int c, int y, int x) { return values_[index(c, y, x)]; }

  std::span<const float> plane(int c) const;
  std::span<float> plane(int c);
  std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }

  bool contains(const Roi& roi) const noexcept;
  /// Throws std::out_of_range when the roi leaves the image.
  ImageBuffer crop(const Roi& roi) const;
  /// Copies `patch` with its top-left corner at (x, y); must fit.
  void paste(const ImageBuffer& patch, int x, int y);
  void clamp01();

  bool operator==(const ImageBuffer& other) const = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<ChannelRole> roles_;
  std::vector<float> values_;
};

/// Generator input: equally sized images stacked into N x C x H x W with
/// values kept in [0,1], so zero padding inside the network reads as black.
TensorF images_to_generator_input(std::span<const ImageBuffer> images);

/// Pixel value 0 maps to -kModelDomainExtent and 1 to +kModelDomainExtent.
/// Keeping black and white inside the open tanh range lets the generator hit
/// them with finite pre-activations; the clamp on the way back absorbs overshoot.
inline constexpr float kModelDomainExtent = 0.9f;

/// Generator output / discriminator input domain: stacks equally sized images,
/// mapping [0,1] linearly onto [-kModelDomainExtent, kModelDomainExtent].
TensorF images_to_model_domain(std::span<const ImageBuffer> images);

/// Inverse of images_to_model_domain for one batch entry, clamped to [0,1].
ImageBuffer model_domain_to_image(const TensorF& batch, std::int64_t index);

/// Copies one batch entry verbatim (no range mapping, no clamp).
template <std::floating_point T>
ImageBuffer tensor_to_image(const Tensor<T>& batch, std::int64_t index);

}  // namespace tsr
