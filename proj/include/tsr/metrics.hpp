#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "tsr/image.hpp"

namespace tsr {

/// 10 log10(peak^2 / MSE); +infinity for identical images.
double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 1.0);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

struct SsimDetail {
  double ssim = 0.0;
  /// Mean of the contrast-structure factor alone (no luminance term).
  double contrast_structure = 0.0;
};

/// Mean SSIM over all full Gaussian windows, per channel, averaged over
/// channels. Both images need min(height, width) >= window.
double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params = {});
SsimDetail ssim_detail(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params = {});

/// Variance of the period^2 phase-class means, averaged over channels.
/// Zero when every (y mod period, x mod period) class has the same mean.
double checkerboard_index(const ImageBuffer& image, int period);

struct QualityReport {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double checkerboard_index = 0.0;
  std::optional<double> infer_ms;

  bool operator==(const QualityReport&) const = default;
};

QualityReport evaluate(const ImageBuffer& sr, const ImageBuffer& hr, int period = 4, std::string id = {});

/// One JSON object per line. An infinite PSNR is written as the string "inf".
std::string to_json_line(const QualityReport& report);
QualityReport parse_quality_report(std::string_view line);

}  // namespace tsr
