#include "tsr/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace tsr {

namespace {

void require_same_dims(const ImageBuffer& a, const ImageBuffer& b, const char* op) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels()) {
    throw DimensionError(op, "shape", "images differ in size or channel count");
  }
}

std::vector<double> gaussian_taps(int window, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(window));
  const double center = (window - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < window; ++i) {
    taps[i] = std::exp(-((i - center) * (i - center)) / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

// Separable 'valid' filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& taps) {
  const int k = static_cast<int>(taps.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += taps[i] * src[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += taps[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak) {
  require_same_dims(a, b, "psnr");
  const auto va = a.values();
  const auto vb = b.values();
  double sse = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = static_cast<double>(va[i]) - vb[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sse / static_cast<double>(va.size());
  return 10.0 * std::log10(peak * peak / mse);
}

SsimDetail ssim_detail(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params) {
  require_same_dims(a, b, "ssim");
  if (std::min(a.height(), a.width()) < params.window) {
    throw DimensionError("ssim", "height", "image smaller than the SSIM window");
  }
  const auto taps = gaussian_taps(params.window, params.sigma);
  const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
  const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
  const int h = a.height(), w = a.width();
  const std::size_t n = static_cast<std::size_t>(h) * w;

  SsimDetail total;
  for (int c = 0; c < a.channels(); ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    const auto pa = a.plane(c);
    const auto pb = b.plane(c);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = pa[i];
      y[i] = pb[i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, taps);
    const auto my = filter_valid(y, h, w, taps);
    const auto sxx = filter_valid(xx, h, w, taps);
    const auto syy = filter_valid(yy, h, w, taps);
    const auto sxy = filter_valid(xy, h, w, taps);
    double sum_ssim = 0.0, sum_cs = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double var_x = sxx[i] - mx[i] * mx[i];
      const double var_y = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      const double cs = (2.0 * cov + c2) / (var_x + var_y + c2);
      const double lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
      sum_ssim += lum * cs;
      sum_cs += cs;
    }
    total.ssim += sum_ssim / static_cast<double>(mx.size());
    total.contrast_structure += sum_cs / static_cast<double>(mx.size());
  }
  total.ssim /= a.channels();
  total.contrast_structure /= a.channels();
  return total;
}

double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params) {
  return ssim_detail(a, b, params).ssim;
}

double checkerboard_index(const ImageBuffer& image, int period) {
  if (period < 1) throw std::invalid_argument("checkerboard_index: period must be >= 1");
  if (image.height() % period != 0) {
    throw DimensionError("checkerboard_index", "height", "height not divisible by period " + std::to_string(period));
  }
  if (image.width() % period != 0) {
    throw DimensionError("checkerboard_index", "width", "width not divisible by period " + std::to_string(period));
  }
  const std::size_t classes = static_cast<std::size_t>(period) * period;
  const double per_class = static_cast<double>(image.height()) * image.width() / static_cast<double>(classes);
  double total = 0.0;
  for (int c = 0; c < image.channels(); ++c) {
    std::vector<double> sums(classes, 0.0);
    // Raster order, so classes holding the same values in the same order sum identically.
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) sums[(y % period) * period + x % period] += image.at(c, y, x);
    // Deviations from the first class keep equal means exactly at zero variance.
    double mean_dev = 0.0;
    for (double s : sums) mean_dev += (s - sums[0]) / per_class;
    mean_dev /= static_cast<double>(classes);
    double var = 0.0;
    for (double s : sums) {
      const double d = (s - sums[0]) / per_class - mean_dev;
      var += d * d;
    }
    total += var / static_cast<double>(classes);
  }
  return total / image.channels();
}

QualityReport evaluate(const ImageBuffer& sr, const ImageBuffer& hr, int period, std::string id) {
  QualityReport r;
  r.id = std::move(id);
  r.psnr = psnr(sr, hr);
  r.ssim = ssim(sr, hr);
  r.checkerboard_index = checkerboard_index(sr, period);
  return r;
}

std::string to_json_line(const QualityReport& report) {
  nlohmann::ordered_json j;
  j["id"] = report.id;
  if (std::isinf(report.psnr)) {
    j["psnr"] = "inf";
  } else {
    j["psnr"] = report.psnr;
  }
  j["ssim"] = report.ssim;
  j["checkerboard_index"] = report.checkerboard_index;
  if (report.infer_ms) j["infer_ms"] = *report.infer_ms;
  return j.dump();
}

QualityReport parse_quality_report(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  QualityReport r;
  r.id = j.value("id", std::string{});
  const auto& p = j.at("psnr");
  r.psnr = p.is_string() ? (p.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                           : throw std::invalid_argument("bad psnr value"))
                         : p.get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.checkerboard_index = j.at("checkerboard_index").get<double>();
  if (j.contains("infer_ms")) r.infer_ms = j.at("infer_ms").get<double>();
  return r;
}

}  // namespace tsr
