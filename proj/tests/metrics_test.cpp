#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "tsr/data.hpp"
#include "tsr/metrics.hpp"

namespace tsr {
namespace {

ImageBuffer random_image(int h, int w, int channels, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<ChannelRole> roles = channels == 3 ? rgb_roles() : std::vector<ChannelRole>(channels, ChannelRole::kGray);
  ImageBuffer img(h, w, roles);
  for (auto& v : img.values()) v = dist(rng);
  return img;
}

// Direct 2-D windowed SSIM, written independently of the separable version.
double brute_ssim(const ImageBuffer& a, const ImageBuffer& b) {
  const int win = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> g(win * win);
  double gsum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double di = i - 5, dj = j - 5;
      g[i * win + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      gsum += g[i * win + j];
    }
  for (auto& v : g) v /= gsum;
  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    double acc = 0.0;
    int count = 0;
    for (int y = 0; y + win <= a.height(); ++y)
      for (int x = 0; x + win <= a.width(); ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double w = g[i * win + j];
            const double p = a.at(c, y + i, x + j), q = b.at(c, y + i, x + j);
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += acc / count;
  }
  return total / a.channels();
}

TEST(PsnrTest, IdenticalIsInfinite) {
  const auto a = random_image(16, 16, 3, 1);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
}

TEST(PsnrTest, UniformErrorOfOneTenthIsTwentyDb) {
  const auto a = ImageBuffer::rgb(8, 8, 0.0f);
  const auto b = ImageBuffer::rgb(8, 8, 0.1f);
  // MSE = 0.1^2 (float 0.1 is not exact, so allow float rounding).
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_NEAR(psnr(a, b, 255.0), 20.0 + 20.0 * std::log10(255.0), 1e-5);
}

TEST(PsnrTest, SymmetricAndFinite) {
  const auto a = random_image(16, 16, 3, 2);
  const auto b = random_image(16, 16, 3, 3);
  EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
  EXPECT_TRUE(std::isfinite(psnr(a, b)));
}

TEST(PsnrTest, ShapeMismatchThrows) {
  EXPECT_THROW(psnr(ImageBuffer::rgb(4, 4), ImageBuffer::rgb(4, 5)), DimensionError);
}

TEST(SsimTest, IdenticalIsExactlyOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = random_image(20, 24, 3, seed);
    EXPECT_EQ(ssim(a, a), 1.0);
  }
}

TEST(SsimTest, MatchesDirectWindowComputation) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto a = random_image(19, 23, 3, seed);
    auto b = a;
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<float> noise(0.0f, 0.1f);
    for (auto& v : b.values()) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    EXPECT_NEAR(ssim(a, b), brute_ssim(a, b), 1e-10);
  }
}

TEST(SsimTest, SymmetricAndBounded) {
  const auto a = random_image(16, 16, 1, 4);
  const auto b = random_image(16, 16, 1, 5);
  EXPECT_DOUBLE_EQ(ssim(a, b), ssim(b, a));
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
}

TEST(SsimTest, ContrastStructureInvariantToCommonOffset) {
  const auto a = random_image(24, 24, 3, 6, 0.0f, 0.5f);
  const auto b = random_image(24, 24, 3, 7, 0.0f, 0.5f);
  auto a2 = a, b2 = b;
  for (auto& v : a2.values()) v += 0.25f;
  for (auto& v : b2.values()) v += 0.25f;
  EXPECT_NEAR(ssim_detail(a, b).contrast_structure, ssim_detail(a2, b2).contrast_structure, 1e-6);
}

TEST(SsimTest, TooSmallForWindowThrows) {
  EXPECT_THROW(ssim(ImageBuffer::rgb(10, 32), ImageBuffer::rgb(10, 32)), DimensionError);
}

TEST(CheckerboardTest, ConstantIsZero) {
  EXPECT_EQ(checkerboard_index(ImageBuffer::rgb(16, 16, 0.37f), 4), 0.0);
}

TEST(CheckerboardTest, NearestUpsampledImageIsExactlyZero) {
  // Each 4x4 block is constant, so every phase class holds the same values
  // in the same order.
  const auto lr = random_image(8, 6, 3, 8);
  EXPECT_EQ(checkerboard_index(nearest_upsample(lr, 4), 4), 0.0);
}

TEST(CheckerboardTest, AlternatingPatternHasQuarterVariance) {
  ImageBuffer img(8, 8, {ChannelRole::kGray});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(0, y, x) = static_cast<float>((x + y) % 2);
  // Sixteen class means, half 0 and half 1: variance 1/4.
  EXPECT_DOUBLE_EQ(checkerboard_index(img, 4), 0.25);
  EXPECT_DOUBLE_EQ(checkerboard_index(img, 2), 0.25);
  EXPECT_DOUBLE_EQ(checkerboard_index(img, 1), 0.0);
}

TEST(CheckerboardTest, SingleBrightPhaseHandComputed) {
  // Only phase (0,0) of a period-2 grid is 1: means {1,0,0,0}, mean 1/4,
  // variance (9/16 + 3/16) / 4 = 3/16.
  ImageBuffer img(4, 4, {ChannelRole::kGray});
  for (int y = 0; y < 4; y += 2)
    for (int x = 0; x < 4; x += 2) img.at(0, y, x) = 1.0f;
  EXPECT_DOUBLE_EQ(checkerboard_index(img, 2), 3.0 / 16.0);
}

TEST(CheckerboardTest, NonDivisibleNamesAxis) {
  try {
    checkerboard_index(ImageBuffer::rgb(16, 18), 4);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "width");
  }
  try {
    checkerboard_index(ImageBuffer::rgb(18, 16), 4);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "height");
  }
}

TEST(CheckerboardTest, NonNegativeOnRandomImages) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_GE(checkerboard_index(random_image(16, 16, 3, seed), 4), 0.0);
}

TEST(QualityReportTest, EvaluateAndJsonRoundTrip) {
  const auto hr = random_image(16, 16, 3, 9);
  auto sr = hr;
  sr.values()[0] = 1.0f - sr.values()[0];
  auto report = evaluate(sr, hr, 4, "tile-0");
  EXPECT_EQ(report.id, "tile-0");
  EXPECT_DOUBLE_EQ(report.psnr, psnr(sr, hr));
  report.infer_ms = 12.5;
  EXPECT_EQ(parse_quality_report(to_json_line(report)), report);

  auto same = evaluate(hr, hr, 4, "same");
  EXPECT_TRUE(std::isinf(same.psnr));
  EXPECT_NE(to_json_line(same).find("\"psnr\":\"inf\""), std::string::npos);
  EXPECT_EQ(parse_quality_report(to_json_line(same)), same);
}

}  // namespace
}  // namespace tsr
