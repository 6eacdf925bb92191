#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <numeric>
#include <random>

#include "tsr/bench.hpp"
#include "tsr/data.hpp"

namespace tsr {
namespace {

class CountingUpscaler final : public Upscaler {
 public:
  const std::string& label() const noexcept override { return label_; }
  int scale() const noexcept override { return 4; }
  ImageBuffer upscale(const ImageBuffer& lr) const override {
    ++calls;
    return nearest_upsample(lr, 4);
  }
  mutable std::atomic<int> calls{0};

 private:
  std::string label_ = "counting";
};

ImageBuffer patch(int h, int w, float fill = 0.5f) { return ImageBuffer(h, w, rgb_roles(), fill); }

std::shared_ptr<const ModelF> small_generator() {
  GeneratorSpec s;
  s.base_channels = 8;
  s.n_res_blocks = 1;
  s.edge_kernel = 3;
  return std::make_shared<const ModelF>(build_generator<float>(s, 3));
}

TEST(PercentileTest, LinearInterpolation) {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_DOUBLE_EQ(percentile(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(percentile(v, 0.95), 3.85);
  EXPECT_DOUBLE_EQ(percentile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile(v, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(percentile({7.0}, 0.95), 7.0);
  EXPECT_THROW(percentile({}, 0.5), std::invalid_argument);
  EXPECT_THROW(percentile(v, 1.5), std::invalid_argument);
}

TEST(TimePatchTest, RecordsRunsAndExcludesWarmup) {
  const CountingUpscaler up;
  const auto r = time_patch(up, patch(64, 64), 10);
  EXPECT_EQ(r.samples.size(), 10u);
  EXPECT_EQ(r.n_runs, 10);
  EXPECT_EQ(r.warmup_runs, 3);
  EXPECT_EQ(up.calls.load(), 13);
  EXPECT_EQ(r.protocol, "patch");
  EXPECT_EQ(r.label, "counting");
}

TEST(TimePatchTest, SummaryInvariants) {
  const ModelUpscaler up("g", small_generator());
  const auto r = time_patch(up, patch(32, 32), 12);
  EXPECT_LE(r.p50_s, r.p95_s);
  EXPECT_GT(r.mean_s, 0.0);
  EXPECT_NEAR(r.fps * r.mean_s, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.mean_s, std::accumulate(r.samples.begin(), r.samples.end(), 0.0) / 12.0);
}

TEST(TimePatchTest, Contracts) {
  const CountingUpscaler up;
  EXPECT_THROW(time_patch(up, patch(8, 8), 9), std::invalid_argument);
  EXPECT_THROW(time_patch(up, patch(8, 8), 10, {.warmup_runs = -1}), std::invalid_argument);
  EXPECT_THROW(time_patch(up, patch(8, 8), 10, {.threads = 0}), std::invalid_argument);
}

TEST(TimePatchTest, RejectsNonFiniteOutput) {
  class NanUpscaler final : public Upscaler {
   public:
    const std::string& label() const noexcept override { return label_; }
    int scale() const noexcept override { return 1; }
    ImageBuffer upscale(const ImageBuffer& lr) const override {
      auto out = lr;
      out.values()[0] = std::nanf("");
      return out;
    }

   private:
    std::string label_ = "nan";
  };
  EXPECT_THROW(time_patch(NanUpscaler{}, patch(8, 8), 10), std::runtime_error);
}

TEST(TimePatchTest, ConcurrentModeCoversEveryRun) {
  const CountingUpscaler up;
  const auto r = time_patch(up, patch(32, 32), 20, {.warmup_runs = 1, .threads = 4});
  EXPECT_EQ(r.threads, 4);
  EXPECT_EQ(up.calls.load(), 21);
  for (double s : r.samples) EXPECT_GT(s, 0.0);
  EXPECT_GT(r.fps, 0.0);
}

TEST(TimePatchTest, ConsecutiveSessionsAgree) {
  const ModelUpscaler up("g", small_generator());
  const auto lr = patch(64, 64);
  const auto a = time_patch(up, lr, 20);
  const auto b = time_patch(up, lr, 20);
  EXPECT_LT(std::abs(a.mean_s - b.mean_s), 0.25 * std::max(a.mean_s, b.mean_s));
}

TEST(TimeWholeImageTest, CountsTilesAndMatchesSrImage) {
  const ModelUpscaler up("g", small_generator());
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageBuffer lr(128, 128, rgb_roles());
  for (auto& v : lr.values()) v = u(rng);
  ImageBuffer last;
  const auto r = time_whole_image(up, lr, 64, 10, {}, &last);
  EXPECT_EQ(r.calls, 4);
  EXPECT_EQ(r.protocol, "image");
  EXPECT_EQ(last, sr_image(up, lr, 64));
  const auto p = time_patch(up, lr.crop({0, 0, 64, 64}), 10);
  EXPECT_GT(r.mean_s, p.mean_s);
}

TEST(VideoFpsTest, ThirtyFramesGiveThirtySamples) {
  const CountingUpscaler up;
  const std::vector<ImageBuffer> frames(30, patch(96, 96));
  const auto r = video_fps(up, frames, {16, 16, 64, 64});
  EXPECT_EQ(r.samples.size(), 30u);
  EXPECT_EQ(up.calls.load(), 33);
  const double total = std::accumulate(r.samples.begin(), r.samples.end(), 0.0);
  EXPECT_DOUBLE_EQ(r.fps, 30.0 / total);
  EXPECT_EQ(r.protocol, "video");
}

TEST(VideoFpsTest, Contracts) {
  const CountingUpscaler up;
  EXPECT_THROW(video_fps(up, std::vector<ImageBuffer>(29, patch(96, 96)), {0, 0, 64, 64}), std::invalid_argument);
  EXPECT_THROW(video_fps(up, std::vector<ImageBuffer>(30, patch(96, 96)), {40, 40, 64, 64}), std::out_of_range);
  EXPECT_EQ(up.calls.load(), 0);
}

TEST(BenchResultTest, JsonRoundTripIsLossless) {
  BenchResult r;
  r.label = "no-bn \"variant\"";
  r.protocol = "image";
  r.samples = {0.1, 1.0 / 3.0, 2.718281828459045, 1e-300};
  r.n_runs = 4;
  r.warmup_runs = 3;
  r.threads = 2;
  r.calls = 4;
  summarize(r);
  r.fps = 12.345678901234567;
  EXPECT_EQ(parse_bench_result(to_json_line(r)), r);
  EXPECT_EQ(to_json_line(r).find('\n'), std::string::npos);
}

TEST(BenchResultTest, TableListsEveryLabel) {
  BenchResult a{.label = "nearest", .protocol = "patch", .mean_s = 0.0012};
  BenchResult b{.label = "nearest", .protocol = "video", .fps = 812.4};
  BenchResult c{.label = "generator-bn", .protocol = "image", .mean_s = 0.5};
  const auto table = format_table({a, b, c}, "test cpu");
  EXPECT_EQ(table.rfind("# test cpu\n", 0), 0u);
  EXPECT_NE(table.find("nearest"), std::string::npos);
  EXPECT_NE(table.find("0.0012"), std::string::npos);
  EXPECT_NE(table.find("812.4"), std::string::npos);
  EXPECT_NE(table.find("generator-bn"), std::string::npos);
  EXPECT_NE(table.find("Video FPS"), std::string::npos);
  EXPECT_LT(table.find("nearest"), table.find("generator-bn"));
}

TEST(BenchResultTest, FingerprintNamesBlasCore) {
  EXPECT_NE(hardware_fingerprint().find("OpenBLAS"), std::string::npos);
}

}  // namespace
}  // namespace tsr
