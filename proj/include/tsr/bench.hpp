#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tsr/infer.hpp"

namespace tsr {

struct BenchResult {
  std::string label;
  std::string protocol;  // "patch", "image" or "video"
  int n_runs = 0;
  double mean_s = 0.0;
  double p50_s = 0.0;
  double p95_s = 0.0;
  /// Completed runs per wall-clock second. Equals 1 / mean_s when threads == 1.
  double fps = 0.0;
  int warmup_runs = 0;
  int threads = 1;
  /// Upscaler calls per run (tiles for the image protocol).
  int calls = 1;
  std::vector<double> samples;  // seconds, one per measured run

  bool operator==(const BenchResult&) const = default;
};

struct BenchOptions {
  int warmup_runs = 3;
  /// Values above 1 select throughput mode: runs are spread over this many
  /// threads and fps counts completions per wall-clock second.
  int threads = 1;
};

/// Linear interpolation between order statistics, q in [0, 1].
double percentile(std::vector<double> samples, double q);

/// Fills mean/p50/p95/fps from samples (single-threaded fps).
void summarize(BenchResult& result);

/// sr of one LR patch, n_runs >= 10 measured runs after the warm-up.
BenchResult time_patch(const Upscaler& upscaler, const ImageBuffer& patch, int n_runs, const BenchOptions& options = {});

/// tile -> per-tile sr -> stitch, end to end. `last_output` receives the
/// final run's image when non-null.
BenchResult time_whole_image(const Upscaler& upscaler, const ImageBuffer& image, int tile_size, int n_runs,
                             const BenchOptions& options = {}, ImageBuffer* last_output = nullptr);

/// Per frame: crop roi, sr, composite beside the frame. Frames are decoded
/// beforehand, so decode time is excluded. Needs >= 30 frames; the warm-up
/// reuses the first frame and is not counted.
BenchResult video_fps(const Upscaler& upscaler, const std::vector<ImageBuffer>& frames, const Roi& roi,
                      const BenchOptions& options = {});

std::string to_json_line(const BenchResult& result);
BenchResult parse_bench_result(std::string_view line);

/// CPU model, logical cores and BLAS core type on one line.
std::string hardware_fingerprint();

/// One row per label with single-patch mean, whole-image mean and video fps
/// columns; missing protocols print "-". Preceded by the fingerprint line.
std::string format_table(const std::vector<BenchResult>& results, std::string_view fingerprint);

}  // namespace tsr
