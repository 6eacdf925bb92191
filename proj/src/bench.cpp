#include "tsr/bench.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace tsr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_finite(const ImageBuffer& image, const std::string& label) {
  for (float v : image.values()) {
    if (!std::isfinite(v)) throw std::runtime_error(label + ": non-finite output");
  }
}

void check_runs(int n_runs, const BenchOptions& options) {
  if (n_runs < 10) throw std::invalid_argument("n_runs must be >= 10");
  if (options.warmup_runs < 0) throw std::invalid_argument("warmup_runs must be >= 0");
  if (options.threads < 1) throw std::invalid_argument("threads must be >= 1");
}

/// Runs `body` n_runs times after the warm-up, on options.threads threads.
template <typename F>
BenchResult measure(const std::string& label, std::string protocol, int n_runs, const BenchOptions& options, F&& body) {
  BenchResult r;
  r.label = label;
  r.protocol = std::move(protocol);
  r.n_runs = n_runs;
  r.warmup_runs = options.warmup_runs;
  r.threads = options.threads;
  for (int i = 0; i < options.warmup_runs; ++i) body();
  r.samples.assign(static_cast<std::size_t>(n_runs), 0.0);
  if (options.threads == 1) {
    for (auto& s : r.samples) {
      const auto start = Clock::now();
      body();
      s = seconds_since(start);
    }
    summarize(r);
    return r;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto wall_start = Clock::now();
  std::vector<std::thread> workers;
  for (int t = 0; t < options.threads; ++t) {
    workers.emplace_back([&] {
      for (int i = next++; i < n_runs; i = next++) {
        try {
          const auto start = Clock::now();
          body();
          r.samples[static_cast<std::size_t>(i)] = seconds_since(start);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
  const double wall = seconds_since(wall_start);
  summarize(r);
  r.fps = n_runs / wall;
  return r;
}

std::string read_cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(line.find_first_not_of(' ', colon + 1));
    }
  }
  return "unknown cpu";
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("percentile of no samples");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile q must be in [0, 1]");
  std::sort(samples.begin(), samples.end());
  const double pos = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

void summarize(BenchResult& r) {
  if (r.samples.empty()) throw std::invalid_argument("no samples to summarize");
  r.mean_s = std::accumulate(r.samples.begin(), r.samples.end(), 0.0) / static_cast<double>(r.samples.size());
  r.p50_s = percentile(r.samples, 0.5);
  r.p95_s = percentile(r.samples, 0.95);
  r.fps = r.mean_s > 0.0 ? 1.0 / r.mean_s : 0.0;
}

BenchResult time_patch(const Upscaler& upscaler, const ImageBuffer& patch, int n_runs, const BenchOptions& options) {
  check_runs(n_runs, options);
  return measure(upscaler.label(), "patch", n_runs, options,
                 [&] { check_finite(upscaler.upscale(patch), upscaler.label()); });
}

BenchResult time_whole_image(const Upscaler& upscaler, const ImageBuffer& image, int tile_size, int n_runs,
                             const BenchOptions& options, ImageBuffer* last_output) {
  check_runs(n_runs, options);
  std::atomic<int> calls{0};
  std::mutex out_mutex;
  auto r = measure(upscaler.label(), "image", n_runs, options, [&] {
    auto out = sr_image(upscaler, image, tile_size, [&](std::size_t) { ++calls; });
    check_finite(out, upscaler.label());
    if (last_output != nullptr) {
      std::lock_guard lock(out_mutex);
      *last_output = std::move(out);
    }
  });
  r.calls = calls / (n_runs + options.warmup_runs);
  return r;
}

BenchResult video_fps(const Upscaler& upscaler, const std::vector<ImageBuffer>& frames, const Roi& roi,
                      const BenchOptions& options) {
  if (frames.size() < 30) throw std::invalid_argument("video benchmark needs at least 30 frames");
  if (options.threads != 1) throw std::invalid_argument("video benchmark is sequential");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!frames[i].contains(roi)) throw std::out_of_range("frame " + std::to_string(i) + ": roi exceeds frame");
  }
  const auto process = [&](const ImageBuffer& frame) {
    const auto sr = upscaler.upscale(frame.crop(roi));
    check_finite(sr, upscaler.label());
    return composite_side_by_side(frame, sr);
  };
  for (int i = 0; i < options.warmup_runs; ++i) process(frames.front());

  BenchResult r;
  r.label = upscaler.label();
  r.protocol = "video";
  r.n_runs = static_cast<int>(frames.size());
  r.warmup_runs = options.warmup_runs;
  r.samples.reserve(frames.size());
  for (const auto& frame : frames) {
    const auto start = Clock::now();
    process(frame);
    r.samples.push_back(seconds_since(start));
  }
  summarize(r);
  // frames / total seconds, identical to 1 / mean.
  r.fps = static_cast<double>(frames.size()) / std::accumulate(r.samples.begin(), r.samples.end(), 0.0);
  return r;
}

std::string to_json_line(const BenchResult& r) {
  nlohmann::ordered_json j;
  j["label"] = r.label;
  j["protocol"] = r.protocol;
  j["n_runs"] = r.n_runs;
  j["mean_s"] = r.mean_s;
  j["p50_s"] = r.p50_s;
  j["p95_s"] = r.p95_s;
  j["fps"] = r.fps;
  j["warmup_runs"] = r.warmup_runs;
  j["threads"] = r.threads;
  j["calls"] = r.calls;
  j["samples"] = r.samples;
  return j.dump();
}

BenchResult parse_bench_result(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  BenchResult r;
  r.label = j.at("label").get<std::string>();
  r.protocol = j.at("protocol").get<std::string>();
  r.n_runs = j.at("n_runs").get<int>();
  r.mean_s = j.at("mean_s").get<double>();
  r.p50_s = j.at("p50_s").get<double>();
  r.p95_s = j.at("p95_s").get<double>();
  r.fps = j.at("fps").get<double>();
  r.warmup_runs = j.at("warmup_runs").get<int>();
  r.threads = j.value("threads", 1);
  r.calls = j.value("calls", 1);
  r.samples = j.value("samples", std::vector<double>{});
  return r;
}

std::string hardware_fingerprint() {
  std::ostringstream os;
  os << read_cpu_model() << " | " << std::thread::hardware_concurrency() << " logical cores | OpenBLAS "
     << openblas_get_corename() << " x" << openblas_get_num_threads();
  return os.str();
}

std::string format_table(const std::vector<BenchResult>& results, std::string_view fingerprint) {
  struct Row {
    std::string patch = "-", image = "-", video = "-";
  };
  std::vector<std::string> order;
  std::map<std::string, Row> rows;
  for (const auto& r : results) {
    if (!rows.contains(r.label)) order.push_back(r.label);
    auto& row = rows[r.label];
    if (r.protocol == "patch") row.patch = fixed(r.mean_s, 4);
    else if (r.protocol == "image") row.image = fixed(r.mean_s, 4);
    else if (r.protocol == "video") row.video = fixed(r.fps, 1);
  }
  const std::vector<std::string> header{"Model", "Single patch (s)", "Whole image (s)", "Video FPS"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& label : order) {
    const auto& row = rows[label];
    cells.push_back({label, row.patch, row.image, row.video});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

  std::ostringstream os;
  os << "# " << fingerprint << "\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      if (c == 0) os << std::left << std::setw(static_cast<int>(width[c])) << cells[i][c];
      else os << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[i][c];
    }
    os << "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
    }
  }
  return os.str();
}

}  // namespace tsr
