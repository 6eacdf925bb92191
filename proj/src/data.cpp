#include "tsr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "tsr/png_io.hpp"

namespace tsr {

namespace {

constexpr int kMicrotubules = 0;
constexpr int kNucleus = 1;
constexpr int kProtein = 2;
constexpr int kReticulum = 3;

using Plane = std::span<float>;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

void splat(Plane plane, int size, double cx, double cy, double sigma, double amp) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - r), x1 = std::min(size - 1, static_cast<int>(cx) + r);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - r), y1 = std::min(size - 1, static_cast<int>(cy) + r);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      plane[static_cast<std::size_t>(y) * size + x] += static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv));
    }
}

// Smoothly interpolated lattice noise in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, int size, double cell) : cell_(cell) {
    n_ = static_cast<int>(size / cell) + 3;
    values_.resize(static_cast<std::size_t>(n_) * n_);
    for (auto& v : values_) v = uniform(rng, -1.0, 1.0);
  }

  double at(double x, double y) const {
    const double gx = x / cell_, gy = y / cell_;
    const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
    const double fx = smooth(gx - ix), fy = smooth(gy - iy);
    const double a = lattice(ix, iy), b = lattice(ix + 1, iy);
    const double c = lattice(ix, iy + 1), d = lattice(ix + 1, iy + 1);
    return (a + (b - a) * fx) * (1 - fy) + (c + (d - c) * fx) * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  double lattice(int x, int y) const { return values_[static_cast<std::size_t>(y) * n_ + x]; }

  double cell_;
  int n_;
  std::vector<double> values_;
};

void render_microtubules(std::mt19937_64& rng, Plane plane, int size) {
  const double area = (size / 128.0) * (size / 128.0);
  const int count = std::max(1, static_cast<int>(std::lround(uniform_int(rng, 6, 14) * area)));
  const double step = 0.7;
  for (int f = 0; f < count; ++f) {
    double x = uniform(rng, 0, size), y = uniform(rng, 0, size);
    double angle = uniform(rng, 0, 2 * std::numbers::pi);
    const double length = uniform(rng, 0.4, 1.2) * size;
    const double intensity = uniform(rng, 0.5, 0.9);
    const double sigma = uniform(rng, 0.7, 1.2);
    const double bend = uniform(rng, 0.01, 0.05);
    // Amplitude per splat so the stroke peaks near `intensity`.
    const double amp = intensity * step / (std::sqrt(2 * std::numbers::pi) * sigma);
    std::normal_distribution<double> turn(0.0, bend);
    for (double s = 0; s < length; s += step) {
      splat(plane, size, x, y, sigma, amp);
      angle += turn(rng);
      x += step * std::cos(angle);
      y += step * std::sin(angle);
      if (x < -4 || y < -4 || x > size + 4 || y > size + 4) break;
    }
  }
}

void render_nuclei(std::mt19937_64& rng, Plane plane, int size) {
  const int count = uniform_int(rng, 1, 3);
  ValueNoise texture(rng, size, 6.0);
  for (int n = 0; n < count; ++n) {
    const double cx = uniform(rng, 0.15, 0.85) * size, cy = uniform(rng, 0.15, 0.85) * size;
    const double rx = uniform(rng, 0.08, 0.18) * size, ry = uniform(rng, 0.08, 0.18) * size;
    const double theta = uniform(rng, 0, std::numbers::pi);
    const double amp = uniform(rng, 0.5, 0.9);
    const double ct = std::cos(theta), st = std::sin(theta);
    const int reach = static_cast<int>(1.5 * std::max(rx, ry)) + 1;
    for (int y = std::max(0, static_cast<int>(cy) - reach); y <= std::min(size - 1, static_cast<int>(cy) + reach); ++y)
      for (int x = std::max(0, static_cast<int>(cx) - reach); x <= std::min(size - 1, static_cast<int>(cx) + reach); ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
        const double r = std::sqrt(u * u + v * v);
        const double edge = 1.0 / (1.0 + std::exp((r - 1.0) * 12.0));
        plane[static_cast<std::size_t>(y) * size + x] +=
            static_cast<float>(amp * edge * (0.85 + 0.15 * texture.at(x, y)));
      }
  }
}

void render_puncta(std::mt19937_64& rng, Plane plane, int size) {
  const double area = (size / 128.0) * (size / 128.0);
  const int count = std::max(1, static_cast<int>(std::lround(uniform_int(rng, 20, 60) * area)));
  for (int i = 0; i < count; ++i) {
    const double x = uniform(rng, 0, size), y = uniform(rng, 0, size);
    splat(plane, size, x, y, uniform(rng, 0.8, 1.6), uniform(rng, 0.3, 1.0));
  }
}

void render_reticulum(std::mt19937_64& rng, Plane plane, int size) {
  ValueNoise noise(rng, size, uniform(rng, 6.0, 12.0));
  const double amp = uniform(rng, 0.4, 0.7);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double n = noise.at(x, y) / 0.12;
      plane[static_cast<std::size_t>(y) * size + x] += static_cast<float>(amp * std::exp(-n * n));
    }
}

// Detector dark offset plus smooth autofluorescence haze, as recorded by
// every active confocal channel.
void render_background(std::mt19937_64& rng, Plane plane, int size) {
  ValueNoise haze(rng, size, size / 2.0);
  const double offset = uniform(rng, 0.01, 0.04);
  const double amp = uniform(rng, 0.01, 0.04);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      plane[static_cast<std::size_t>(y) * size + x] += static_cast<float>(offset + amp * 0.5 * (1.0 + haze.at(x, y)));
    }
}

struct AxisWeights {
  int start = 0;
  int ref = 0;
  std::vector<double> weights;
};

std::vector<AxisWeights> resample_weights(int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double filterscale = std::max(scale, 1.0);
  const double support = 2.0 * filterscale;
  std::vector<AxisWeights> axis(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = std::max(static_cast<int>(center - support + 0.5), 0);
    const int hi = std::min(static_cast<int>(center + support + 0.5), in);
    auto& a = axis[i];
    a.start = lo;
    a.ref = std::clamp(static_cast<int>(center), 0, in - 1);
    double total = 0.0;
    for (int j = lo; j < hi; ++j) {
      const double w = keys_kernel((j - center + 0.5) / filterscale);
      a.weights.push_back(w);
      total += w;
    }
    for (auto& w : a.weights) w /= total;
  }
  return axis;
}

// Written as ref + sum w (x - ref) so flat regions come out exactly flat.
double apply_weights(const AxisWeights& a, const double* src, std::size_t stride) {
  const double ref = src[a.ref * stride];
  double acc = 0.0;
  for (std::size_t k = 0; k < a.weights.size(); ++k) acc += a.weights[k] * (src[(a.start + k) * stride] - ref);
  return ref + acc;
}

ImageBuffer to_gray(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  ImageBuffer out(img.height(), img.width(), {ChannelRole::kGray});
  auto dst = out.plane(0);
  for (int c = 0; c < img.channels(); ++c) {
    const auto src = img.plane(c);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  for (auto& v : dst) v /= static_cast<float>(img.channels());
  return out;
}

}  // namespace

ChannelScheme ChannelScheme::from_k(int k) {
  if (k < 1 || k > 4) throw std::invalid_argument("channel scheme k must be in 1..4, got " + std::to_string(k));
  return ChannelScheme{k};
}

std::vector<ChannelRole> ChannelScheme::stains() const {
  auto all = stain_roles();
  all.resize(static_cast<std::size_t>(std::clamp(k, 0, 4)));
  return all;
}

std::vector<ChannelRole> stain_roles() {
  return {ChannelRole::kMicrotubules, ChannelRole::kNucleus, ChannelRole::kProtein, ChannelRole::kReticulum};
}

ImageBuffer compose_rgb(const ImageBuffer& stains, ChannelScheme scheme) {
  if (stains.channels() != 4) throw DimensionError("compose_rgb", "channels", "expected 4 stain channels");
  const int h = stains.height(), w = stains.width();
  ImageBuffer out = ImageBuffer::rgb(h, w);
  const auto on = [&](int idx) { return idx < scheme.k; };
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const auto mt = stains.plane(kMicrotubules), nu = stains.plane(kNucleus);
  const auto pr = stains.plane(kProtein), er = stains.plane(kReticulum);
  auto r = out.plane(0), g = out.plane(1), b = out.plane(2);
  for (std::size_t i = 0; i < n; ++i) {
    const float y = on(kReticulum) ? 0.5f * er[i] : 0.0f;
    r[i] = (on(kMicrotubules) ? mt[i] : 0.0f) + y;
    g[i] = (on(kProtein) ? pr[i] : 0.0f) + y;
    b[i] = on(kNucleus) ? nu[i] : 0.0f;
  }
  out.clamp01();
  return out;
}

SyntheticSample synthesize(std::mt19937_64& rng, int size) {
  if (size < 64) throw std::invalid_argument("synthetic sample size must be >= 64");
  SyntheticSample s;
  s.scheme = ChannelScheme::from_k(uniform_int(rng, 1, 4));
  s.stains = ImageBuffer(size, size, stain_roles());
  render_microtubules(rng, s.stains.plane(kMicrotubules), size);
  if (s.scheme.k >= 2) render_nuclei(rng, s.stains.plane(kNucleus), size);
  if (s.scheme.k >= 3) render_puncta(rng, s.stains.plane(kProtein), size);
  if (s.scheme.k >= 4) render_reticulum(rng, s.stains.plane(kReticulum), size);
  for (int c = 0; c < s.scheme.k; ++c) render_background(rng, s.stains.plane(c), size);
  s.stains.clamp01();
  s.image = compose_rgb(s.stains, s.scheme);
  return s;
}

ImageBuffer synthesize_sample(std::mt19937_64& rng, int size) { return synthesize(rng, size).image; }

ImageBuffer load_atlas_sample(const std::vector<std::filesystem::path>& channel_paths, int k) {
  const auto scheme = ChannelScheme::from_k(k);
  if (static_cast<std::size_t>(k) > channel_paths.size()) {
    throw std::invalid_argument("k = " + std::to_string(k) + " needs at least that many channel files");
  }
  ImageBuffer stains;
  for (int c = 0; c < k; ++c) {
    const auto gray = to_gray(read_png(channel_paths[c]));
    if (c == 0) {
      stains = ImageBuffer(gray.height(), gray.width(), stain_roles());
    } else if (gray.height() != stains.height() || gray.width() != stains.width()) {
      throw ImageIoError(channel_paths[c].string(), "size " + std::to_string(gray.width()) + "x" +
                                                        std::to_string(gray.height()) + " differs from " +
                                                        std::to_string(stains.width()) + "x" +
                                                        std::to_string(stains.height()));
    }
    std::copy(gray.plane(0).begin(), gray.plane(0).end(), stains.plane(c).begin());
  }
  return compose_rgb(stains, scheme);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ImageIoError(path.string(), "cannot open manifest");
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      for (const auto& c : j.at("channels")) {
        std::filesystem::path p = c.get<std::string>();
        e.channels.push_back(p.is_absolute() ? p : base / p);
      }
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ImageIoError(path.string(), "line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return entries;
}

double keys_kernel(double x, double a) {
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

ImageBuffer bicubic_resize(const ImageBuffer& image, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0) throw std::invalid_argument("bicubic_resize: output size must be positive");
  const int h = image.height(), w = image.width();
  const auto wx = resample_weights(w, out_width);
  const auto wy = resample_weights(h, out_height);
  ImageBuffer out(out_height, out_width, image.roles());
  std::vector<double> src(static_cast<std::size_t>(h) * w);
  std::vector<double> mid(static_cast<std::size_t>(h) * out_width);
  for (int c = 0; c < image.channels(); ++c) {
    const auto plane = image.plane(c);
    std::copy(plane.begin(), plane.end(), src.begin());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < out_width; ++x)
        mid[static_cast<std::size_t>(y) * out_width + x] = apply_weights(wx[x], &src[static_cast<std::size_t>(y) * w], 1);
    auto dst = out.plane(c);
    for (int y = 0; y < out_height; ++y)
      for (int x = 0; x < out_width; ++x) {
        const double v = apply_weights(wy[y], &mid[x], static_cast<std::size_t>(out_width));
        dst[static_cast<std::size_t>(y) * out_width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return out;
}

ImageBuffer bicubic_downsample(const ImageBuffer& image, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (image.height() % factor != 0 || image.width() % factor != 0) {
    throw DimensionError("bicubic_downsample", image.height() % factor != 0 ? "height" : "width",
                         "not divisible by factor " + std::to_string(factor));
  }
  return bicubic_resize(image, image.height() / factor, image.width() / factor);
}

ImageBuffer bicubic_upsample(const ImageBuffer& image, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  return bicubic_resize(image, image.height() * factor, image.width() * factor);
}

ImageBuffer nearest_upsample(const ImageBuffer& image, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  const int oh = image.height() * factor, ow = image.width() * factor;
  ImageBuffer out(oh, ow, image.roles());
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) out.at(c, y, x) = image.at(c, y / factor, x / factor);
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

TileGrid tile(const ImageBuffer& image, int tile_size) {
  if (tile_size < 8) throw std::invalid_argument("tile size must be >= 8");
  TileGrid grid;
  grid.tile_size = tile_size;
  grid.original_height = image.height();
  grid.original_width = image.width();
  grid.rows = (image.height() + tile_size - 1) / tile_size;
  grid.cols = (image.width() + tile_size - 1) / tile_size;
  grid.pad_bottom = grid.rows * tile_size - image.height();
  grid.pad_right = grid.cols * tile_size - image.width();
  grid.tiles.reserve(static_cast<std::size_t>(grid.rows) * grid.cols);
  for (int r = 0; r < grid.rows; ++r)
    for (int col = 0; col < grid.cols; ++col) {
      ImageBuffer t(tile_size, tile_size, image.roles());
      for (int c = 0; c < image.channels(); ++c)
        for (int y = 0; y < tile_size; ++y) {
          const int sy = reflect_index(r * tile_size + y, image.height());
          for (int x = 0; x < tile_size; ++x)
            t.at(c, y, x) = image.at(c, sy, reflect_index(col * tile_size + x, image.width()));
        }
      grid.tiles.push_back(std::move(t));
    }
  return grid;
}

ImageBuffer stitch(const TileGrid& grid) {
  const int t = grid.tile_size;
  if (grid.rows < 1 || grid.cols < 1 || t < 1) throw std::invalid_argument("stitch: empty grid");
  if (grid.tiles.size() != static_cast<std::size_t>(grid.rows) * grid.cols) {
    throw std::invalid_argument("stitch: " + std::to_string(grid.tiles.size()) + " tiles for a " +
                                std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  if (grid.pad_bottom < 0 || grid.pad_right < 0 || grid.pad_bottom >= t || grid.pad_right >= t ||
      grid.rows * t - grid.pad_bottom != grid.original_height || grid.cols * t - grid.pad_right != grid.original_width) {
    throw std::invalid_argument("stitch: padding does not match the recorded original size");
  }
  const auto& roles = grid.tiles.front().roles();
  for (const auto& tl : grid.tiles) {
    if (tl.height() != t || tl.width() != t || tl.roles() != roles) {
      throw std::invalid_argument("stitch: tiles differ in size or channels");
    }
  }
  ImageBuffer out(grid.original_height, grid.original_width, roles);
  for (int r = 0; r < grid.rows; ++r)
    for (int col = 0; col < grid.cols; ++col) {
      const auto& tl = grid.tiles[static_cast<std::size_t>(r) * grid.cols + col];
      const int h = std::min(t, grid.original_height - r * t);
      const int w = std::min(t, grid.original_width - col * t);
      out.paste(h == t && w == t ? tl : tl.crop(Roi{0, 0, w, h}), col * t, r * t);
    }
  return out;
}

std::vector<TrainingPair> make_training_pairs(const ImageBuffer& image, int hr_tile, int scale) {
  if (scale < 1 || hr_tile % scale != 0) {
    throw std::invalid_argument("hr tile " + std::to_string(hr_tile) + " is not divisible by scale " +
                                std::to_string(scale));
  }
  auto grid = tile(image, hr_tile);
  std::vector<TrainingPair> pairs;
  pairs.reserve(grid.tiles.size());
  for (auto& hr : grid.tiles) {
    auto lr = bicubic_downsample(hr, scale);
    pairs.push_back({std::move(lr), std::move(hr)});
  }
  return pairs;
}

}  // namespace tsr
