#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>
#include <string>

#include "tsr/bench.hpp"
#include "tsr/data.hpp"
#include "tsr/infer.hpp"
#include "tsr/metrics.hpp"
#include "tsr/models.hpp"
#include "tsr/png_io.hpp"
#include "tsr/train.hpp"
#include "tsr/weights.hpp"

namespace py = pybind11;

namespace {

using namespace tsr;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// (H, W) or (H, W, C) float32 in [0, 1] <-> planar ImageBuffer.
ImageBuffer to_image(const FloatArray& array) {
  if (array.ndim() != 2 && array.ndim() != 3) throw std::invalid_argument("image must be (H, W) or (H, W, C)");
  const auto h = static_cast<int>(array.shape(0)), w = static_cast<int>(array.shape(1));
  const int c = array.ndim() == 3 ? static_cast<int>(array.shape(2)) : 1;
  std::vector<ChannelRole> roles = c == 3 ? rgb_roles() : std::vector<ChannelRole>(c, ChannelRole::kGray);
  ImageBuffer img(h, w, std::move(roles));
  const float* src = array.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img.at(ch, y, x) = src[(static_cast<std::size_t>(y) * w + x) * c + ch];
  return img;
}

FloatArray to_array(const ImageBuffer& img) {
  const int h = img.height(), w = img.width(), c = img.channels();
  FloatArray out({h, w, c});
  float* dst = out.mutable_data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) dst[(static_cast<std::size_t>(y) * w + x) * c + ch] = img.at(ch, y, x);
  return out;
}

Interpolation parse_interpolation(const std::string& name) {
  if (name == "nearest") return Interpolation::kNearest;
  if (name == "bicubic") return Interpolation::kBicubic;
  throw std::invalid_argument("interpolation must be 'nearest' or 'bicubic', got '" + name + "'");
}

py::dict bench_dict(const BenchResult& r) {
  py::dict d;
  d["label"] = r.label;
  d["protocol"] = r.protocol;
  d["n_runs"] = r.n_runs;
  d["mean_s"] = r.mean_s;
  d["p50_s"] = r.p50_s;
  d["p95_s"] = r.p95_s;
  d["fps"] = r.fps;
  d["samples"] = r.samples;
  return d;
}

py::dict validation_dict(const ValidationRecord& v) {
  py::dict d;
  d["iteration"] = v.iteration;
  d["psnr"] = v.psnr;
  d["ssim"] = v.ssim;
  d["checkerboard_index"] = v.checkerboard_index;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Tiled super-resolution core";

  py::class_<ModelF>(m, "Model")
      .def_property_readonly("kind",
                             [](const ModelF& model) -> std::string {
                               if (std::holds_alternative<GeneratorSpec>(model.spec())) return "generator";
                               if (std::holds_alternative<DiscriminatorSpec>(model.spec())) return "discriminator";
                               return "empty";
                             })
      .def_property_readonly("spec_json", [](const ModelF& model) { return spec_to_json(model.spec()); })
      .def_property_readonly("parameter_count", [](const ModelF& model) { return parameter_count(model); })
      .def("save", [](const ModelF& model, const std::filesystem::path& path) { save_weights(model, path); },
           py::arg("path"));

  m.def(
      "build_generator",
      [](int scale, int base_channels, int n_res_blocks, bool use_bn, const std::string& upsampler, int edge_kernel,
         std::uint64_t seed) {
        GeneratorSpec spec;
        spec.scale = scale;
        spec.base_channels = base_channels;
        spec.n_res_blocks = n_res_blocks;
        spec.use_bn = use_bn;
        spec.upsampler = parse_upsampler(upsampler);
        spec.edge_kernel = edge_kernel;
        return build_generator<float>(spec, seed);
      },
      py::arg("scale") = 4, py::arg("base_channels") = 64, py::arg("n_res_blocks") = 16, py::arg("use_bn") = false,
      py::arg("upsampler") = "nearest_then_conv", py::arg("edge_kernel") = 9, py::arg("seed") = 1);
  m.def(
      "build_discriminator",
      [](std::vector<int> channels, std::uint64_t seed) {
        DiscriminatorSpec spec;
        spec.conv_block_channels = std::move(channels);
        return build_discriminator<float>(spec, seed);
      },
      py::arg("channels") = std::vector<int>{64, 64, 128, 128, 256, 256, 512, 512}, py::arg("seed") = 2);
  m.def("load_model", [](const std::filesystem::path& path) { return load_weights(path); }, py::arg("path"));

  m.def(
      "sr_patch",
      [](const ModelF& generator, const FloatArray& patch) {
        ImageBuffer out;
        const auto in = to_image(patch);
        {
          py::gil_scoped_release release;
          out = sr_patch(generator, in);
        }
        return to_array(out);
      },
      py::arg("generator"), py::arg("patch"));
  m.def(
      "sr_image",
      [](const ModelF& generator, const FloatArray& image, int tile) {
        ImageBuffer out;
        const auto in = to_image(image);
        {
          py::gil_scoped_release release;
          out = sr_image(generator, in, tile);
        }
        return to_array(out);
      },
      py::arg("generator"), py::arg("image"), py::arg("tile") = 64);
  m.def(
      "upscale_interpolated",
      [](const FloatArray& image, const std::string& kind, int scale) {
        return to_array(InterpolationUpscaler(parse_interpolation(kind), scale).upscale(to_image(image)));
      },
      py::arg("image"), py::arg("kind") = "bicubic", py::arg("scale") = 4);
  m.def(
      "bicubic_downsample",
      [](const FloatArray& image, int factor) { return to_array(bicubic_downsample(to_image(image), factor)); },
      py::arg("image"), py::arg("factor") = 4);

  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(to_image(a), to_image(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "ssim", [](const FloatArray& a, const FloatArray& b) { return ssim(to_image(a), to_image(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "checkerboard_index",
      [](const FloatArray& image, int period) { return checkerboard_index(to_image(image), period); },
      py::arg("image"), py::arg("period") = 4);

  m.def(
      "synthesize",
      [](std::uint64_t seed, int size) {
        std::mt19937_64 rng(seed);
        const auto sample = synthesize(rng, size);
        return py::make_tuple(to_array(sample.image), sample.scheme.k);
      },
      py::arg("seed"), py::arg("size") = 128, "Returns (rgb image, number of stains).");

  m.def("read_png", [](const std::filesystem::path& path) { return to_array(read_png(path)); }, py::arg("path"));
  m.def(
      "write_png",
      [](const std::filesystem::path& path, const FloatArray& image, int bit_depth) {
        write_png(path, to_image(image), bit_depth);
      },
      py::arg("path"), py::arg("image"), py::arg("bit_depth") = 8);

  m.def(
      "time_patch",
      [](const ModelF& generator, const FloatArray& patch, int runs, int warmup) {
        const ModelUpscaler up("model", std::make_shared<const ModelF>(generator.clone()));
        const auto in = to_image(patch);
        BenchResult r;
        {
          py::gil_scoped_release release;
          r = time_patch(up, in, runs, BenchOptions{warmup, 1});
        }
        return bench_dict(r);
      },
      py::arg("generator"), py::arg("patch"), py::arg("runs") = 10, py::arg("warmup") = 3);

  m.def(
      "train",
      [](ModelF& generator, ModelF& discriminator, int iterations, int pretrain, int batch_size, int train_count,
         int val_count, int hr_size, std::uint64_t seed) {
        TrainPlan plan = TrainPlan::desk();
        plan.total_iterations = iterations;
        plan.pretrain_iterations = pretrain;
        plan.iterations_per_epoch = iterations;
        plan.batch_size = batch_size;
        plan.seed = seed;
        const auto* spec = std::get_if<GeneratorSpec>(&generator.spec());
        if (!spec) throw std::invalid_argument("train: first model must be a generator");
        const int scale = spec->scale;
        const TrainDataset data{synthetic_pairs(train_count, hr_size, scale, seed),
                                synthetic_pairs(val_count, hr_size, scale, seed + 1)};
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = run_training(generator, discriminator, plan, data);
        }
        py::list out;
        for (const auto& v : result.validation) out.append(validation_dict(v));
        return out;
      },
      py::arg("generator"), py::arg("discriminator"), py::arg("iterations"), py::arg("pretrain") = 0,
      py::arg("batch_size") = 8, py::arg("train_count") = 16, py::arg("val_count") = 4, py::arg("hr_size") = 64,
      py::arg("seed") = 1, "Trains in place on synthetic data; returns the validation history.");
}
