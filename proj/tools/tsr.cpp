#include <cstdio>
#include <future>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "CLI11.hpp"
#include "tsr/bench.hpp"
#include "tsr/data.hpp"
#include "tsr/infer.hpp"
#include "tsr/metrics.hpp"
#include "tsr/png_io.hpp"
#include "tsr/service.hpp"
#include "tsr/train.hpp"
#include "tsr/weights.hpp"

namespace fs = std::filesystem;
using namespace tsr;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitModel = 4;

/// Failure in a model file, spec or training run.
struct ModelFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string numbered(const std::string& prefix, std::size_t i, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  return prefix + buf + ext;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ImageIoError(dir.string(), "cannot create directory: " + ec.message());
}

ModelF load_generator(const fs::path& path) {
  auto model = load_weights(path);
  if (!std::holds_alternative<GeneratorSpec>(model.spec())) {
    throw ModelFailure(path.string() + ": not a generator weight file");
  }
  return model;
}

/// "nearest", "bicubic" or a generator weight file.
std::unique_ptr<Upscaler> make_upscaler(const std::string& name) {
  if (name == "nearest") return std::make_unique<InterpolationUpscaler>(Interpolation::kNearest, 4);
  if (name == "bicubic") return std::make_unique<InterpolationUpscaler>(Interpolation::kBicubic, 4);
  return std::make_unique<ModelUpscaler>(fs::path(name).stem().string(),
                                         std::make_shared<const ModelF>(load_generator(name)));
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  fs::path out_dir = "run";
  fs::path manifest;
  int iterations = 2000;
  int pretrain = 500;
  int epoch = 500;
  int batch = 8;
  double lr = 1e-4;
  int train_count = 256;
  int val_count = 32;
  int hr_size = 128;
  std::uint64_t seed = 1;
  int base_channels = 32;
  int res_blocks = 4;
  int edge_kernel = 3;
  bool bn = false;
  std::string upsampler = "nearest_then_conv";
  bool no_smoothing = false;
  bool quiet = false;
};

void add_train(CLI::App& app, std::function<void()>& action) {
  auto a = std::make_shared<TrainArgs>();
  auto* cmd = app.add_subcommand("train", "Train a generator/discriminator pair");
  cmd->add_option("--out-dir", a->out_dir, "Output directory for logs and checkpoints")->capture_default_str();
  cmd->add_option("--manifest", a->manifest, "Train on atlas images listed in a manifest instead of synthetic data");
  cmd->add_option("--iterations", a->iterations, "Total iterations")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--pretrain", a->pretrain, "Pixel/content-only warm-up iterations")->capture_default_str();
  cmd->add_option("--epoch", a->epoch, "Iterations per epoch (validation + checkpoint)")->capture_default_str();
  cmd->add_option("--batch", a->batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", a->lr, "First-half learning rate; the second half uses lr/10")->capture_default_str();
  cmd->add_option("--train-count", a->train_count, "Synthetic training images")->capture_default_str();
  cmd->add_option("--val-count", a->val_count, "Synthetic validation images")->capture_default_str();
  cmd->add_option("--hr-size", a->hr_size, "HR tile size")->capture_default_str();
  cmd->add_option("--seed", a->seed, "Seed for data, weights and batches")->capture_default_str();
  cmd->add_option("--base-channels", a->base_channels, "Generator width")->capture_default_str();
  cmd->add_option("--res-blocks", a->res_blocks, "Generator residual blocks")->capture_default_str();
  cmd->add_option("--edge-kernel", a->edge_kernel, "Head/tail conv size")->capture_default_str();
  cmd->add_flag("--bn", a->bn, "Use batch normalization in the generator");
  cmd->add_option("--upsampler", a->upsampler, "nearest_then_conv|transposed_conv|subpixel_conv|bilinear_then_conv")
      ->capture_default_str();
  cmd->add_flag("--no-smoothing", a->no_smoothing, "Hard 1/0 discriminator targets");
  cmd->add_flag("--quiet", a->quiet, "No progress output");
  action = [a] {
    GeneratorSpec gs = desk_generator_spec();
    gs.base_channels = a->base_channels;
    gs.n_res_blocks = a->res_blocks;
    gs.edge_kernel = a->edge_kernel;
    gs.use_bn = a->bn;
    DiscriminatorSpec ds = desk_discriminator_spec();
    TrainPlan plan = TrainPlan::desk();
    plan.total_iterations = a->iterations;
    plan.pretrain_iterations = a->pretrain;
    plan.iterations_per_epoch = a->epoch;
    plan.batch_size = a->batch;
    plan.lr_first_half = a->lr;
    plan.lr_second_half = a->lr / 10.0;
    plan.smoothing.enabled = !a->no_smoothing;
    plan.seed = a->seed;
    ModelF g, d;
    try {
      gs.upsampler = parse_upsampler(a->upsampler);
      plan.validate();
      g = build_generator<float>(gs, a->seed);
      d = build_discriminator<float>(ds, a->seed + 1);
    } catch (const std::invalid_argument& e) {
      throw ModelFailure(e.what());
    }

    TrainDataset data;
    if (!a->manifest.empty()) {
      std::vector<TrainingPair> all;
      for (const auto& entry : read_manifest(a->manifest)) {
        const auto image = load_atlas_sample(entry.channels, static_cast<int>(entry.channels.size()));
        for (auto& p : make_training_pairs(image, a->hr_size, gs.scale)) all.push_back(std::move(p));
      }
      if (all.size() < 2) throw ImageIoError(a->manifest.string(), "manifest yields fewer than 2 training pairs");
      const std::size_t n_val = std::max<std::size_t>(1, all.size() / 8);
      data.validation.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
      all.resize(all.size() - n_val);
      data.train = std::move(all);
    } else {
      data.train = synthetic_pairs(a->train_count, a->hr_size, gs.scale, a->seed);
      data.validation = synthetic_pairs(a->val_count, a->hr_size, gs.scale, a->seed + 1000);
    }

    ensure_dir(a->out_dir);
    std::ofstream metrics(a->out_dir / "metrics.jsonl");
    std::ofstream validation(a->out_dir / "validation.jsonl");
    TrainOptions opts;
    opts.checkpoint_dir = a->out_dir / "checkpoints";
    opts.metric_log = &metrics;
    const bool quiet = a->quiet;
    opts.on_validation = [&validation, quiet](const ValidationRecord& v) {
      validation << to_json_line(v) << "\n" << std::flush;
      if (!quiet) {
        std::cerr << "iteration " << v.iteration << ": psnr " << v.psnr << " dB, ssim " << v.ssim << "\n";
      }
    };
    try {
      run_training(g, d, plan, data, opts);
    } catch (const TrainingError& e) {
      throw ModelFailure(e.what());
    }
    save_weights(g, a->out_dir / "generator.tsrw");
    save_weights(d, a->out_dir / "discriminator.tsrw");
    std::cout << (a->out_dir / "generator.tsrw").string() << "\n";
  };
}

// ---- synth-data -------------------------------------------------------------

void add_synth(CLI::App& app, std::function<void()>& action) {
  struct Args {
    int count = 16;
    int size = 256;
    std::uint64_t seed = 1;
    fs::path out = "synthetic";
    bool stains = false;
  };
  auto a = std::make_shared<Args>();
  auto* cmd = app.add_subcommand("synth-data", "Render synthetic confocal-style images");
  cmd->add_option("--count", a->count, "Number of images")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--size", a->size, "Image side in pixels (>= 64)")->capture_default_str();
  cmd->add_option("--seed", a->seed, "Random seed")->capture_default_str();
  cmd->add_option("--out", a->out, "Output directory")->capture_default_str();
  cmd->add_flag("--stains", a->stains, "Also write per-stain grayscale files and manifest.jsonl");
  action = [a] {
    ensure_dir(a->out);
    std::mt19937_64 rng(a->seed);
    std::ofstream manifest;
    if (a->stains) manifest.open(a->out / "manifest.jsonl");
    for (int i = 0; i < a->count; ++i) {
      const auto sample = synthesize(rng, a->size);
      const auto id = numbered("sample_", static_cast<std::size_t>(i), "");
      write_png(a->out / (id + ".png"), sample.image);
      if (!a->stains) continue;
      std::string channels;
      for (int c = 0; c < sample.scheme.k; ++c) {
        const auto name = id + "_" + std::string(to_string(stain_roles()[static_cast<std::size_t>(c)])) + ".png";
        const auto plane = sample.stains.plane(c);
        write_png(a->out / name, ImageBuffer(a->size, a->size, {ChannelRole::kGray},
                                             std::vector<float>(plane.begin(), plane.end())));
        channels += (c ? ",\"" : "\"") + name + "\"";
      }
      manifest << "{\"id\":\"" << id << "\",\"channels\":[" << channels << "]}\n";
    }
    std::cout << a->count << " images written to " << a->out.string() << "\n";
  };
}

// ---- sr ---------------------------------------------------------------------

void add_sr(CLI::App& app, std::function<void()>& action) {
  struct Args {
    std::string model;
    fs::path input, output;
    int tile = 64;
    std::string roi;
    int depth = 8;
  };
  auto a = std::make_shared<Args>();
  auto* cmd = app.add_subcommand("sr", "Super-resolve one PNG");
  cmd->add_option("--model", a->model, "Generator weight file, or nearest|bicubic")->required();
  cmd->add_option("--input,-i", a->input, "LR PNG")->required();
  cmd->add_option("--output,-o", a->output, "SR PNG")->required();
  cmd->add_option("--tile", a->tile, "Tile size; 0 runs the whole input as one patch")->capture_default_str();
  cmd->add_option("--roi", a->roi, "Crop x,y,w,h before super-resolving");
  cmd->add_option("--depth", a->depth, "Output bit depth")->check(CLI::IsMember({8, 16}))->capture_default_str();
  action = [a] {
    const auto up = make_upscaler(a->model);
    auto image = read_png(a->input);
    if (!a->roi.empty()) image = image.crop(parse_roi(a->roi));
    const auto out = a->tile > 0 ? sr_image(*up, image, a->tile) : up->upscale(image);
    write_png(a->output, out, a->depth);
  };
}

// ---- video-roi --------------------------------------------------------------

void add_video(CLI::App& app, std::function<void()>& action) {
  struct Args {
    std::string model;
    fs::path frames, out = "video_out";
    std::string roi;
    bool composite = false;
  };
  auto a = std::make_shared<Args>();
  auto* cmd = app.add_subcommand("video-roi", "Super-resolve one region of every frame in a PNG directory");
  cmd->add_option("--model", a->model, "Generator weight file, or nearest|bicubic")->required();
  cmd->add_option("--frames", a->frames, "Directory of numbered PNG frames")->required();
  cmd->add_option("--roi", a->roi, "x,y,w,h")->required();
  cmd->add_option("--out", a->out, "Output directory")->capture_default_str();
  cmd->add_flag("--composite", a->composite, "Write the frame and SR crop side by side");
  action = [a] {
    const auto up = make_upscaler(a->model);
    const PngFrameDirectory source(a->frames);
    ensure_dir(a->out);
    double total_ms = 0.0;
    sr_video_roi(*up, source, parse_roi(a->roi), [&](VideoFrame&& f) {
      const auto image = a->composite ? composite_side_by_side(f.original, f.sr_crop) : f.sr_crop;
      write_png(a->out / numbered("sr_", f.index, ".png"), image);
      total_ms += f.infer_ms;
    });
    std::cout << source.size() << " frames, " << (source.size() * 1000.0 / std::max(total_ms, 1e-9))
              << " fps (inference only)\n";
  };
}

// ---- bench ------------------------------------------------------------------

void add_bench(CLI::App& app, std::function<void()>& action) {
  struct Args {
    std::string protocol;
    std::vector<std::string> models{"nearest", "bicubic"};
    int runs = 20;
    int warmup = 3;
    int threads = 1;
    int tile = 64;
    std::string roi = "0,0,64,64";
    fs::path frames;
    fs::path jsonl;
    std::uint64_t seed = 1;
  };
  auto a = std::make_shared<Args>();
  auto* cmd = app.add_subcommand("bench", "Time single-patch, whole-image or video-ROI inference");
  cmd->add_option("protocol", a->protocol, "patch|image|video|all")
      ->required()
      ->check(CLI::IsMember({"patch", "image", "video", "all"}));
  cmd->add_option("--model", a->models, "Weight files and/or nearest|bicubic (repeatable)")->capture_default_str();
  cmd->add_option("--runs", a->runs, "Measured runs (>= 10)")->capture_default_str();
  cmd->add_option("--warmup", a->warmup, "Excluded warm-up runs")->capture_default_str();
  cmd->add_option("--threads", a->threads, "Concurrent throughput mode when > 1 (patch, image)")->capture_default_str();
  cmd->add_option("--tile", a->tile, "Tile size for the image protocol")->capture_default_str();
  cmd->add_option("--roi", a->roi, "x,y,w,h for the video protocol")->capture_default_str();
  cmd->add_option("--frames", a->frames, "PNG frame directory for the video protocol (default: 30 synthetic)");
  cmd->add_option("--jsonl", a->jsonl, "Also append result records to this file");
  cmd->add_option("--seed", a->seed, "Seed for synthetic inputs")->capture_default_str();
  action = [a] {
    std::vector<std::unique_ptr<Upscaler>> ups;
    for (const auto& m : a->models) ups.push_back(make_upscaler(m));
    std::mt19937_64 rng(a->seed);
    const auto image = synthesize_sample(rng, 512);
    const auto lr_image = bicubic_downsample(image, 4);  // 128 x 128
    const auto patch = lr_image.crop({0, 0, 64, 64});
    std::vector<ImageBuffer> frames;
    const bool all = a->protocol == "all";
    if (all || a->protocol == "video") {
      if (!a->frames.empty()) {
        const PngFrameDirectory dir(a->frames);
        for (std::size_t i = 0; i < dir.size(); ++i) frames.push_back(dir.frame(i));
      } else {
        for (int i = 0; i < 30; ++i) frames.push_back(bicubic_downsample(synthesize_sample(rng, 512), 4));
      }
    }
    const BenchOptions opts{.warmup_runs = a->warmup, .threads = a->threads};
    std::ofstream jsonl;
    if (!a->jsonl.empty()) jsonl.open(a->jsonl, std::ios::app);
    std::vector<BenchResult> results;
    const auto emit = [&](BenchResult r) {
      const auto line = to_json_line(r);
      std::cout << line << "\n";
      if (jsonl) jsonl << line << "\n";
      results.push_back(std::move(r));
    };
    for (const auto& up : ups) {
      if (all || a->protocol == "patch") emit(time_patch(*up, patch, a->runs, opts));
      if (all || a->protocol == "image") emit(time_whole_image(*up, lr_image, a->tile, a->runs, opts));
      if (all || a->protocol == "video") {
        emit(video_fps(*up, frames, parse_roi(a->roi), {.warmup_runs = a->warmup, .threads = 1}));
      }
    }
    std::cout << "\n" << format_table(results, hardware_fingerprint());
  };
}

// ---- serve ------------------------------------------------------------------

void add_serve(CLI::App& app, std::function<void()>& action) {
  auto a = std::make_shared<ServiceConfig>();
  auto dir = std::make_shared<fs::path>();
  auto* cmd = app.add_subcommand("serve", "Serve generators from a directory of weight files over HTTP");
  cmd->add_option("--models", *dir, "Directory of *.tsrw generator files (ids are file stems)")->required();
  cmd->add_option("--host", a->host, "Bind address")->capture_default_str();
  cmd->add_option("--port", a->port, "Port (0 picks a free one)")->capture_default_str();
  cmd->add_option("--max-body", a->max_body_bytes, "Request size limit in bytes")->capture_default_str();
  cmd->add_option("--threads", a->worker_threads, "Worker threads")->capture_default_str();
  cmd->add_option("--cors-origin", a->cors_origin, "Access-Control-Allow-Origin value")->capture_default_str();
  action = [a, dir] {
    auto registry = ModelRegistry::load_dir(*dir);
    if (registry.empty()) throw ModelFailure(dir->string() + ": no generator weight files");
    SrService service(std::move(registry), *a);
    const int port = service.start();
    std::cout << "listening on http://" << a->host << ":" << port << "\n" << std::flush;
    // Serve until the process is terminated.
    std::promise<void>().get_future().wait();
  };
}

// ---- eval -------------------------------------------------------------------

void add_eval(CLI::App& app, std::function<void()>& action) {
  struct Args {
    fs::path sr_dir, hr_dir;
    int period = 4;
  };
  auto a = std::make_shared<Args>();
  auto* cmd = app.add_subcommand("eval", "Quality report for every SR/HR pair with matching file names");
  cmd->add_option("--sr", a->sr_dir, "Directory of SR PNGs")->required();
  cmd->add_option("--hr", a->hr_dir, "Directory of HR PNGs")->required();
  cmd->add_option("--period", a->period, "Checkerboard period")->capture_default_str();
  action = [a] {
    std::vector<fs::path> names;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(a->sr_dir, ec)) {
      if (e.path().extension() == ".png") names.push_back(e.path().filename());
    }
    if (ec) throw ImageIoError(a->sr_dir.string(), ec.message());
    std::sort(names.begin(), names.end());
    int paired = 0;
    for (const auto& name : names) {
      if (!fs::exists(a->hr_dir / name)) continue;
      const auto report =
          evaluate(read_png(a->sr_dir / name), read_png(a->hr_dir / name), a->period, name.stem().string());
      std::cout << to_json_line(report) << "\n";
      ++paired;
    }
    if (paired == 0) throw ImageIoError(a->sr_dir.string(), "no file has a same-named HR counterpart");
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiled single-image super-resolution for fluorescence microscopy"};
  app.set_config("--config", "", "TOML/INI file with option defaults; command-line flags take precedence");
  app.require_subcommand(1);
  std::map<std::string, std::function<void()>> actions;
  add_train(app, actions["train"]);
  add_synth(app, actions["synth-data"]);
  add_sr(app, actions["sr"]);
  add_video(app, actions["video-roi"]);
  add_bench(app, actions["bench"]);
  add_serve(app, actions["serve"]);
  add_eval(app, actions["eval"]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    for (auto* sub : app.get_subcommands()) actions.at(sub->get_name())();
    return 0;
  } catch (const ModelFailure& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const WeightFileError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const InferError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const SpecError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const ImageIoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::out_of_range& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
