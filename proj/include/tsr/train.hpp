#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsr/data.hpp"
#include "tsr/models.hpp"

namespace tsr {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::int64_t iteration, const std::string& what)
      : std::runtime_error("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  std::int64_t iteration() const noexcept { return iteration_; }

 private:
  std::int64_t iteration_;
};

struct LossWeights {
  double pixel = 1.0;
  double content = 0.006;
  double adversarial = 1e-3;
};

struct LabelSmoothing {
  bool enabled = true;
  double real_lo = 0.8;
  double real_hi = 1.2;
  double fake_lo = 0.0;
  double fake_hi = 0.2;
};

struct TrainPlan {
  std::int64_t total_iterations = 200000;
  std::int64_t iterations_per_epoch = 1000;
  double lr_first_half = 1e-4;
  double lr_second_half = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  int batch_size = 16;
  LabelSmoothing smoothing;
  LossWeights weights;
  /// Pixel/content-only warm-up; unset means 20% of total_iterations.
  std::optional<std::int64_t> pretrain_iterations;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  std::int64_t pretrain() const;

  /// Scaled-down plan: 500 warm-up + 1500 adversarial iterations, batch 8.
  static TrainPlan desk();
};

/// Desk-scale networks: 32 channels, 4 residual blocks, 3x3 edge convs,
/// no BN, nearest-then-conv; discriminator ladder 16-16-32-32-64-64 with a
/// GAP head.
GeneratorSpec desk_generator_spec();
DiscriminatorSpec desk_discriminator_spec();

/// Two-step schedule: lr_first_half for iteration < total/2, else lr_second_half.
double learning_rate(std::int64_t iteration, const TrainPlan& plan);

enum class LabelKind { kReal, kFake };

/// Discriminator targets: uniform in the configured range, or exact 1/0 when
/// smoothing is off.
template <std::floating_point T>
std::vector<T> smooth_labels(int n, LabelKind kind, const TrainPlan& plan, std::mt19937_64& rng);

/// Fixed, seeded stand-in for a pretrained perceptual network: four 3x3
/// stride-2 convs (16, 32, 64, 64 channels) with leaky ReLU 0.2. Its weights
/// never receive gradients.
template <std::floating_point T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 0x7e57, int in_channels = 3);
  Tensor<T> features(const Tensor<T>& x) const;
  const Model<T>& weights() const noexcept { return net_; }

 private:
  Model<T> net_;
};

template <std::floating_point T>
Tensor<T> pixel_loss(const Tensor<T>& sr, const Tensor<T>& hr);

template <std::floating_point T>
Tensor<T> content_loss(const Tensor<T>& sr, const Tensor<T>& hr, const FeatureExtractor<T>& fx);

/// -mean(log d), d clamped to [1e-7, 1 - 1e-7].
template <std::floating_point T>
Tensor<T> generator_adversarial_loss(const Tensor<T>& d_out_on_sr);

/// Mean of BCE(d_real, real_labels) and BCE(d_fake, fake_labels).
template <std::floating_point T>
Tensor<T> discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake, std::span<const T> real_labels,
                             std::span<const T> fake_labels);

template <std::floating_point T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam step over every parameter. Parameters without a
/// gradient are treated as having a zero gradient.
template <std::floating_point T>
void adam_update(std::span<NamedTensor<T>> params, AdamState<T>& state, double lr, const TrainPlan& plan);

struct IterationRecord {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_content = 0.0;
  double g_pixel = 0.0;
  double wall_ms = 0.0;
};

struct ValidationRecord {
  std::int64_t iteration = 0;  // iterations completed when measured
  double psnr = 0.0;
  double ssim = 0.0;
  double checkerboard_index = 0.0;
};

std::string to_json_line(const IterationRecord& record);
std::string to_json_line(const ValidationRecord& record);

struct TrainDataset {
  std::vector<TrainingPair> train;
  std::vector<TrainingPair> validation;
};

/// Synthesizes `count` images of hr_size and cuts them into (LR, HR) pairs.
std::vector<TrainingPair> synthetic_pairs(int count, int hr_size, int scale, std::uint64_t seed);

struct TrainOptions {
  /// Generator and discriminator checkpoints per epoch; empty disables them.
  std::filesystem::path checkpoint_dir;
  /// Receives one JSON line per iteration.
  std::ostream* metric_log = nullptr;
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const ValidationRecord&)> on_validation;
};

struct TrainResult {
  std::vector<IterationRecord> log;
  /// First entry is measured before any update.
  std::vector<ValidationRecord> validation;
  std::vector<std::filesystem::path> checkpoints;
};

/// Mean PSNR/SSIM/checkerboard index (period 4) of the generator over pairs.
ValidationRecord validate_generator(const ModelF& generator, const std::vector<TrainingPair>& pairs);

/// Warm-up on pixel + content loss, then one discriminator step and one
/// generator step per iteration. Throws TrainingError on a non-finite loss.
TrainResult run_training(ModelF& generator, ModelF& discriminator, const TrainPlan& plan, const TrainDataset& data,
                         const TrainOptions& options = {});

}  // namespace tsr
