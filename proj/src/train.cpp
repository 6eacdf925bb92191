#include "tsr/train.hpp"

#include <chrono>
#include <cmath>

#include "json.hpp"
#include "tsr/metrics.hpp"
#include "tsr/ops.hpp"
#include "tsr/weights.hpp"

namespace tsr {

void TrainPlan::validate() const {
  if (total_iterations < 1) throw std::invalid_argument("total_iterations must be >= 1");
  if (iterations_per_epoch < 1) throw std::invalid_argument("iterations_per_epoch must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr_first_half > 0) || !(lr_second_half > 0)) throw std::invalid_argument("learning rates must be positive");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw std::invalid_argument("Adam betas must be in [0, 1)");
  }
  if (smoothing.real_lo > smoothing.real_hi || smoothing.fake_lo > smoothing.fake_hi) {
    throw std::invalid_argument("label smoothing ranges must satisfy low <= high");
  }
  if (weights.pixel < 0 || weights.content < 0 || weights.adversarial < 0) {
    throw std::invalid_argument("loss weights must be >= 0");
  }
  if (weights.pixel == 0 && weights.content == 0 && weights.adversarial == 0) {
    throw std::invalid_argument("at least one loss weight must be positive");
  }
  const auto p = pretrain();
  if (p < 0 || p > total_iterations) throw std::invalid_argument("pretrain_iterations must be in [0, total_iterations]");
}

std::int64_t TrainPlan::pretrain() const { return pretrain_iterations.value_or(total_iterations / 5); }

TrainPlan TrainPlan::desk() {
  TrainPlan plan;
  plan.total_iterations = 2000;
  plan.pretrain_iterations = 500;
  plan.iterations_per_epoch = 500;
  plan.batch_size = 8;
  return plan;
}

GeneratorSpec desk_generator_spec() {
  GeneratorSpec spec;
  spec.base_channels = 32;
  spec.n_res_blocks = 4;
  spec.edge_kernel = 3;
  spec.use_bn = false;
  spec.upsampler = Upsampler::kNearestThenConv;
  return spec;
}

DiscriminatorSpec desk_discriminator_spec() {
  DiscriminatorSpec spec;
  spec.conv_block_channels = {16, 16, 32, 32, 64, 64};
  spec.head = DiscriminatorHead::kGap;
  return spec;
}

double learning_rate(std::int64_t iteration, const TrainPlan& plan) {
  if (iteration < 0 || iteration >= plan.total_iterations) {
    throw std::out_of_range("iteration " + std::to_string(iteration) + " outside [0, " +
                            std::to_string(plan.total_iterations) + ")");
  }
  return iteration < plan.total_iterations / 2 ? plan.lr_first_half : plan.lr_second_half;
}

template <std::floating_point T>
std::vector<T> smooth_labels(int n, LabelKind kind, const TrainPlan& plan, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("smooth_labels: n must be >= 1");
  const bool real = kind == LabelKind::kReal;
  if (!plan.smoothing.enabled) return std::vector<T>(static_cast<std::size_t>(n), real ? T(1) : T(0));
  std::uniform_real_distribution<double> dist(real ? plan.smoothing.real_lo : plan.smoothing.fake_lo,
                                              real ? plan.smoothing.real_hi : plan.smoothing.fake_hi);
  std::vector<T> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

template <std::floating_point T>
FeatureExtractor<T>::FeatureExtractor(std::uint64_t seed, int in_channels) {
  std::mt19937_64 rng(seed);
  const std::int64_t widths[] = {16, 32, 64, 64};
  std::int64_t in = in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t out = widths[i];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * 9)));
    std::vector<T> w(static_cast<std::size_t>(out * in * 9));
    for (auto& x : w) x = static_cast<T>(dist(rng));
    net_.add_parameter("fx" + std::to_string(i) + ".weight", Tensor<T>({out, in, 3, 3}, std::move(w)));
    net_.add_parameter("fx" + std::to_string(i) + ".bias", Tensor<T>::zeros({out}));
    in = out;
  }
}

template <std::floating_point T>
Tensor<T> FeatureExtractor<T>::features(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (int i = 0; i < 4; ++i) {
    const auto prefix = "fx" + std::to_string(i);
    h = leaky_relu(conv2d(h, ConvParams<T>{net_.parameter(prefix + ".weight"), net_.parameter(prefix + ".bias"), 2, 1, 0}),
                   0.2);
  }
  return h;
}

template <std::floating_point T>
Tensor<T> pixel_loss(const Tensor<T>& sr, const Tensor<T>& hr) {
  return mse_loss(sr, hr);
}

template <std::floating_point T>
Tensor<T> content_loss(const Tensor<T>& sr, const Tensor<T>& hr, const FeatureExtractor<T>& fx) {
  return mse_loss(fx.features(sr), fx.features(hr));
}

template <std::floating_point T>
Tensor<T> generator_adversarial_loss(const Tensor<T>& d_out_on_sr) {
  const std::vector<T> ones(static_cast<std::size_t>(d_out_on_sr.numel()), T(1));
  return binary_cross_entropy(d_out_on_sr, std::span<const T>(ones));
}

template <std::floating_point T>
Tensor<T> discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake, std::span<const T> real_labels,
                             std::span<const T> fake_labels) {
  return scale(add(binary_cross_entropy(d_real, real_labels), binary_cross_entropy(d_fake, fake_labels)), 0.5);
}

template <std::floating_point T>
void adam_update(std::span<NamedTensor<T>> params, AdamState<T>& state, double lr, const TrainPlan& plan) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
      state.v.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("Adam state does not match the parameter list");
  ++state.step;
  const double b1 = plan.adam_beta1, b2 = plan.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != static_cast<std::size_t>(p.numel())) throw std::invalid_argument("Adam state shape mismatch");
    const bool has_grad = p.has_grad();
    const auto g = has_grad ? p.grad() : std::span<const T>{};
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double gk = has_grad ? static_cast<double>(g[k]) : 0.0;
      m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * gk);
      v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * gk * gk);
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + plan.adam_eps));
    }
  }
}

std::string to_json_line(const IterationRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["lr"] = r.lr;
  j["d_loss"] = r.d_loss;
  j["g_adv"] = r.g_adv;
  j["g_content"] = r.g_content;
  j["g_pixel"] = r.g_pixel;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

std::string to_json_line(const ValidationRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["psnr"] = r.psnr;
  j["ssim"] = r.ssim;
  j["checkerboard_index"] = r.checkerboard_index;
  return j.dump();
}

std::vector<TrainingPair> synthetic_pairs(int count, int hr_size, int scale, std::uint64_t seed) {
  std::vector<TrainingPair> pairs;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    auto tiles = make_training_pairs(synthesize_sample(rng, hr_size), hr_size, scale);
    for (auto& t : tiles) pairs.push_back(std::move(t));
  }
  return pairs;
}

ValidationRecord validate_generator(const ModelF& generator, const std::vector<TrainingPair>& pairs) {
  ValidationRecord rec;
  if (pairs.empty()) return rec;
  for (const auto& p : pairs) {
    const auto lr = images_to_generator_input(std::span<const ImageBuffer>(&p.lr, 1));
    const auto sr = model_domain_to_image(generator.infer(lr), 0);
    rec.psnr += psnr(sr, p.hr);
    rec.ssim += ssim(sr, p.hr);
    rec.checkerboard_index += checkerboard_index(sr, 4);
  }
  const double n = static_cast<double>(pairs.size());
  rec.psnr /= n;
  rec.ssim /= n;
  rec.checkerboard_index /= n;
  return rec;
}

namespace {

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(int batch) {
    std::vector<std::size_t> out;
    for (int i = 0; i < batch; ++i) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

void require_finite(double value, const char* name, std::int64_t iteration) {
  if (!std::isfinite(value)) throw TrainingError(iteration, std::string("non-finite ") + name + " loss");
}

}  // namespace

TrainResult run_training(ModelF& generator, ModelF& discriminator, const TrainPlan& plan, const TrainDataset& data,
                         const TrainOptions& options) {
  plan.validate();
  if (data.train.empty()) throw std::invalid_argument("training set is empty");
  if (!std::holds_alternative<GeneratorSpec>(generator.spec())) throw std::invalid_argument("generator model expected");
  if (!std::holds_alternative<DiscriminatorSpec>(discriminator.spec())) {
    throw std::invalid_argument("discriminator model expected");
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  const FeatureExtractor<float> fx;
  AdamState<float> g_state, d_state;
  BatchSampler sampler(data.train.size(), plan.seed);
  std::mt19937_64 label_rng(plan.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto& w = plan.weights;
  TrainResult result;

  auto record_validation = [&](std::int64_t done) {
    if (data.validation.empty()) return;
    auto v = validate_generator(generator, data.validation);
    v.iteration = done;
    if (options.on_validation) options.on_validation(v);
    result.validation.push_back(v);
  };
  record_validation(0);

  std::vector<ImageBuffer> lr_batch, hr_batch;
  for (std::int64_t it = 0; it < plan.total_iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.iteration = it;
    rec.lr = learning_rate(it, plan);

    lr_batch.clear();
    hr_batch.clear();
    for (auto idx : sampler.next(plan.batch_size)) {
      lr_batch.push_back(data.train[idx].lr);
      hr_batch.push_back(data.train[idx].hr);
    }
    const auto lr_t = images_to_generator_input(lr_batch);
    const auto hr_t = images_to_model_domain(hr_batch);

    const auto sr = generator.forward(lr_t, Phase::kTrain);
    const bool adversarial = it >= plan.pretrain();

    if (adversarial) {
      const auto real_labels = smooth_labels<float>(plan.batch_size, LabelKind::kReal, plan, label_rng);
      const auto fake_labels = smooth_labels<float>(plan.batch_size, LabelKind::kFake, plan, label_rng);
      const auto d_real = discriminator.forward(hr_t, Phase::kTrain);
      const auto d_fake = discriminator.forward(sr.detach(), Phase::kTrain);
      auto d_loss = discriminator_loss(d_real, d_fake, std::span<const float>(real_labels),
                                       std::span<const float>(fake_labels));
      rec.d_loss = d_loss.item();
      require_finite(rec.d_loss, "discriminator", it);
      discriminator.zero_grad();
      d_loss.backward();
      adam_update(discriminator.parameters(), d_state, rec.lr, plan);
    }

    auto pix = pixel_loss(sr, hr_t);
    auto con = content_loss(sr, hr_t, fx);
    rec.g_pixel = pix.item();
    rec.g_content = con.item();
    require_finite(rec.g_pixel, "pixel", it);
    require_finite(rec.g_content, "content", it);
    auto total = add(scale(pix, w.pixel), scale(con, w.content));
    if (adversarial) {
      auto adv = generator_adversarial_loss(discriminator.forward(sr, Phase::kTrain));
      rec.g_adv = adv.item();
      require_finite(rec.g_adv, "adversarial", it);
      total = add(total, scale(adv, w.adversarial));
    }
    generator.zero_grad();
    total.backward();
    adam_update(generator.parameters(), g_state, rec.lr, plan);

    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (options.metric_log) *options.metric_log << to_json_line(rec) << '\n';
    if (options.on_iteration) options.on_iteration(rec);
    result.log.push_back(rec);

    const std::int64_t done = it + 1;
    if (done % plan.iterations_per_epoch == 0 || done == plan.total_iterations) {
      record_validation(done);
      if (!options.checkpoint_dir.empty()) {
        const auto epoch = std::to_string((done + plan.iterations_per_epoch - 1) / plan.iterations_per_epoch);
        const auto g_path = options.checkpoint_dir / ("generator_e" + epoch + ".tsrw");
        const auto d_path = options.checkpoint_dir / ("discriminator_e" + epoch + ".tsrw");
        save_weights(generator, g_path);
        save_weights(discriminator, d_path);
        result.checkpoints.push_back(g_path);
        result.checkpoints.push_back(d_path);
      }
    }
  }
  if (options.metric_log) options.metric_log->flush();
  return result;
}

#define TSR_INSTANTIATE_TRAIN(T)                                                                                   \
  template std::vector<T> smooth_labels<T>(int, LabelKind, const TrainPlan&, std::mt19937_64&);                    \
  template class FeatureExtractor<T>;                                                                              \
  template Tensor<T> pixel_loss<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> content_loss<T>(const Tensor<T>&, const Tensor<T>&, const FeatureExtractor<T>&);              \
  template Tensor<T> generator_adversarial_loss<T>(const Tensor<T>&);                                              \
  template Tensor<T> discriminator_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,                 \
                                           std::span<const T>);                                                    \
  template void adam_update<T>(std::span<NamedTensor<T>>, AdamState<T>&, double, const TrainPlan&);

TSR_INSTANTIATE_TRAIN(float)
TSR_INSTANTIATE_TRAIN(double)

}  // namespace tsr
