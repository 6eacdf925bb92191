#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "tsr/grad_check.hpp"
#include "tsr/ops.hpp"
#include "tsr/train.hpp"
#include "tsr/weights.hpp"

namespace tsr {
namespace {

namespace fs = std::filesystem;

TensorD random_tensor(Shape shape, std::uint64_t seed, double lo, double hi, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return TensorD(std::move(shape), std::move(v), grad);
}

TEST(LabelSmoothingTest, RangesAndMeans) {
  TrainPlan plan;
  std::mt19937_64 rng(1);
  const auto real = smooth_labels<double>(10000, LabelKind::kReal, plan, rng);
  const auto fake = smooth_labels<double>(10000, LabelKind::kFake, plan, rng);
  double real_sum = 0, fake_sum = 0;
  for (double v : real) {
    ASSERT_GE(v, 0.8);
    ASSERT_LE(v, 1.2);
    real_sum += v;
  }
  for (double v : fake) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 0.2);
    fake_sum += v;
  }
  EXPECT_NEAR(real_sum / 1e4, 1.0, 0.02);
  EXPECT_NEAR(fake_sum / 1e4, 0.1, 0.02);
}

TEST(LabelSmoothingTest, DisabledGivesHardLabels) {
  TrainPlan plan;
  plan.smoothing.enabled = false;
  std::mt19937_64 rng(1);
  EXPECT_EQ(smooth_labels<float>(4, LabelKind::kReal, plan, rng), std::vector<float>(4, 1.0f));
  EXPECT_EQ(smooth_labels<float>(4, LabelKind::kFake, plan, rng), std::vector<float>(4, 0.0f));
  EXPECT_THROW(smooth_labels<float>(0, LabelKind::kReal, plan, rng), std::invalid_argument);
}

TEST(LearningRateTest, TwoStepAtBoundaries) {
  TrainPlan plan;
  plan.total_iterations = 200000;
  EXPECT_EQ(learning_rate(0, plan), 1e-4);
  EXPECT_EQ(learning_rate(99999, plan), 1e-4);
  EXPECT_EQ(learning_rate(100000, plan), 1e-5);
  EXPECT_EQ(learning_rate(199999, plan), 1e-5);
  EXPECT_THROW(learning_rate(200000, plan), std::out_of_range);
  EXPECT_THROW(learning_rate(-1, plan), std::out_of_range);
}

TEST(LearningRateTest, OnlyTwoValuesForOddTotals) {
  for (std::int64_t total : {1, 2, 7, 2001}) {
    TrainPlan plan;
    plan.total_iterations = total;
    for (std::int64_t it = 0; it < total; ++it) {
      const double lr = learning_rate(it, plan);
      ASSERT_TRUE(lr == plan.lr_first_half || lr == plan.lr_second_half);
      ASSERT_EQ(lr == plan.lr_first_half, it < total / 2);
    }
  }
}

TEST(TrainPlanTest, Validation) {
  TrainPlan plan;
  EXPECT_NO_THROW(plan.validate());
  EXPECT_EQ(plan.pretrain(), 40000);
  auto bad = plan;
  bad.smoothing.real_lo = 1.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = plan;
  bad.weights = {0, 0, 0};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = plan;
  bad.weights.content = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = plan;
  bad.pretrain_iterations = plan.total_iterations + 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  const auto desk = TrainPlan::desk();
  EXPECT_EQ(desk.total_iterations - desk.pretrain(), 1500);
  EXPECT_EQ(desk.pretrain(), 500);
  EXPECT_EQ(desk.batch_size, 8);
}

TEST(PixelLossTest, Examples) {
  const TensorD a({2}, {0.0, 1.0});
  const TensorD b({2}, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(pixel_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(pixel_loss(TensorD::zeros({3}), TensorD::full({3}, 1.0)).item(), 1.0);
  EXPECT_DOUBLE_EQ(pixel_loss(a, b).item(), 0.5);
}

TEST(ContentLossTest, IdenticalIsZeroOtherwisePositive) {
  const FeatureExtractor<double> fx;
  const auto a = random_tensor({2, 3, 16, 16}, 1, -1, 1, false);
  const auto b = random_tensor({2, 3, 16, 16}, 2, -1, 1, false);
  EXPECT_EQ(content_loss(a, a, fx).item(), 0.0);
  for (std::uint64_t seed = 3; seed < 8; ++seed) {
    EXPECT_GT(content_loss(a, random_tensor({2, 3, 16, 16}, seed, -1, 1, false), fx).item(), 0.0);
  }
  EXPECT_GE(content_loss(a, b, fx).item(), 0.0);
}

TEST(ContentLossTest, ExtractorWeightsAreFixed) {
  const FeatureExtractor<double> fx;
  for (const auto& p : fx.weights().parameters()) EXPECT_FALSE(p.value.requires_grad()) << p.name;
  const FeatureExtractor<double> same;
  EXPECT_EQ(fx.weights().parameters()[0].value.data()[0], same.weights().parameters()[0].value.data()[0]);
  EXPECT_EQ(fx.features(TensorD::zeros({1, 3, 16, 16})).shape(), (Shape{1, 64, 1, 1}));
}

TEST(AdversarialLossTest, Examples) {
  EXPECT_NEAR(generator_adversarial_loss(TensorD::full({4, 1}, 0.5)).item(), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(generator_adversarial_loss(TensorD::full({4, 1}, 1.0 - 1e-7)).item(), 0.0, 1e-6);
  // Clamped at 1e-7: -log(1e-7).
  EXPECT_NEAR(generator_adversarial_loss(TensorD::full({2, 1}, 0.0)).item(), -std::log(1e-7), 1e-6);
}

TEST(DiscriminatorLossTest, Examples) {
  const std::vector<double> ones(4, 1.0), zeros(4, 0.0);
  const auto half = TensorD::full({4, 1}, 0.5);
  EXPECT_NEAR(discriminator_loss(half, half, std::span<const double>(ones), std::span<const double>(zeros)).item(),
              std::numbers::ln2, 1e-12);
  const auto perfect =
      discriminator_loss(TensorD::full({4, 1}, 1.0), TensorD::full({4, 1}, 0.0), std::span<const double>(ones),
                         std::span<const double>(zeros));
  EXPECT_NEAR(perfect.item(), 0.0, 1e-6);
  const std::vector<double> soft(4, 0.9);
  const auto smoothed = discriminator_loss(TensorD::full({4, 1}, 1.0), TensorD::full({4, 1}, 0.0),
                                           std::span<const double>(soft), std::span<const double>(zeros));
  EXPECT_GT(smoothed.item(), 0.0);
  // Real term: -(0.9 log(1 - 1e-7) + 0.1 log(1e-7)); fake term ~0; averaged.
  const double expect = 0.5 * (-(0.9 * std::log1p(-1e-7) + 0.1 * std::log(1e-7)) - std::log1p(-1e-7));
  EXPECT_NEAR(smoothed.item(), expect, 1e-9);
}

TEST(DiscriminatorLossTest, NonNegativeForTargetsInUnitRange) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> p(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> real(3), fake(3);
    for (auto& v : real) v = p(rng);
    for (auto& v : fake) v = p(rng);
    const auto dr = random_tensor({3, 1}, static_cast<std::uint64_t>(trial), 0.0, 1.0, false);
    const auto df = random_tensor({3, 1}, static_cast<std::uint64_t>(trial) + 999, 0.0, 1.0, false);
    ASSERT_GE(discriminator_loss(dr, df, std::span<const double>(real), std::span<const double>(fake)).item(), 0.0);
    ASSERT_GE(generator_adversarial_loss(dr).item(), 0.0);
  }
}

TEST(DiscriminatorLossTest, RealTargetAboveOneIsUsedRaw) {
  // With target 1.2 the (1 - t) log(1 - p) term has a negative weight, so
  // the loss dips below zero as p approaches 1.
  const std::vector<double> t(1, 1.2), zero(1, 0.0);
  const double p = 0.999;
  const auto loss = discriminator_loss(TensorD::full({1, 1}, p), TensorD::full({1, 1}, 0.0),
                                       std::span<const double>(t), std::span<const double>(zero));
  const double expect = 0.5 * (-(1.2 * std::log(p) + (1 - 1.2) * std::log(1 - p)) - std::log1p(-1e-7));
  EXPECT_NEAR(loss.item(), expect, 1e-9);
  EXPECT_LT(loss.item(), 0.0);
}

TEST(LossGradientTest, EveryLossMatchesFiniteDifferences) {
  const FeatureExtractor<double> fx;
  const auto hr = random_tensor({1, 3, 16, 16}, 11, -1, 1, false);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto sr = random_tensor({1, 3, 16, 16}, 100 + seed, -1, 1);
    // Small tensor keeps per-element gradients well above rounding noise.
    const auto small_hr = random_tensor({1, 3, 4, 4}, 12, -1, 1, false);
    const auto small_sr = random_tensor({1, 3, 4, 4}, 400 + seed, -1, 1);
    EXPECT_LT(grad_check([&](const std::vector<TensorD>& in) { return pixel_loss(in[0], small_hr); }, {small_sr}),
              1e-5);
    EXPECT_LT(grad_check([&](const std::vector<TensorD>& in) { return content_loss(in[0], hr, fx); }, {sr}), 1e-5);
    const auto d = random_tensor({4, 1}, 200 + seed, 0.05, 0.95);
    EXPECT_LT(grad_check([&](const std::vector<TensorD>& in) { return generator_adversarial_loss(in[0]); }, {d}), 1e-5);
    const std::vector<double> real{0.85, 1.1, 0.9, 1.19}, fake{0.0, 0.1, 0.05, 0.2};
    const auto d2 = random_tensor({4, 1}, 300 + seed, 0.05, 0.95);
    EXPECT_LT(grad_check(
                  [&](const std::vector<TensorD>& in) {
                    return discriminator_loss(in[0], in[1], std::span<const double>(real),
                                              std::span<const double>(fake));
                  },
                  {d, d2}),
              1e-5);
  }
}

TEST(AdamTest, ZeroGradientLeavesParametersAndCountsStep) {
  TrainPlan plan;
  std::vector<NamedTensor<double>> params{{"w", TensorD({3}, {1.0, -2.0, 3.0}, true)}};
  params[0].value.mutable_grad();  // allocated, all zero
  AdamState<double> state;
  adam_update(std::span<NamedTensor<double>>(params), state, 1e-3, plan);
  EXPECT_EQ(state.step, 1);
  EXPECT_EQ(std::vector<double>(params[0].value.data().begin(), params[0].value.data().end()),
            (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  TrainPlan plan;
  for (double g : {0.3, -5.0, 1e-2}) {
    std::vector<NamedTensor<double>> params{{"w", TensorD({1}, {2.0}, true)}};
    params[0].value.mutable_grad()[0] = g;
    AdamState<double> state;
    adam_update(std::span<NamedTensor<double>>(params), state, 1e-4, plan);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    EXPECT_NEAR(params[0].value.item(), 2.0 - 1e-4 * g / (std::abs(g) + 1e-8), 1e-15);
  }
}

TEST(AdamTest, TwoStepsMatchClosedForm) {
  TrainPlan plan;
  std::vector<NamedTensor<double>> params{{"w", TensorD({1}, {0.0}, true)}};
  AdamState<double> state;
  const double g1 = 0.5, g2 = -0.25, lr = 0.01;
  double w = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    params[0].value.zero_grad();
    params[0].value.mutable_grad()[0] = g;
    adam_update(std::span<NamedTensor<double>>(params), state, lr, plan);
    m = 0.9 * m + 0.1 * g;
    v = 0.99 * v + 0.01 * g * g;
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-8);
  }
  EXPECT_NEAR(params[0].value.item(), w, 1e-15);
}

GeneratorSpec tiny_generator() {
  GeneratorSpec s;
  s.base_channels = 4;
  s.n_res_blocks = 1;
  s.edge_kernel = 3;
  return s;
}

DiscriminatorSpec tiny_discriminator() {
  DiscriminatorSpec s;
  s.conv_block_channels = {4, 4, 8, 8};
  return s;
}

TrainDataset tiny_dataset() {
  TrainDataset data;
  data.train = synthetic_pairs(6, 64, 4, 5);
  data.validation = synthetic_pairs(2, 64, 4, 6);
  return data;
}

TrainPlan tiny_plan(std::int64_t total, std::int64_t pretrain) {
  TrainPlan plan;
  plan.total_iterations = total;
  plan.pretrain_iterations = pretrain;
  plan.iterations_per_epoch = 2;
  plan.batch_size = 2;
  plan.seed = 9;
  return plan;
}

std::vector<float> flatten_params(const ModelF& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

TEST(RunTrainingTest, IdenticalSeedsGiveIdenticalLogs) {
  const auto data = tiny_dataset();
  std::vector<IterationRecord> logs[2];
  std::vector<float> params[2];
  for (int run = 0; run < 2; ++run) {
    auto g = build_generator<float>(tiny_generator(), 1);
    auto d = build_discriminator<float>(tiny_discriminator(), 2);
    logs[run] = run_training(g, d, tiny_plan(4, 1), data).log;
    params[run] = flatten_params(g);
  }
  ASSERT_EQ(logs[0].size(), 4u);
  for (std::size_t i = 0; i < logs[0].size(); ++i) {
    EXPECT_EQ(logs[0][i].d_loss, logs[1][i].d_loss);
    EXPECT_EQ(logs[0][i].g_adv, logs[1][i].g_adv);
    EXPECT_EQ(logs[0][i].g_pixel, logs[1][i].g_pixel);
    EXPECT_EQ(logs[0][i].g_content, logs[1][i].g_content);
  }
  EXPECT_EQ(params[0], params[1]);
}

TEST(RunTrainingTest, PretrainOnlyLeavesDiscriminatorUntouched) {
  const auto data = tiny_dataset();
  auto g = build_generator<float>(tiny_generator(), 1);
  auto d = build_discriminator<float>(tiny_discriminator(), 2);
  const auto d_before = flatten_params(d);
  const auto g_before = flatten_params(g);
  const auto result = run_training(g, d, tiny_plan(3, 3), data);
  EXPECT_EQ(flatten_params(d), d_before);
  EXPECT_NE(flatten_params(g), g_before);
  for (const auto& r : result.log) {
    EXPECT_EQ(r.d_loss, 0.0);
    EXPECT_EQ(r.g_adv, 0.0);
  }
}

TEST(RunTrainingTest, AdversarialPhaseUpdatesDiscriminator) {
  const auto data = tiny_dataset();
  auto g = build_generator<float>(tiny_generator(), 1);
  auto d = build_discriminator<float>(tiny_discriminator(), 2);
  const auto d_before = flatten_params(d);
  const auto result = run_training(g, d, tiny_plan(3, 1), data);
  EXPECT_NE(flatten_params(d), d_before);
  EXPECT_EQ(result.log[0].d_loss, 0.0);
  EXPECT_GT(result.log[1].d_loss, 0.0);
  EXPECT_GT(result.log[2].g_adv, 0.0);
}

TEST(RunTrainingTest, LogsValidationAndCheckpoints) {
  const auto dir = fs::temp_directory_path() / "tsr_train_test_ckpt";
  fs::remove_all(dir);
  const auto data = tiny_dataset();
  auto g = build_generator<float>(tiny_generator(), 1);
  auto d = build_discriminator<float>(tiny_discriminator(), 2);
  std::ostringstream log;
  TrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.metric_log = &log;
  const auto result = run_training(g, d, tiny_plan(4, 1), data, opts);

  // Before training, then after each 2-iteration epoch.
  ASSERT_EQ(result.validation.size(), 3u);
  EXPECT_EQ(result.validation[0].iteration, 0);
  EXPECT_EQ(result.validation[2].iteration, 4);
  EXPECT_GT(result.validation[2].psnr, 0.0);

  std::istringstream lines(log.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"iteration", "lr", "d_loss", "g_adv", "g_content", "g_pixel", "wall_ms"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["iteration"].get<int>(), count);
    ++count;
  }
  EXPECT_EQ(count, 4);

  ASSERT_EQ(result.checkpoints.size(), 4u);
  const auto reloaded = load_weights(result.checkpoints[2]);
  EXPECT_EQ(flatten_params(reloaded), flatten_params(g));
  fs::remove_all(dir);
}

TEST(RunTrainingTest, NonFiniteLossNamesIteration) {
  const auto data = tiny_dataset();
  auto g = build_generator<float>(tiny_generator(), 1);
  auto d = build_discriminator<float>(tiny_discriminator(), 2);
  g.parameters()[0].value.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    run_training(g, d, tiny_plan(3, 1), data);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.iteration(), 0);
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
  }
}

TEST(RunTrainingTest, RejectsWrongModelsAndEmptyData) {
  auto g = build_generator<float>(tiny_generator(), 1);
  auto d = build_discriminator<float>(tiny_discriminator(), 2);
  EXPECT_THROW(run_training(d, g, tiny_plan(1, 0), tiny_dataset()), std::invalid_argument);
  EXPECT_THROW(run_training(g, d, tiny_plan(1, 0), TrainDataset{}), std::invalid_argument);
}

}  // namespace
}  // namespace tsr
