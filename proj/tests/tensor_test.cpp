#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "tsr/grad_check.hpp"
#include "tsr/ops.hpp"

namespace tsr {
namespace {

TensorD random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false, double lo = -1.0,
                      double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so kinked activations are differentiable.
TensorD off_kink_tensor(Shape shape, std::mt19937_64& rng) {
  auto t = random_tensor(std::move(shape), rng, true, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : t.mutable_data()) x = sign(rng) ? x : -x;
  return t;
}

// Direct correlation, one output value at a time.
std::vector<double> brute_conv2d(const TensorD& x, const TensorD& k, int stride, int pad) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const auto oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < oc; ++o)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                const auto iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.data()[((b * c + ch) * h + iy) * w + ix] * k.data()[((o * c + ch) * kh + i) * kw + j];
              }
          out.push_back(acc);
        }
  return out;
}

// Scatter-add of kernel-scaled input values, no padding.
std::vector<std::vector<double>> brute_scatter(std::int64_t h, std::int64_t w, std::int64_t k, std::int64_t stride) {
  const auto oh = (h - 1) * stride + k, ow = (w - 1) * stride + k;
  std::vector<std::vector<double>> out(oh, std::vector<double>(ow, 0.0));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t i = 0; i < k; ++i)
        for (std::int64_t j = 0; j < k; ++j) out[y * stride + i][x * stride + j] += 1.0;
  return out;
}

ConvParams<double> params(TensorD kernel, int stride = 1, int pad = 0, TensorD bias = {}) {
  return ConvParams<double>{std::move(kernel), std::move(bias), stride, pad, 0};
}

TEST(Conv2d, IdentityAndZeroKernels) {
  const TensorD x({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto id = conv2d(x, params(TensorD({1, 1, 1, 1}, {1}), 1, 0, TensorD({1}, {0})));
  EXPECT_EQ(std::vector<double>(id.data().begin(), id.data().end()), (std::vector<double>{1, 2, 3, 4}));
  const auto zero = conv2d(x, params(TensorD({1, 1, 1, 1}, {0}), 1, 0, TensorD({1}, {0})));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, AllOnesGivesWindowSums) {
  const auto out = conv2d(TensorD::full({1, 1, 3, 3}, 1.0), params(TensorD::full({1, 1, 2, 2}, 1.0)));
  EXPECT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  for (double v : out.data()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, MatchesDirectCorrelation) {
  std::mt19937_64 rng(7);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      const auto x = random_tensor({2, 3, 7, 6}, rng);
      const auto k = random_tensor({4, 3, 3, 3}, rng);
      const auto out = conv2d(x, params(k, stride, pad));
      const auto ref = brute_conv2d(x, k, stride, pad);
      ASSERT_EQ(out.numel(), static_cast<std::int64_t>(ref.size()));
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
    }
  }
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  const auto x = TensorD::zeros({1, 2, 4, 4});
  try {
    conv2d(x, params(TensorD::zeros({1, 3, 3, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "channels");
  }
  try {
    conv2d(TensorD::zeros({1, 1, 2, 8}), params(TensorD::zeros({1, 1, 3, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "height");
  }
}

TEST(ConvTranspose2d, UnevenOverlapWhenKernelNotDivisibleByStride) {
  const auto out = conv_transpose2d(TensorD::full({1, 1, 2, 2}, 1.0), params(TensorD::full({1, 1, 3, 3}, 1.0), 2));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 5, 5}));
  const auto ref = brute_scatter(2, 2, 3, 2);
  std::set<double> seen;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      EXPECT_EQ(out.data()[y * 5 + x], ref[y][x]);
      seen.insert(out.data()[y * 5 + x]);
    }
  EXPECT_EQ(seen, (std::set<double>{1, 2, 4}));
  EXPECT_EQ(out.data()[2 * 5 + 2], 4.0);  // the overlap site
}

TEST(ConvTranspose2d, UniformCoverageWhenDivisible) {
  const auto out = conv_transpose2d(TensorD::full({1, 1, 2, 2}, 1.0), params(TensorD::full({1, 1, 2, 2}, 1.0), 2));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 1.0);
}

TEST(ConvTranspose2d, IdentityKernel) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({1, 1, 4, 5}, rng);
  const auto out = conv_transpose2d(x, params(TensorD({1, 1, 1, 1}, {1})));
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(ConvTranspose2d, OutputPaddingAndErrors) {
  ConvParams<double> p{TensorD::full({1, 1, 3, 3}, 1.0), {}, 2, 1, 1};
  EXPECT_EQ(conv_transpose2d(TensorD::zeros({1, 1, 8, 8}), p).shape(), (Shape{1, 1, 16, 16}));
  p.padding = 3;
  p.output_padding = 0;
  EXPECT_THROW(conv_transpose2d(TensorD::zeros({1, 1, 4, 4}), p), std::invalid_argument);
}

TEST(ConvTranspose2d, CoverageIsConstantIffKernelDivisibleByStride) {
  for (int stride = 1; stride <= 3; ++stride) {
    for (int k = 1; k <= 6; ++k) {
      const auto out = conv_transpose2d(TensorD::full({1, 1, 10, 10}, 1.0), params(TensorD::full({1, 1, k, k}, 1.0), stride));
      const auto w = out.dim(3);
      // Interior: away from the partially covered border of width k.
      std::set<double> interior;
      for (std::int64_t y = k; y < w - k; ++y)
        for (std::int64_t x = k; x < w - k; ++x) interior.insert(out.data()[y * w + x]);
      ASSERT_FALSE(interior.empty());
      EXPECT_EQ(interior.size() == 1, k % stride == 0) << "k=" << k << " stride=" << stride;
    }
  }
}

TEST(ConvTranspose2d, AdjointOfConv2d) {
  std::mt19937_64 rng(11);
  for (int stride : {1, 2, 3}) {
    for (int pad : {0, 1}) {
      const auto x = random_tensor({2, 3, 9, 9}, rng);
      const auto k = random_tensor({4, 3, 3, 3}, rng);
      const auto cx = conv2d(x, params(k, stride, pad));
      const auto y = random_tensor(cx.shape(), rng);
      // The same weights read as inC x outC (4 conv outputs -> 3 image channels).
      const auto out_h = (cx.dim(2) - 1) * stride + 3 - 2 * pad;
      const ConvParams<double> tp{k, {}, stride, pad, static_cast<int>(9 - out_h)};
      const auto ty = conv_transpose2d(y, tp);
      ASSERT_EQ(ty.shape(), x.shape());
      double lhs = 0, rhs = 0;
      for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
      for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * ty.data()[i];
      EXPECT_NEAR(lhs, rhs, 1e-6 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST(PixelShuffle, Rearrangement) {
  const auto out = pixel_shuffle(TensorD({1, 4, 1, 1}, {1, 2, 3, 4}), 2);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3, 4}));

  std::mt19937_64 rng(5);
  const auto x = random_tensor({1, 4, 2, 2}, rng);
  const auto same = pixel_shuffle(x, 1);
  EXPECT_EQ(std::vector<double>(same.data().begin(), same.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
  EXPECT_THROW(pixel_shuffle(TensorD::zeros({1, 3, 2, 2}), 2), DimensionError);
}

TEST(PixelShuffle, InverseIndexingRestoresInputBitExact) {
  std::mt19937_64 rng(9);
  for (int r : {2, 3}) {
    const std::int64_t c = 2, h = 3, w = 4;
    const auto x = random_tensor({2, c * r * r, h, w}, rng);
    const auto y = pixel_shuffle(x, r);
    std::vector<double> back(static_cast<std::size_t>(x.numel()));
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t ch = 0; ch < c * r * r; ++ch)
        for (std::int64_t yy = 0; yy < h; ++yy)
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const auto oc = ch / (r * r), dy = (ch % (r * r)) / r, dx = ch % r;
            back[((n * c * r * r + ch) * h + yy) * w + xx] =
                y.data()[((n * c + oc) * h * r + yy * r + dy) * w * r + xx * r + dx];
          }
    EXPECT_EQ(back, std::vector<double>(x.data().begin(), x.data().end()));
  }
}

TEST(ResizeNearest, Examples) {
  const auto a = resize_nearest(TensorD({1, 1, 1, 1}, {5}), 2);
  EXPECT_EQ(a.shape(), (Shape{1, 1, 2, 2}));
  for (double v : a.data()) EXPECT_EQ(v, 5.0);

  const auto b = resize_nearest(TensorD({1, 1, 2, 1}, {1, 2}), 3);
  ASSERT_EQ(b.shape(), (Shape{1, 1, 6, 3}));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 3; ++x) EXPECT_EQ(b.data()[y * 3 + x], y < 3 ? 1.0 : 2.0);

  EXPECT_THROW(resize_nearest(TensorD::zeros({1, 1, 2, 2}), 0), std::invalid_argument);
}

TEST(ResizeNearest, PreservesChannelStatisticsExactly) {
  std::mt19937_64 rng(21);
  for (int r = 1; r <= 4; ++r) {
    const auto x = random_tensor({1, 3, 5, 7}, rng);
    const auto y = resize_nearest(x, r);
    for (int c = 0; c < 3; ++c) {
      const auto in = x.data().subspan(c * 35, 35);
      const auto out = y.data().subspan(c * 35 * r * r, 35 * r * r);
      EXPECT_EQ(*std::min_element(in.begin(), in.end()), *std::min_element(out.begin(), out.end()));
      EXPECT_EQ(*std::max_element(in.begin(), in.end()), *std::max_element(out.begin(), out.end()));
      // Each input value appears exactly r^2 times, so sums agree up to summation order.
      double si = 0, so = 0;
      for (double v : in) si += v * r * r;
      for (double v : out) so += v;
      EXPECT_NEAR(si / (35.0 * r * r), so / (35.0 * r * r), 1e-15);
    }
  }
}

TEST(ResizeBilinear, Examples) {
  const auto ramp = resize_bilinear(TensorD({1, 1, 1, 2}, {0, 1}), 2);
  ASSERT_EQ(ramp.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> expected{0, 0.25, 0.75, 1};
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(ramp.data()[i], expected[i]);
    EXPECT_DOUBLE_EQ(ramp.data()[4 + i], expected[i]);
  }
  for (int r : {1, 2, 3, 5}) {
    const auto c = resize_bilinear(TensorD::full({1, 2, 3, 4}, 0.37), r);
    for (double v : c.data()) EXPECT_EQ(v, 0.37);
  }
  std::mt19937_64 rng(4);
  const auto x = random_tensor({1, 1, 3, 3}, rng);
  const auto same = resize_bilinear(x, 1);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(same.data()[i], x.data()[i]);
}

TEST(BatchNorm, Examples) {
  auto rm = TensorD::zeros({1});
  auto rv = TensorD::full({1}, 1.0);
  const auto constant = batch_norm(TensorD::full({2, 1, 2, 2}, 3.0), TensorD({1}, {1}), TensorD({1}, {0}), rm, rv,
                                   BnMode::kTrain);
  for (double v : constant.data()) EXPECT_NEAR(v, 0.0, 1e-12);

  const auto affine = batch_norm(TensorD({2, 1, 1, 1}, {1, 3}), TensorD({1}, {0}), TensorD({1}, {7}), rm, rv,
                                 BnMode::kTrain);
  for (double v : affine.data()) EXPECT_EQ(v, 7.0);

  auto rm2 = TensorD::zeros({1});
  auto rv2 = TensorD::full({1}, 1.0);
  const auto pm = batch_norm(TensorD({2, 1, 1, 1}, {1, 3}), TensorD({1}, {1}), TensorD({1}, {0}), rm2, rv2,
                             BnMode::kTrain, 0.1, 1e-12);
  EXPECT_NEAR(pm.data()[0], -1.0, 1e-9);
  EXPECT_NEAR(pm.data()[1], 1.0, 1e-9);
  // EMA: mean 2, unbiased variance 2.
  EXPECT_NEAR(rm2.data()[0], 0.2, 1e-12);
  EXPECT_NEAR(rv2.data()[0], 0.9 + 0.2, 1e-12);

  const auto ev = batch_norm(TensorD({1, 1, 1, 1}, {2.2}), TensorD({1}, {2}), TensorD({1}, {1}), rm2, rv2,
                             BnMode::kEval);
  EXPECT_NEAR(ev.data()[0], 2.0 * (2.2 - 0.2) / std::sqrt(1.1 + 1e-5) + 1.0, 1e-12);
  EXPECT_THROW(batch_norm(TensorD::zeros({1, 1, 1, 1}), TensorD({1}, {1}), TensorD({1}, {0}), rm2, rv2,
                          BnMode::kTrain),
               DimensionError);
}

TEST(Activations, Examples) {
  const auto lr = leaky_relu(TensorD({2}, {-1, 2}), 0.2);
  EXPECT_DOUBLE_EQ(lr.data()[0], -0.2);
  EXPECT_DOUBLE_EQ(lr.data()[1], 2.0);
  EXPECT_DOUBLE_EQ(sigmoid(TensorD({1}, {0})).data()[0], 0.5);
  const auto th = tanh(TensorD({2}, {0, 40}));
  EXPECT_EQ(th.data()[0], 0.0);
  EXPECT_NEAR(th.data()[1], 1.0, 1e-15);
  const auto pr = prelu(TensorD({3}, {-2, 0, 3}), TensorD({1}, {0.25}));
  EXPECT_DOUBLE_EQ(pr.data()[0], -0.5);
  EXPECT_DOUBLE_EQ(pr.data()[2], 3.0);
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_DOUBLE_EQ(global_avg_pool(TensorD({1, 1, 2, 2}, {1, 2, 3, 4})).data()[0], 2.5);
  const auto two = global_avg_pool(TensorD({1, 2, 1, 3}, {1, 1, 1, 0, 3, 6}));
  EXPECT_EQ(two.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(two.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(two.data()[1], 3.0);
  for (std::int64_t s : {1, 3, 8, 17}) {
    const auto p = global_avg_pool(TensorD::full({2, 5, s, s + 1}, 0.75));
    EXPECT_EQ(p.shape(), (Shape{2, 5}));
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.75);
  }
}

TEST(Dense, Examples) {
  const TensorD x({2, 2}, {1, 2, 3, 4});
  const auto id = dense(x, TensorD({2, 2}, {1, 0, 0, 1}), TensorD::zeros({2}));
  EXPECT_EQ(std::vector<double>(id.data().begin(), id.data().end()), (std::vector<double>{1, 2, 3, 4}));
  const auto zb = dense(x, TensorD::zeros({2, 3}), TensorD({3}, {1, 2, 3}));
  EXPECT_EQ(std::vector<double>(zb.data().begin(), zb.data().end()), (std::vector<double>{1, 2, 3, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(dense(TensorD({1, 2}, {1, 2}), TensorD({2, 1}, {1, 1}), TensorD({1}, {0.5})).item(), 3.5);
  try {
    dense(x, TensorD::zeros({3, 1}), TensorD::zeros({1}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "inner");
  }
}

TEST(Backward, LinearAndQuadratic) {
  auto x = TensorD::full({2, 3}, 0.3, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto s = TensorD({1}, {3}, true);
  sum(mul(s, s)).backward();
  EXPECT_EQ(s.grad()[0], 6.0);
}

TEST(Backward, AccumulatesAcrossUsesAndCalls) {
  auto w = TensorD({1}, {2}, true);
  // w used twice in one graph: d(w + w)/dw = 2.
  sum(add(w, w)).backward();
  EXPECT_EQ(w.grad()[0], 2.0);
  sum(scale(w, 3.0)).backward();
  EXPECT_EQ(w.grad()[0], 5.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = TensorD::full({2}, 1.0, true);
  EXPECT_THROW(scale(x, 2.0).backward(), std::invalid_argument);
}

TEST(Backward, NoGradGuardSkipsGraph) {
  auto x = TensorD::full({2}, 1.0, true);
  NoGradGuard guard;
  EXPECT_FALSE(scale(x, 2.0).requires_grad());
}

TEST(GradCheck, CompositeConvActivationMean) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const auto x = random_tensor({2, 2, 5, 5}, rng, true);
    const auto k = random_tensor({3, 2, 3, 3}, rng, true);
    const auto b = random_tensor({3}, rng, true);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
          return mean(tanh(conv2d(in[0], ConvParams<double>{in[1], in[2], 1, 1, 0})));
        },
        {x, k, b});
    EXPECT_LT(err, 1e-5) << "seed " << seed;
  }
}

TEST(GradCheck, SpecThresholds) {
  std::mt19937_64 rng(42);
  const double conv_err = grad_check(
      [](const std::vector<TensorD>& in) { return conv2d(in[0], ConvParams<double>{in[1], in[2], 2, 1, 0}); },
      {random_tensor({2, 2, 6, 6}, rng, true), random_tensor({3, 2, 3, 3}, rng, true), random_tensor({3}, rng, true)});
  EXPECT_LT(conv_err, 1e-5);
  const double dense_err = grad_check(
      [](const std::vector<TensorD>& in) { return dense(in[0], in[1], in[2]); },
      {random_tensor({3, 4}, rng, true), random_tensor({4, 2}, rng, true), random_tensor({2}, rng, true)});
  EXPECT_LT(dense_err, 1e-6);
  const double tconv_err = grad_check(
      [](const std::vector<TensorD>& in) { return conv_transpose2d(in[0], ConvParams<double>{in[1], in[2], 2, 0, 0}); },
      {random_tensor({1, 2, 4, 4}, rng, true), random_tensor({2, 3, 3, 3}, rng, true), random_tensor({3}, rng, true)});
  EXPECT_LT(tconv_err, 1e-5);
}

TEST(GradCheck, ActivationsAwayFromKinks) {
  std::mt19937_64 rng(8);
  EXPECT_LT(grad_check([](const std::vector<TensorD>& in) { return leaky_relu(in[0], 0.2); },
                       {off_kink_tensor({2, 5}, rng)}),
            1e-5);
  EXPECT_LT(grad_check([](const std::vector<TensorD>& in) { return prelu(in[0], in[1]); },
                       {off_kink_tensor({2, 5}, rng), TensorD({1}, {0.25}, true)}),
            1e-5);
}

}  // namespace
}  // namespace tsr
