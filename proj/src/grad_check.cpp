#include "tsr/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "tsr/ops.hpp"

namespace tsr {

namespace {

double projected(const TensorD& out, const std::vector<double>& weights) {
  const auto d = out.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * weights[i];
  return acc;
}

}  // namespace

double grad_check(const DifferentiableFn& op, const std::vector<TensorD>& inputs, double step,
                  std::uint64_t projection_seed) {
  // Fresh leaves so callers' tensors keep their own gradient state.
  std::vector<TensorD> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto copy = in.detach();
    copy.set_requires_grad(in.requires_grad());
    leaves.push_back(std::move(copy));
  }

  const TensorD probe = [&] {
    NoGradGuard no_grad;
    return op(leaves);
  }();
  std::mt19937_64 rng(projection_seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::vector<double> weights(static_cast<std::size_t>(probe.numel()));
  for (auto& w : weights) w = uniform(rng);

  const TensorD out = op(leaves);
  const TensorD loss = sum(mul(out, TensorD(out.shape(), weights)));
  loss.backward();

  double worst = 0.0;
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    std::vector<double> analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                                   : std::vector<double>(static_cast<std::size_t>(leaf.numel()), 0.0);
    auto values = leaf.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double plus = projected(op(leaves), weights);
      values[i] = original - step;
      const double minus = projected(op(leaves), weights);
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace tsr
