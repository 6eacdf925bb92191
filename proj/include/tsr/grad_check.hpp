#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tsr/tensor.hpp"

namespace tsr {

using DifferentiableFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Compares reverse-mode gradients against central finite differences.
///
/// The op output is reduced to a scalar through a fixed random projection
/// (seeded), so every output element contributes. Every input with
/// requires_grad set is checked element by element. Returns
///   max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Callers keep sample points away from kinks (e.g. 0 for leaky_relu).
double grad_check(const DifferentiableFn& op, const std::vector<TensorD>& inputs, double step = 1e-5,
                  std::uint64_t projection_seed = 0x5eed);

}  // namespace tsr
