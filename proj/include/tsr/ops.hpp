#pragma once

#include <cstdint>

#include "tsr/tensor.hpp"

namespace tsr {

/// Convolution weights. For conv2d the kernel is outC x inC x kH x kW; for
/// conv_transpose2d it is inC x outC x kH x kW. An undefined bias means none.
template <std::floating_point T>
struct ConvParams {
  Tensor<T> kernel;
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;
  // Extra rows/cols appended on the bottom/right of a transposed conv output.
  int output_padding = 0;
};

enum class BnMode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Spatial layers. All take NCHW input.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p);

/// Adjoint of conv2d: scatter-adds kernel-scaled input values.
/// H' = (H - 1) * stride + kH - 2 * padding + output_padding.
template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const ConvParams<T>& p);

template <std::floating_point T>
Tensor<T> pixel_shuffle(const Tensor<T>& input, int factor);

template <std::floating_point T>
Tensor<T> resize_nearest(const Tensor<T>& input, int factor);

/// Half-pixel (align-corners-false) bilinear upsampling.
template <std::floating_point T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int factor);

/// Per-channel normalization. Train mode normalizes with batch statistics and
/// updates the running statistics in place (EMA, unbiased variance); eval mode
/// uses the running statistics.
template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BnMode mode,
                     double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

template <std::floating_point T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

/// input [N,F] x weights [F,G] + bias [G].
template <std::floating_point T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

// Activations. `slope` for prelu is a learnable single-element tensor.
template <std::floating_point T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slope);

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& input, double slope);

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> tanh(const Tensor<T>& input);

// Elementwise arithmetic on equal shapes.
template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, double factor);

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, double value);

// Reductions and reshaping.
template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a);

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a);

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// [N, ...] -> [N, prod(...)].
template <std::floating_point T>
Tensor<T> flatten(const Tensor<T>& a);

// Losses, reduced by mean.
template <std::floating_point T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

/// Mean binary cross-entropy of probabilities against fixed targets.
/// Probabilities are clamped to [eps, 1 - eps]; targets are used as given,
/// including values above 1.
template <std::floating_point T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probabilities, std::span<const T> targets, double eps = 1e-7);

}  // namespace tsr
