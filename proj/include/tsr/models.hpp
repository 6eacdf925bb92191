#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "tsr/tensor.hpp"

namespace tsr {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Upsampler { kTransposedConv, kSubpixelConv, kNearestThenConv, kBilinearThenConv };

std::string_view to_string(Upsampler upsampler);
Upsampler parse_upsampler(std::string_view name);

/// Generator configuration. The network is
///   head conv + PReLU
///   -> n_res_blocks x (conv [BN] PReLU conv [BN] + skip)
///   -> conv [BN] + global skip
///   -> log2(scale) x2 upsampling stages
///   -> output conv + tanh.
struct GeneratorSpec {
  int scale = 4;
  int base_channels = 64;
  int n_res_blocks = 16;
  bool use_bn = false;
  Upsampler upsampler = Upsampler::kNearestThenConv;
  int in_channels = 3;
  int out_channels = 3;
  int edge_kernel = 9;  // head and output conv extent

  void validate() const;
  int upsample_stages() const;
  /// Number of BN layers the spec contains (0 when use_bn is false).
  int bn_layer_count() const;
  bool operator==(const GeneratorSpec&) const = default;

  /// Nearest-then-conv upsampling, no BN.
  static GeneratorSpec modified();
  /// Subpixel upsampling with BN, the unmodified comparator.
  static GeneratorSpec baseline();
};

enum class DiscriminatorHead { kGap, kFlatten };

std::string_view to_string(DiscriminatorHead head);
DiscriminatorHead parse_head(std::string_view name);

/// Discriminator configuration: 3x3 conv blocks with leaky ReLU, stride 2 on
/// every odd block, followed by either GAP -> dense -> sigmoid or
/// flatten -> dense(dense_units) -> leaky -> dense -> sigmoid.
struct DiscriminatorSpec {
  std::vector<int> conv_block_channels{64, 64, 128, 128, 256, 256, 512, 512};
  DiscriminatorHead head = DiscriminatorHead::kGap;
  double leaky_slope = 0.2;
  int in_channels = 3;
  int input_size = 96;    // flatten head only
  int dense_units = 1024;  // flatten head only

  void validate() const;
  int downsample_factor() const;
  bool operator==(const DiscriminatorSpec&) const = default;
};

using ModelSpec = std::variant<std::monostate, GeneratorSpec, DiscriminatorSpec>;

enum class Phase { kTrain, kEval };

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered named parameters (trainable) and buffers (running statistics)
/// plus the spec they were built from. Iteration order is insertion order.
template <std::floating_point T>
class Model {
 public:
  Model() = default;
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}

  const ModelSpec& spec() const noexcept { return spec_; }

  Tensor<T>& add_parameter(std::string name, Tensor<T> value);
  Tensor<T>& add_buffer(std::string name, Tensor<T> value);

  std::span<const NamedTensor<T>> parameters() const noexcept { return params_; }
  std::span<NamedTensor<T>> parameters() noexcept { return params_; }
  std::span<const NamedTensor<T>> buffers() const noexcept { return buffers_; }
  std::span<NamedTensor<T>> buffers() noexcept { return buffers_; }

  bool has_parameter(std::string_view name) const;
  const Tensor<T>& parameter(std::string_view name) const;
  const Tensor<T>& buffer(std::string_view name) const;

  void zero_grad();

  /// Runs the network. Train phase records the graph and updates BN running
  /// statistics; eval phase uses them.
  Tensor<T> forward(const Tensor<T>& input, Phase phase = Phase::kEval);

  /// Eval-phase forward with graph recording off. Safe to call concurrently.
  Tensor<T> infer(const Tensor<T>& input) const;

  /// Deep copy with independent storage.
  Model clone() const;

 private:
  Tensor<T> run(const Tensor<T>& input, Phase phase) const;

  ModelSpec spec_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
};

extern template class Model<float>;
extern template class Model<double>;

template <std::floating_point T>
Model<T> build_generator(const GeneratorSpec& spec, std::uint64_t seed);

template <std::floating_point T>
Model<T> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed);

template <std::floating_point T>
std::int64_t parameter_count(const Model<T>& model);

template <std::floating_point T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& input, Phase phase = Phase::kEval) {
  return model.forward(input, phase);
}

using ModelF = Model<float>;

}  // namespace tsr
