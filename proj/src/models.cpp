#include "tsr/models.hpp"

#include <bit>
#include <cmath>
#include <random>

#include "tsr/ops.hpp"

namespace tsr {

std::string_view to_string(Upsampler upsampler) {
  switch (upsampler) {
    case Upsampler::kTransposedConv: return "transposed_conv";
    case Upsampler::kSubpixelConv: return "subpixel_conv";
    case Upsampler::kNearestThenConv: return "nearest_then_conv";
    case Upsampler::kBilinearThenConv: return "bilinear_then_conv";
  }
  return "unknown";
}

Upsampler parse_upsampler(std::string_view name) {
  for (auto u : {Upsampler::kTransposedConv, Upsampler::kSubpixelConv, Upsampler::kNearestThenConv,
                 Upsampler::kBilinearThenConv}) {
    if (to_string(u) == name) return u;
  }
  throw SpecError("unknown upsampler '" + std::string(name) + "'");
}

std::string_view to_string(DiscriminatorHead head) { return head == DiscriminatorHead::kGap ? "gap" : "flatten"; }

DiscriminatorHead parse_head(std::string_view name) {
  if (name == "gap") return DiscriminatorHead::kGap;
  if (name == "flatten") return DiscriminatorHead::kFlatten;
  throw SpecError("unknown discriminator head '" + std::string(name) + "'");
}

void GeneratorSpec::validate() const {
  if (scale < 2 || !std::has_single_bit(static_cast<unsigned>(scale))) {
    throw SpecError("generator scale must be a power of two >= 2, got " + std::to_string(scale));
  }
  if (n_res_blocks < 1) throw SpecError("generator needs at least one residual block");
  if (base_channels < 1 || in_channels < 1 || out_channels < 1) throw SpecError("channel counts must be positive");
  if (edge_kernel < 1 || edge_kernel % 2 == 0) throw SpecError("edge_kernel must be odd and positive");
}

int GeneratorSpec::upsample_stages() const { return std::countr_zero(static_cast<unsigned>(scale)); }

int GeneratorSpec::bn_layer_count() const { return use_bn ? 2 * n_res_blocks + 1 : 0; }

GeneratorSpec GeneratorSpec::modified() { return GeneratorSpec{}; }

GeneratorSpec GeneratorSpec::baseline() {
  GeneratorSpec s;
  s.use_bn = true;
  s.upsampler = Upsampler::kSubpixelConv;
  return s;
}

void DiscriminatorSpec::validate() const {
  if (conv_block_channels.empty()) throw SpecError("discriminator needs at least one conv block");
  for (int c : conv_block_channels) {
    if (c < 1) throw SpecError("discriminator channel counts must be positive");
  }
  if (in_channels < 1) throw SpecError("in_channels must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw SpecError("leaky_slope must be in [0, 1)");
  if (head == DiscriminatorHead::kFlatten && (input_size < downsample_factor() || dense_units < 1)) {
    throw SpecError("flatten head needs input_size >= downsample factor and dense_units >= 1");
  }
}

int DiscriminatorSpec::downsample_factor() const {
  return 1 << (static_cast<int>(conv_block_channels.size()) / 2);
}

namespace {

// Spatial extent after a 3x3 conv with padding 1.
std::int64_t conv3_out(std::int64_t in, int stride) { return (in + 2 - 3) / stride + 1; }

int block_stride(std::size_t index) { return index % 2 == 1 ? 2 : 1; }

template <std::floating_point T>
class Initializer {
 public:
  Initializer(Model<T>& model, std::uint64_t seed) : model_(model), rng_(seed) {}

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)). He-normal saturates the tanh output
  // of the BN-free generator at initialization.
  void weights(const std::string& name, Shape shape, std::int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    model_.add_parameter(name, Tensor<T>(std::move(shape), std::move(v), true));
  }

  void constant(const std::string& name, Shape shape, T value) {
    model_.add_parameter(name, Tensor<T>::full(std::move(shape), value, true));
  }

  void conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k) {
    weights(name + ".weight", {out, in, k, k}, in * k * k);
    constant(name + ".bias", {out}, T(0));
  }

  void deconv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k) {
    weights(name + ".weight", {in, out, k, k}, in * k * k);
    constant(name + ".bias", {out}, T(0));
  }

  void dense(const std::string& name, std::int64_t in, std::int64_t out) {
    weights(name + ".weight", {in, out}, in);
    constant(name + ".bias", {out}, T(0));
  }

  void prelu(const std::string& name) { constant(name, {1}, T(0.25)); }

  void bn(const std::string& name, std::int64_t channels) {
    constant(name + ".gamma", {channels}, T(1));
    constant(name + ".beta", {channels}, T(0));
    model_.add_buffer(name + ".running_mean", Tensor<T>::zeros({channels}));
    model_.add_buffer(name + ".running_var", Tensor<T>::full({channels}, T(1)));
  }

 private:
  Model<T>& model_;
  std::mt19937_64 rng_;
};

template <std::floating_point T>
class Layers {
 public:
  Layers(const Model<T>& model, Phase phase) : model_(model), phase_(phase) {}

  Tensor<T> conv(const std::string& name, const Tensor<T>& x, int stride, int padding) const {
    return conv2d(x, ConvParams<T>{model_.parameter(name + ".weight"), model_.parameter(name + ".bias"), stride,
                                   padding, 0});
  }

  Tensor<T> deconv(const std::string& name, const Tensor<T>& x) const {
    // kernel 3, stride 2: uneven overlap; output_padding 1 gives exactly 2x.
    return conv_transpose2d(x, ConvParams<T>{model_.parameter(name + ".weight"), model_.parameter(name + ".bias"), 2,
                                             1, 1});
  }

  Tensor<T> bn(const std::string& name, const Tensor<T>& x) const {
    Tensor<T> mean = model_.buffer(name + ".running_mean");
    Tensor<T> var = model_.buffer(name + ".running_var");
    return batch_norm(x, model_.parameter(name + ".gamma"), model_.parameter(name + ".beta"), mean, var,
                      phase_ == Phase::kTrain ? BnMode::kTrain : BnMode::kEval);
  }

  Tensor<T> act(const std::string& name, const Tensor<T>& x) const { return prelu(x, model_.parameter(name)); }

  Tensor<T> fc(const std::string& name, const Tensor<T>& x) const {
    return dense(x, model_.parameter(name + ".weight"), model_.parameter(name + ".bias"));
  }

 private:
  const Model<T>& model_;
  Phase phase_;
};

std::string res_name(int block, const char* layer) { return "res" + std::to_string(block) + "." + layer; }
std::string up_name(int stage, const char* layer) { return "up" + std::to_string(stage) + "." + layer; }

template <std::floating_point T>
Tensor<T> generator_forward(const Model<T>& model, const GeneratorSpec& s, const Tensor<T>& x, Phase phase) {
  if (x.rank() != 4) throw DimensionError("generator", "rank", "expected NCHW input, got " + shape_str(x.shape()));
  if (x.dim(1) != s.in_channels) {
    throw DimensionError("generator", "channels",
                         "expected " + std::to_string(s.in_channels) + " channels, got " + std::to_string(x.dim(1)));
  }
  const Layers<T> L(model, phase);
  const int edge_pad = s.edge_kernel / 2;
  auto maybe_bn = [&](const std::string& name, const Tensor<T>& t) { return s.use_bn ? L.bn(name, t) : t; };

  const Tensor<T> head = L.act("head.prelu", L.conv("head.conv", x, 1, edge_pad));
  Tensor<T> r = head;
  for (int i = 0; i < s.n_res_blocks; ++i) {
    Tensor<T> y = L.act(res_name(i, "prelu"), maybe_bn(res_name(i, "bn1"), L.conv(res_name(i, "conv1"), r, 1, 1)));
    y = maybe_bn(res_name(i, "bn2"), L.conv(res_name(i, "conv2"), y, 1, 1));
    r = add(r, y);
  }
  r = add(head, maybe_bn("post.bn", L.conv("post.conv", r, 1, 1)));

  for (int stage = 0; stage < s.upsample_stages(); ++stage) {
    switch (s.upsampler) {
      case Upsampler::kTransposedConv: r = L.deconv(up_name(stage, "deconv"), r); break;
      case Upsampler::kSubpixelConv: r = pixel_shuffle(L.conv(up_name(stage, "conv"), r, 1, 1), 2); break;
      case Upsampler::kNearestThenConv: r = L.conv(up_name(stage, "conv"), resize_nearest(r, 2), 1, 1); break;
      case Upsampler::kBilinearThenConv: r = L.conv(up_name(stage, "conv"), resize_bilinear(r, 2), 1, 1); break;
    }
    r = L.act(up_name(stage, "prelu"), r);
  }
  return tanh(L.conv("tail.conv", r, 1, edge_pad));
}

template <std::floating_point T>
Tensor<T> discriminator_forward(const Model<T>& model, const DiscriminatorSpec& s, const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("discriminator", "rank", "expected NCHW input, got " + shape_str(x.shape()));
  if (x.dim(1) != s.in_channels) {
    throw DimensionError("discriminator", "channels",
                         "expected " + std::to_string(s.in_channels) + " channels, got " + std::to_string(x.dim(1)));
  }
  if (s.head == DiscriminatorHead::kFlatten) {
    if (x.dim(2) != s.input_size) {
      throw DimensionError("discriminator", "height",
                           "flatten head built for " + std::to_string(s.input_size) + ", got " + std::to_string(x.dim(2)));
    }
    if (x.dim(3) != s.input_size) {
      throw DimensionError("discriminator", "width",
                           "flatten head built for " + std::to_string(s.input_size) + ", got " + std::to_string(x.dim(3)));
    }
  } else if (std::min(x.dim(2), x.dim(3)) < s.downsample_factor()) {
    throw DimensionError("discriminator", x.dim(2) < x.dim(3) ? "height" : "width",
                         "input smaller than the downsampling factor " + std::to_string(s.downsample_factor()));
  }
  const Layers<T> L(model, Phase::kEval);
  Tensor<T> h = x;
  for (std::size_t i = 0; i < s.conv_block_channels.size(); ++i) {
    h = leaky_relu(L.conv("block" + std::to_string(i) + ".conv", h, block_stride(i), 1), s.leaky_slope);
  }
  if (s.head == DiscriminatorHead::kGap) return sigmoid(L.fc("head.fc", global_avg_pool(h)));
  h = leaky_relu(L.fc("head.fc1", flatten(h)), s.leaky_slope);
  return sigmoid(L.fc("head.fc2", h));
}

}  // namespace

template <std::floating_point T>
Tensor<T>& Model<T>::add_parameter(std::string name, Tensor<T> value) {
  if (param_index_.contains(name) || buffer_index_.contains(name)) {
    throw std::invalid_argument("duplicate tensor name '" + name + "'");
  }
  param_index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(value)});
  return params_.back().value;
}

template <std::floating_point T>
Tensor<T>& Model<T>::add_buffer(std::string name, Tensor<T> value) {
  if (param_index_.contains(name) || buffer_index_.contains(name)) {
    throw std::invalid_argument("duplicate tensor name '" + name + "'");
  }
  buffer_index_.emplace(name, buffers_.size());
  buffers_.push_back({std::move(name), std::move(value)});
  return buffers_.back().value;
}

template <std::floating_point T>
bool Model<T>::has_parameter(std::string_view name) const {
  return param_index_.contains(std::string(name));
}

template <std::floating_point T>
const Tensor<T>& Model<T>::parameter(std::string_view name) const {
  const auto it = param_index_.find(std::string(name));
  if (it == param_index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return params_[it->second].value;
}

template <std::floating_point T>
const Tensor<T>& Model<T>::buffer(std::string_view name) const {
  const auto it = buffer_index_.find(std::string(name));
  if (it == buffer_index_.end()) throw std::out_of_range("no buffer named '" + std::string(name) + "'");
  return buffers_[it->second].value;
}

template <std::floating_point T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <std::floating_point T>
Tensor<T> Model<T>::run(const Tensor<T>& input, Phase phase) const {
  return std::visit(
      [&](const auto& spec) -> Tensor<T> {
        using S = std::decay_t<decltype(spec)>;
        if constexpr (std::is_same_v<S, GeneratorSpec>) {
          return generator_forward(*this, spec, input, phase);
        } else if constexpr (std::is_same_v<S, DiscriminatorSpec>) {
          return discriminator_forward(*this, spec, input);
        } else {
          throw std::logic_error("forward on an empty model");
        }
      },
      spec_);
}

template <std::floating_point T>
Tensor<T> Model<T>::forward(const Tensor<T>& input, Phase phase) {
  return run(input, phase);
}

template <std::floating_point T>
Tensor<T> Model<T>::infer(const Tensor<T>& input) const {
  NoGradGuard no_grad;
  return run(input, Phase::kEval);
}

template <std::floating_point T>
Model<T> Model<T>::clone() const {
  Model copy(spec_);
  for (const auto& p : params_) {
    auto t = p.value.detach();
    t.set_requires_grad(p.value.requires_grad());
    copy.add_parameter(p.name, std::move(t));
  }
  for (const auto& b : buffers_) copy.add_buffer(b.name, b.value.detach());
  return copy;
}

template class Model<float>;
template class Model<double>;

template <std::floating_point T>
Model<T> build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> model(spec);
  Initializer<T> init(model, seed);
  const std::int64_t c = spec.base_channels;
  init.conv("head.conv", spec.in_channels, c, spec.edge_kernel);
  init.prelu("head.prelu");
  for (int i = 0; i < spec.n_res_blocks; ++i) {
    init.conv(res_name(i, "conv1"), c, c, 3);
    if (spec.use_bn) init.bn(res_name(i, "bn1"), c);
    init.prelu(res_name(i, "prelu"));
    init.conv(res_name(i, "conv2"), c, c, 3);
    if (spec.use_bn) init.bn(res_name(i, "bn2"), c);
  }
  init.conv("post.conv", c, c, 3);
  if (spec.use_bn) init.bn("post.bn", c);
  for (int stage = 0; stage < spec.upsample_stages(); ++stage) {
    switch (spec.upsampler) {
      case Upsampler::kTransposedConv: init.deconv(up_name(stage, "deconv"), c, c, 3); break;
      case Upsampler::kSubpixelConv: init.conv(up_name(stage, "conv"), c, 4 * c, 3); break;
      case Upsampler::kNearestThenConv:
      case Upsampler::kBilinearThenConv: init.conv(up_name(stage, "conv"), c, c, 3); break;
    }
    init.prelu(up_name(stage, "prelu"));
  }
  init.conv("tail.conv", c, spec.out_channels, spec.edge_kernel);
  return model;
}

template <std::floating_point T>
Model<T> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> model(spec);
  Initializer<T> init(model, seed);
  std::int64_t in = spec.in_channels;
  std::int64_t extent = spec.input_size;
  for (std::size_t i = 0; i < spec.conv_block_channels.size(); ++i) {
    init.conv("block" + std::to_string(i) + ".conv", in, spec.conv_block_channels[i], 3);
    in = spec.conv_block_channels[i];
    extent = conv3_out(extent, block_stride(i));
  }
  if (spec.head == DiscriminatorHead::kGap) {
    init.dense("head.fc", in, 1);
  } else {
    init.dense("head.fc1", in * extent * extent, spec.dense_units);
    init.dense("head.fc2", spec.dense_units, 1);
  }
  return model;
}

template <std::floating_point T>
std::int64_t parameter_count(const Model<T>& model) {
  std::int64_t n = 0;
  for (const auto& p : model.parameters()) n += p.value.numel();
  return n;
}

template Model<float> build_generator<float>(const GeneratorSpec&, std::uint64_t);
template Model<double> build_generator<double>(const GeneratorSpec&, std::uint64_t);
template Model<float> build_discriminator<float>(const DiscriminatorSpec&, std::uint64_t);
template Model<double> build_discriminator<double>(const DiscriminatorSpec&, std::uint64_t);
template std::int64_t parameter_count<float>(const Model<float>&);
template std::int64_t parameter_count<double>(const Model<double>&);

}  // namespace tsr
