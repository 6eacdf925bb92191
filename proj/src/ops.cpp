#include "tsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blas.hpp"

namespace tsr {

namespace {

template <std::floating_point T>
using NodeT = detail::Node<T>;

template <std::floating_point T>
using Backward = std::function<void(NodeT<T>&)>;

// Wraps forward values into a tensor, recording graph edges when any input
// tracks gradients and recording is enabled on this thread.
template <std::floating_point T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      const char* op, Backward<T> backward) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) track = track || (in->defined() && in->requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto* in : inputs) node->parents.push_back(in->defined() ? in->node() : std::make_shared<NodeT<T>>());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <std::floating_point T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (!t.defined()) throw DimensionError(op, what, "tensor is undefined");
  if (t.rank() != rank) {
    throw DimensionError(op, "rank",
                         std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <std::floating_point T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(op, "shape", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Geometry of a correlation from a (channels, height, width) image onto an
// (out_h, out_w) grid of receptive fields.
struct ConvGeometry {
  std::int64_t channels, height, width;
  std::int64_t kernel_h, kernel_w;
  std::int64_t stride, padding;
  std::int64_t out_h, out_w;

  std::int64_t rows() const { return channels * kernel_h * kernel_w; }
  std::int64_t cols() const { return out_h * out_w; }
};

// Bounds the im2col scratch buffer to ~4M elements.
std::int64_t column_chunk(const ConvGeometry& g) {
  constexpr std::int64_t kBudget = std::int64_t{1} << 22;
  return std::clamp<std::int64_t>(kBudget / std::max<std::int64_t>(g.rows(), 1), 1, g.cols());
}

// Range of output columns [lo, hi) whose input column ow * stride - padding + kj
// falls inside [0, width).
inline void valid_columns(const ConvGeometry& g, std::int64_t kj, std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = kj - g.padding;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.width - off <= 0 ? 0 : (g.width - off - 1) / g.stride + 1;
  lo = std::min(lo, g.out_w);
  hi = std::clamp(hi, lo, g.out_w);
}

// Visits columns [p0, p0 + len) one output row at a time. For every kernel
// tap r the callback receives (r, ih or -1, output row segment [a, b),
// destination offset within the chunk, valid column range).
template <typename F>
void for_each_segment(const ConvGeometry& g, std::int64_t p0, std::int64_t len, F&& f) {
  const std::int64_t kk = g.kernel_h * g.kernel_w;
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    const std::int64_t ki = (r / g.kernel_w) % g.kernel_h;
    const std::int64_t kj = r % g.kernel_w;
    std::int64_t lo, hi;
    valid_columns(g, kj, lo, hi);
    std::int64_t q = 0;
    while (q < len) {
      const std::int64_t p = p0 + q;
      const std::int64_t oh = p / g.out_w;
      const std::int64_t a = p % g.out_w;
      const std::int64_t b = std::min(g.out_w, a + (len - q));
      const std::int64_t ih = oh * g.stride - g.padding + ki;
      f(r, r / kk, kj, (ih >= 0 && ih < g.height) ? ih : -1, a, b, q, lo, hi);
      q += b - a;
    }
  }
}

// Writes columns [p0, p0 + len) of the unrolled image into `col` (rows x len).
template <std::floating_point T>
void im2col(const T* image, const ConvGeometry& g, std::int64_t p0, std::int64_t len, T* col) {
  for_each_segment(g, p0, len,
                   [&](std::int64_t r, std::int64_t c, std::int64_t kj, std::int64_t ih, std::int64_t a, std::int64_t b,
                       std::int64_t q, std::int64_t lo, std::int64_t hi) {
                     T* dst = col + r * len + q - a;
                     if (ih < 0) {
                       std::fill(dst + a, dst + b, T(0));
                       return;
                     }
                     const T* src = image + (c * g.height + ih) * g.width - g.padding + kj;
                     const std::int64_t va = std::clamp(lo, a, b), vb = std::clamp(hi, va, b);
                     std::fill(dst + a, dst + va, T(0));
                     if (g.stride == 1) {
                       std::copy(src + va, src + vb, dst + va);
                     } else {
                       for (std::int64_t ow = va; ow < vb; ++ow) dst[ow] = src[ow * g.stride];
                     }
                     std::fill(dst + vb, dst + b, T(0));
                   });
}

// Adjoint of im2col: accumulates columns back onto the image.
template <std::floating_point T>
void col2im(const T* col, const ConvGeometry& g, std::int64_t p0, std::int64_t len, T* image) {
  for_each_segment(g, p0, len,
                   [&](std::int64_t r, std::int64_t c, std::int64_t kj, std::int64_t ih, std::int64_t a, std::int64_t b,
                       std::int64_t q, std::int64_t lo, std::int64_t hi) {
                     if (ih < 0) return;
                     const T* src = col + r * len + q - a;
                     T* dst = image + (c * g.height + ih) * g.width - g.padding + kj;
                     const std::int64_t va = std::clamp(lo, a, b), vb = std::clamp(hi, va, b);
                     if (g.stride == 1) {
                       for (std::int64_t ow = va; ow < vb; ++ow) dst[ow] += src[ow];
                     } else {
                       for (std::int64_t ow = va; ow < vb; ++ow) dst[ow * g.stride] += src[ow];
                     }
                   });
}

template <std::floating_point T>
void check_bias(const ConvParams<T>& p, std::int64_t out_channels, const char* op) {
  if (!p.bias.defined()) return;
  if (p.bias.rank() != 1 || p.bias.dim(0) != out_channels) {
    throw DimensionError(op, "bias", "expected [" + std::to_string(out_channels) + "], got " + shape_str(p.bias.shape()));
  }
}

template <std::floating_point T>
void add_channel_bias(std::vector<T>& out, const Tensor<T>& bias, std::int64_t n, std::int64_t c, std::int64_t plane) {
  if (!bias.defined()) return;
  const auto b = bias.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T* dst = out.data() + (i * c + ch) * plane;
      std::for_each(dst, dst + plane, [v = b[ch]](T& x) { x += v; });
    }
  }
}

template <std::floating_point T>
void accumulate_channel_bias_grad(const std::vector<T>& gy, std::vector<T>& gb, std::int64_t n, std::int64_t c,
                                  std::int64_t plane) {
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* src = gy.data() + (i * c + ch) * plane;
      gb[ch] += std::accumulate(src, src + plane, T(0));
    }
  }
}

template <std::floating_point T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& x, const char* op, F&& forward, G&& derivative) {
  std::vector<T> out(x.data().begin(), x.data().end());
  std::for_each(out.begin(), out.end(), [&](T& v) { v = forward(v); });
  return make_result<T>(x.shape(), std::move(out), {&x}, op, [derivative](NodeT<T>& self) {
    auto& in = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * derivative(in.data[i], self.data[i]);
  });
}

}  // namespace

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
  constexpr const char* kOp = "conv2d";
  require_rank(input, 4, kOp, "input");
  require_rank(p.kernel, 4, kOp, "kernel");
  if (p.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (p.padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto oc = p.kernel.dim(0), kh = p.kernel.dim(2), kw = p.kernel.dim(3);
  if (p.kernel.dim(1) != c) {
    throw DimensionError(kOp, "channels",
                         "input has " + std::to_string(c) + " channels, kernel expects " + std::to_string(p.kernel.dim(1)));
  }
  if (h + 2 * p.padding < kh) throw DimensionError(kOp, "height", "padded height smaller than kernel height");
  if (w + 2 * p.padding < kw) throw DimensionError(kOp, "width", "padded width smaller than kernel width");
  check_bias(p, oc, kOp);

  const ConvGeometry g{c, h, w, kh, kw, p.stride, p.padding, (h + 2 * p.padding - kh) / p.stride + 1,
                       (w + 2 * p.padding - kw) / p.stride + 1};
  const std::int64_t rows = g.rows(), cols = g.cols(), chunk = column_chunk(g);
  std::vector<T> out(static_cast<std::size_t>(n * oc * cols));
  std::vector<T> col(static_cast<std::size_t>(rows * chunk));
  const T* x = input.data().data();
  const T* k = p.kernel.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p0 = 0; p0 < cols; p0 += chunk) {
      const std::int64_t len = std::min(chunk, cols - p0);
      im2col(x + i * c * h * w, g, p0, len, col.data());
      detail::gemm<T>(false, false, oc, len, rows, T(1), k, rows, col.data(), len, T(0), out.data() + i * oc * cols + p0,
                      cols);
    }
  }
  add_channel_bias(out, p.bias, n, oc, cols);

  return make_result<T>(
      Shape{n, oc, g.out_h, g.out_w}, std::move(out), {&input, &p.kernel, &p.bias}, kOp,
      [g, n, oc, chunk](NodeT<T>& self) {
        auto& xin = *self.parents[0];
        auto& ker = *self.parents[1];
        auto& bias = *self.parents[2];
        const std::int64_t rows = g.rows(), cols = g.cols();
        const std::int64_t image = g.channels * g.height * g.width;
        std::vector<T> col(static_cast<std::size_t>(rows * chunk));
        for (std::int64_t i = 0; i < n; ++i) {
          const T* gy = self.grad.data() + i * oc * cols;
          for (std::int64_t p0 = 0; p0 < cols; p0 += chunk) {
            const std::int64_t len = std::min(chunk, cols - p0);
            if (ker.requires_grad) {
              im2col(xin.data.data() + i * image, g, p0, len, col.data());
              detail::gemm<T>(false, true, oc, rows, len, T(1), gy + p0, cols, col.data(), len, T(1), ker.grad.data(),
                              rows);
            }
            if (xin.requires_grad) {
              detail::gemm<T>(true, false, rows, len, oc, T(1), ker.data.data(), rows, gy + p0, cols, T(0), col.data(),
                              len);
              col2im(col.data(), g, p0, len, xin.grad.data() + i * image);
            }
          }
        }
        if (bias.requires_grad) accumulate_channel_bias_grad(self.grad, bias.grad, n, oc, cols);
      });
}

template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const ConvParams<T>& p) {
  constexpr const char* kOp = "conv_transpose2d";
  require_rank(input, 4, kOp, "input");
  require_rank(p.kernel, 4, kOp, "kernel");
  if (p.stride < 1) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
  if (p.padding < 0) throw std::invalid_argument("conv_transpose2d: padding must be >= 0");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto oc = p.kernel.dim(1), kh = p.kernel.dim(2), kw = p.kernel.dim(3);
  if (p.kernel.dim(0) != c) {
    throw DimensionError(kOp, "channels",
                         "input has " + std::to_string(c) + " channels, kernel expects " + std::to_string(p.kernel.dim(0)));
  }
  if (p.padding >= kh || p.padding >= kw) {
    throw std::invalid_argument("conv_transpose2d: padding must be smaller than the kernel extent");
  }
  if (p.output_padding < 0 || p.output_padding >= p.stride) {
    throw std::invalid_argument("conv_transpose2d: output_padding must be in [0, stride)");
  }
  check_bias(p, oc, kOp);

  const std::int64_t out_h = (h - 1) * p.stride + kh - 2 * p.padding + p.output_padding;
  const std::int64_t out_w = (w - 1) * p.stride + kw - 2 * p.padding + p.output_padding;
  // The correlation that maps the output grid back onto the input grid.
  const ConvGeometry g{oc, out_h, out_w, kh, kw, p.stride, p.padding, h, w};
  const std::int64_t rows = g.rows(), cols = g.cols(), chunk = column_chunk(g);
  const std::int64_t plane = out_h * out_w;
  std::vector<T> out(static_cast<std::size_t>(n * oc * plane), T(0));
  std::vector<T> col(static_cast<std::size_t>(rows * chunk));
  const T* x = input.data().data();
  const T* k = p.kernel.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p0 = 0; p0 < cols; p0 += chunk) {
      const std::int64_t len = std::min(chunk, cols - p0);
      detail::gemm<T>(true, false, rows, len, c, T(1), k, rows, x + i * c * cols + p0, cols, T(0), col.data(), len);
      col2im(col.data(), g, p0, len, out.data() + i * oc * plane);
    }
  }
  add_channel_bias(out, p.bias, n, oc, plane);

  return make_result<T>(
      Shape{n, oc, out_h, out_w}, std::move(out), {&input, &p.kernel, &p.bias}, kOp,
      [g, n, c, oc, chunk](NodeT<T>& self) {
        auto& xin = *self.parents[0];
        auto& ker = *self.parents[1];
        auto& bias = *self.parents[2];
        const std::int64_t rows = g.rows(), cols = g.cols();
        const std::int64_t plane = g.height * g.width;
        std::vector<T> col(static_cast<std::size_t>(rows * chunk));
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t p0 = 0; p0 < cols; p0 += chunk) {
            const std::int64_t len = std::min(chunk, cols - p0);
            im2col(self.grad.data() + i * oc * plane, g, p0, len, col.data());
            if (xin.requires_grad) {
              detail::gemm<T>(false, false, c, len, rows, T(1), ker.data.data(), rows, col.data(), len, T(1),
                              xin.grad.data() + i * c * cols + p0, cols);
            }
            if (ker.requires_grad) {
              detail::gemm<T>(false, true, c, rows, len, T(1), xin.data.data() + i * c * cols + p0, cols, col.data(),
                              len, T(1), ker.grad.data(), rows);
            }
          }
        }
        if (bias.requires_grad) accumulate_channel_bias_grad(self.grad, bias.grad, n, oc, plane);
      });
}

template <std::floating_point T>
Tensor<T> pixel_shuffle(const Tensor<T>& input, int factor) {
  require_rank(input, 4, "pixel_shuffle", "input");
  if (factor < 1) throw std::invalid_argument("pixel_shuffle: factor must be >= 1");
  const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t r = factor, rr = r * r;
  if (cin % rr != 0) {
    throw DimensionError("pixel_shuffle", "channels",
                         std::to_string(cin) + " channels not divisible by factor^2 = " + std::to_string(rr));
  }
  const std::int64_t c = cin / rr;
  const std::int64_t oh = h * r, ow = w * r;
  // Maps each output index to its source index.
  std::vector<std::int64_t> source(static_cast<std::size_t>(input.numel()));
  std::size_t o = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          const std::int64_t src_c = ch * rr + (y % r) * r + (x % r);
          source[o++] = ((i * cin + src_c) * h + y / r) * w + x / r;
        }
  const auto in = input.data();
  std::vector<T> out(source.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = in[static_cast<std::size_t>(source[j])];
  return make_result<T>(Shape{n, c, oh, ow}, std::move(out), {&input}, "pixel_shuffle",
                        [source = std::move(source)](NodeT<T>& self) {
                          auto& in = *self.parents[0];
                          for (std::size_t j = 0; j < source.size(); ++j)
                            in.grad[static_cast<std::size_t>(source[j])] += self.grad[j];
                        });
}

template <std::floating_point T>
Tensor<T> resize_nearest(const Tensor<T>& input, int factor) {
  require_rank(input, 4, "resize_nearest", "input");
  if (factor < 1) throw std::invalid_argument("resize_nearest: factor must be >= 1");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t r = factor, oh = h * r, ow = w * r;
  const auto in = input.data();
  std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const T* src = in.data() + plane * h * w;
    for (std::int64_t y = 0; y < oh; ++y) {
      const T* row = src + (y / r) * w;
      for (std::int64_t x = 0; x < ow; ++x) out[o++] = row[x / r];
    }
  }
  return make_result<T>(Shape{n, c, oh, ow}, std::move(out), {&input}, "resize_nearest",
                        [n, c, h, w, r](NodeT<T>& self) {
                          auto& in = *self.parents[0];
                          const std::int64_t oh = h * r, ow = w * r;
                          std::size_t o = 0;
                          for (std::int64_t plane = 0; plane < n * c; ++plane) {
                            T* dst = in.grad.data() + plane * h * w;
                            for (std::int64_t y = 0; y < oh; ++y)
                              for (std::int64_t x = 0; x < ow; ++x) dst[(y / r) * w + x / r] += self.grad[o++];
                          }
                        });
}

namespace {

// Source taps for one axis of half-pixel linear interpolation.
struct LinearTap {
  std::int64_t lo, hi;
  double frac;
};

std::vector<LinearTap> linear_taps(std::int64_t in, std::int64_t factor) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(in * factor));
  for (std::int64_t o = 0; o < in * factor; ++o) {
    const double src = std::max((static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5, 0.0);
    const auto lo = std::min(static_cast<std::int64_t>(std::floor(src)), in - 1);
    const auto hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <std::floating_point T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int factor) {
  require_rank(input, 4, "resize_bilinear", "input");
  if (factor < 1) throw std::invalid_argument("resize_bilinear: factor must be >= 1");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  auto ty = linear_taps(h, factor);
  auto tx = linear_taps(w, factor);
  const auto in = input.data();
  std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const T* src = in.data() + plane * h * w;
    for (const auto& y : ty) {
      for (const auto& x : tx) {
        const T a = src[y.lo * w + x.lo], b = src[y.lo * w + x.hi];
        const T cc = src[y.hi * w + x.lo], d = src[y.hi * w + x.hi];
        const T fx = static_cast<T>(x.frac), fy = static_cast<T>(y.frac);
        const T top = a + (b - a) * fx;
        const T bottom = cc + (d - cc) * fx;
        out[o++] = top + (bottom - top) * fy;
      }
    }
  }
  return make_result<T>(Shape{n, c, oh, ow}, std::move(out), {&input}, "resize_bilinear",
                        [n, c, h, w, ty = std::move(ty), tx = std::move(tx)](NodeT<T>& self) {
                          auto& in = *self.parents[0];
                          std::size_t o = 0;
                          for (std::int64_t plane = 0; plane < n * c; ++plane) {
                            T* dst = in.grad.data() + plane * h * w;
                            for (const auto& y : ty) {
                              for (const auto& x : tx) {
                                const T g = self.grad[o++];
                                const T fx = static_cast<T>(x.frac), fy = static_cast<T>(y.frac);
                                dst[y.lo * w + x.lo] += g * (1 - fx) * (1 - fy);
                                dst[y.lo * w + x.hi] += g * fx * (1 - fy);
                                dst[y.hi * w + x.lo] += g * (1 - fx) * fy;
                                dst[y.hi * w + x.hi] += g * fx * fy;
                              }
                            }
                          }
                        });
}

template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, BnMode mode, double momentum, double eps) {
  constexpr const char* kOp = "batch_norm";
  require_rank(input, 4, kOp, "input");
  const auto n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (!t->defined() || t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError(kOp, "channels", "per-channel tensors must have shape [" + std::to_string(c) + "]");
    }
  }
  const std::int64_t count = n * plane;
  if (mode == BnMode::kTrain && count < 2) {
    throw DimensionError(kOp, "batch", "train mode needs N*H*W >= 2, got " + std::to_string(count));
  }
  const auto x = input.data();
  std::vector<T> mean_c(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (mode == BnMode::kTrain) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* src = x.data() + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) s += src[j];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* src = x.data() + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) ss += (src[j] - mu) * (src[j] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean_c[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[ch] = static_cast<T>((1.0 - momentum) * rm[ch] + momentum * mu);
      rv[ch] = static_cast<T>((1.0 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean_c[ch] = rm[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + eps));
    }
  }

  const auto gm = gamma.data();
  const auto bt = beta.data();
  std::vector<T> out(x.size());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::size_t base = static_cast<std::size_t>((i * c + ch) * plane);
      for (std::int64_t j = 0; j < plane; ++j) {
        out[base + j] = gm[ch] * (x[base + j] - mean_c[ch]) * inv_std[ch] + bt[ch];
      }
    }
  }

  const bool train = mode == BnMode::kTrain;
  return make_result<T>(
      input.shape(), std::move(out), {&input, &gamma, &beta}, kOp,
      [n, c, plane, count, train, mean_c = std::move(mean_c), inv_std = std::move(inv_std)](NodeT<T>& self) {
        auto& xin = *self.parents[0];
        auto& gm = *self.parents[1];
        auto& bt = *self.parents[2];
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>((i * c + ch) * plane);
            for (std::int64_t j = 0; j < plane; ++j) {
              const double xhat = (xin.data[base + j] - mean_c[ch]) * inv_std[ch];
              sum_dy += self.grad[base + j];
              sum_dy_xhat += self.grad[base + j] * xhat;
            }
          }
          if (gm.requires_grad) gm.grad[ch] += static_cast<T>(sum_dy_xhat);
          if (bt.requires_grad) bt.grad[ch] += static_cast<T>(sum_dy);
          if (!xin.requires_grad) continue;
          const double g = gm.data[ch];
          const double m = static_cast<double>(count);
          for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>((i * c + ch) * plane);
            for (std::int64_t j = 0; j < plane; ++j) {
              const double dy = self.grad[base + j];
              if (train) {
                const double xhat = (xin.data[base + j] - mean_c[ch]) * inv_std[ch];
                xin.grad[base + j] +=
                    static_cast<T>(g * inv_std[ch] * (dy - sum_dy / m - xhat * sum_dy_xhat / m));
              } else {
                xin.grad[base + j] += static_cast<T>(g * inv_std[ch] * dy);
              }
            }
          }
        }
      });
}

template <std::floating_point T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const auto n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(n * c));
  for (std::int64_t k = 0; k < n * c; ++k) {
    const T* src = x.data() + k * plane;
    out[k] = static_cast<T>(std::accumulate(src, src + plane, 0.0) / static_cast<double>(plane));
  }
  return make_result<T>(Shape{n, c}, std::move(out), {&input}, "global_avg_pool", [n, c, plane](NodeT<T>& self) {
    auto& in = *self.parents[0];
    const T inv = T(1) / static_cast<T>(plane);
    for (std::int64_t k = 0; k < n * c; ++k) {
      T* dst = in.grad.data() + k * plane;
      for (std::int64_t j = 0; j < plane; ++j) dst[j] += self.grad[k] * inv;
    }
  });
}

template <std::floating_point T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  constexpr const char* kOp = "dense";
  require_rank(input, 2, kOp, "input");
  require_rank(weights, 2, kOp, "weights");
  const auto n = input.dim(0), f = input.dim(1), g = weights.dim(1);
  if (weights.dim(0) != f) {
    throw DimensionError(kOp, "inner", "input has " + std::to_string(f) + " features, weights expect " +
                                           std::to_string(weights.dim(0)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g)) {
    throw DimensionError(kOp, "bias", "expected [" + std::to_string(g) + "], got " + shape_str(bias.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(n * g), T(0));
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::int64_t i = 0; i < n; ++i) std::copy(b.begin(), b.end(), out.begin() + i * g);
  }
  detail::gemm<T>(false, false, n, g, f, T(1), input.data().data(), f, weights.data().data(), g, T(1), out.data(), g);
  return make_result<T>(Shape{n, g}, std::move(out), {&input, &weights, &bias}, kOp, [n, f, g](NodeT<T>& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    if (x.requires_grad)
      detail::gemm<T>(false, true, n, f, g, T(1), self.grad.data(), g, w.data.data(), g, T(1), x.grad.data(), f);
    if (w.requires_grad)
      detail::gemm<T>(true, false, f, g, n, T(1), x.data.data(), f, self.grad.data(), g, T(1), w.grad.data(), g);
    if (b.requires_grad) {
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < g; ++j) b.grad[j] += self.grad[i * g + j];
    }
  });
}

template <std::floating_point T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slope) {
  if (!slope.defined() || slope.numel() != 1) throw DimensionError("prelu", "slope", "slope must hold one value");
  const T a = slope.data()[0];
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > T(0) ? v : a * v;
  return make_result<T>(input.shape(), std::move(out), {&input, &slope}, "prelu", [](NodeT<T>& self) {
    auto& x = *self.parents[0];
    auto& s = *self.parents[1];
    const T a = s.data[0];
    T ds = T(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool pos = x.data[i] > T(0);
      if (x.requires_grad) x.grad[i] += pos ? self.grad[i] : a * self.grad[i];
      if (!pos) ds += self.grad[i] * x.data[i];
    }
    if (s.requires_grad) s.grad[0] += ds;
  });
}

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& input, double slope) {
  const T a = static_cast<T>(slope);
  return unary(
      input, "leaky_relu", [a](T v) { return v > T(0) ? v : a * v; },
      [a](T x, T) { return x > T(0) ? T(1) : a; });
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return unary(
      input, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <std::floating_point T>
Tensor<T> tanh(const Tensor<T>& input) {
  return unary(
      input, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "add", [](NodeT<T>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) parent->grad[i] += self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "sub", [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul", [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  return unary(a, "scale", [f](T v) { return v * f; }, [f](T, T) { return f; });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, double value) {
  const T s = static_cast<T>(value);
  return unary(a, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto d = a.data();
  const T total = static_cast<T>(std::accumulate(d.begin(), d.end(), 0.0));
  return make_result<T>(Shape{1}, {total}, {&a}, "sum", [](NodeT<T>& self) {
    auto& in = *self.parents[0];
    for (auto& g : in.grad) g += self.grad[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  const auto d = a.data();
  const double n = static_cast<double>(d.size());
  const T avg = static_cast<T>(std::accumulate(d.begin(), d.end(), 0.0) / n);
  return make_result<T>(Shape{1}, {avg}, {&a}, "mean", [n](NodeT<T>& self) {
    auto& in = *self.parents[0];
    const T g = static_cast<T>(self.grad[0] / n);
    for (auto& v : in.grad) v += g;
  });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape", "numel", shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&a}, "reshape", [](NodeT<T>& self) {
    auto& in = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

template <std::floating_point T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("flatten", "rank", "need at least a batch and one feature axis");
  return reshape(a, Shape{a.dim(0), a.numel() / a.dim(0)});
}

template <std::floating_point T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction, target, "mse_loss");
  const auto p = prediction.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (static_cast<double>(p[i]) - t[i]) * (static_cast<double>(p[i]) - t[i]);
  const double n = static_cast<double>(p.size());
  return make_result<T>(Shape{1}, {static_cast<T>(acc / n)}, {&prediction, &target}, "mse_loss", [n](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T k = static_cast<T>(2.0 * self.grad[0] / n);
    for (std::size_t i = 0; i < pa.data.size(); ++i) {
      const T d = k * (pa.data[i] - pb.data[i]);
      if (pa.requires_grad) pa.grad[i] += d;
      if (pb.requires_grad) pb.grad[i] -= d;
    }
  });
}

template <std::floating_point T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probabilities, std::span<const T> targets, double eps) {
  if (static_cast<std::int64_t>(targets.size()) != probabilities.numel()) {
    throw DimensionError("binary_cross_entropy", "numel",
                         std::to_string(probabilities.numel()) + " probabilities vs " + std::to_string(targets.size()) +
                             " targets");
  }
  const auto p = probabilities.data();
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
    acc -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
  }
  std::vector<T> tgt(targets.begin(), targets.end());
  return make_result<T>(Shape{1}, {static_cast<T>(acc / n)}, {&probabilities}, "binary_cross_entropy",
                        [n, eps, tgt = std::move(tgt)](NodeT<T>& self) {
                          auto& in = *self.parents[0];
                          for (std::size_t i = 0; i < in.data.size(); ++i) {
                            const double q = in.data[i];
                            if (q < eps || q > 1.0 - eps) continue;
                            const double d = -(tgt[i] / q - (1.0 - tgt[i]) / (1.0 - q)) / n;
                            in.grad[i] += static_cast<T>(d * self.grad[0]);
                          }
                        });
}

#define TSR_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                                             \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const ConvParams<T>&);                                   \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                                                       \
  template Tensor<T> resize_nearest(const Tensor<T>&, int);                                                      \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int);                                                     \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,    \
                                BnMode, double, double);                                                         \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                          \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> prelu(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                  \
  template Tensor<T> tanh(const Tensor<T>&);                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, double);                                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, double);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                           \
  template Tensor<T> flatten(const Tensor<T>&);                                                                  \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, std::span<const T>, double);

TSR_INSTANTIATE_OPS(float)
TSR_INSTANTIATE_OPS(double)

#undef TSR_INSTANTIATE_OPS

}  // namespace tsr
