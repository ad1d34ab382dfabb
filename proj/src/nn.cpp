#include "physnet/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "physnet/errors.hpp"

namespace physnet {

Padding3 Padding3::same(Dims3 kernel) {
  Padding3 p;
  for (std::size_t i = 0; i < 3; ++i) {
    p.before[i] = (kernel[i] - 1) / 2;
    p.after[i] = kernel[i] - 1 - p.before[i];
  }
  return p;
}

namespace {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

// Upper bound on the im2col scratch buffer, in elements.
constexpr std::int64_t kColumnBudget = 1 << 20;

// Geometry of a convolution from `in` to `out` extents; transposed
// convolutions reuse it with the roles of input and output swapped.
struct ConvGeometry {
  std::int64_t cin = 0, cout = 0;
  Dims3 in{}, out{}, kernel{}, stride{};
  Padding3 pad;

  std::int64_t rows() const { return cin * kernel[0] * kernel[1] * kernel[2]; }
  std::int64_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_plane() const { return out[1] * out[2]; }
  std::int64_t out_volume() const { return out[0] * out_plane(); }
  std::int64_t chunk_frames() const {
    return std::clamp<std::int64_t>(kColumnBudget / std::max<std::int64_t>(1, rows() * out_plane()), 1, out[0]);
  }
};

// Range of output indices o in [0, out) whose input index o*stride - pad + k
// falls inside [0, in).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t in, std::int64_t out, std::int64_t stride,
                                                         std::int64_t pad, std::int64_t k) {
  const std::int64_t shift = pad - k;  // need o*stride >= shift and o*stride <= in - 1 + shift
  std::int64_t lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  const std::int64_t top = in - 1 + shift;
  std::int64_t hi = top < 0 ? 0 : top / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Gathers input patches for output frames [t0, t0 + nt) into a
// [rows, nt * out_plane] row-major matrix.
template <typename S>
void im2col(const S* x, const ConvGeometry& g, std::int64_t t0, std::int64_t nt, S* cols) {
  const auto [kt, kh, kw] = g.kernel;
  const auto [st, sh, sw] = g.stride;
  const std::int64_t Ti = g.in[0], Hi = g.in[1], Wi = g.in[2];
  const std::int64_t Ho = g.out[1], Wo = g.out[2];
  const std::int64_t plane = g.out_plane(), ncols = nt * plane;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t dt = 0; dt < kt; ++dt) {
      for (std::int64_t dh = 0; dh < kh; ++dh) {
        const auto [h_lo, h_hi] = valid_range(Hi, Ho, sh, g.pad.before[1], dh);
        for (std::int64_t dw = 0; dw < kw; ++dw, ++row) {
          const auto [w_lo, w_hi] = valid_range(Wi, Wo, sw, g.pad.before[2], dw);
          S* dst_row = cols + row * ncols;
          for (std::int64_t tt = 0; tt < nt; ++tt) {
            S* dst = dst_row + tt * plane;
            const std::int64_t it = (t0 + tt) * st - g.pad.before[0] + dt;
            if (it < 0 || it >= Ti) {
              std::fill_n(dst, plane, S(0));
              continue;
            }
            const S* src = x + (ci * Ti + it) * Hi * Wi;
            for (std::int64_t ho = 0; ho < Ho; ++ho) {
              S* d = dst + ho * Wo;
              if (ho < h_lo || ho >= h_hi) {
                std::fill_n(d, Wo, S(0));
                continue;
              }
              const S* srow = src + (ho * sh - g.pad.before[1] + dh) * Wi - g.pad.before[2] + dw;
              std::fill(d, d + w_lo, S(0));
              if (sw == 1) {
                std::copy(srow + w_lo, srow + w_hi, d + w_lo);
              } else {
                for (std::int64_t wo = w_lo; wo < w_hi; ++wo) d[wo] = srow[wo * sw];
              }
              std::fill(d + w_hi, d + Wo, S(0));
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds a column matrix back onto the input.
template <typename S>
void col2im(const S* cols, const ConvGeometry& g, std::int64_t t0, std::int64_t nt, S* x) {
  const auto [kt, kh, kw] = g.kernel;
  const auto [st, sh, sw] = g.stride;
  const std::int64_t Ti = g.in[0], Hi = g.in[1], Wi = g.in[2];
  const std::int64_t Ho = g.out[1], Wo = g.out[2];
  const std::int64_t plane = g.out_plane(), ncols = nt * plane;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t dt = 0; dt < kt; ++dt) {
      for (std::int64_t dh = 0; dh < kh; ++dh) {
        const auto [h_lo, h_hi] = valid_range(Hi, Ho, sh, g.pad.before[1], dh);
        for (std::int64_t dw = 0; dw < kw; ++dw, ++row) {
          const auto [w_lo, w_hi] = valid_range(Wi, Wo, sw, g.pad.before[2], dw);
          const S* src_row = cols + row * ncols;
          for (std::int64_t tt = 0; tt < nt; ++tt) {
            const std::int64_t it = (t0 + tt) * st - g.pad.before[0] + dt;
            if (it < 0 || it >= Ti) continue;
            const S* src = src_row + tt * plane;
            S* dst = x + (ci * Ti + it) * Hi * Wi;
            for (std::int64_t ho = h_lo; ho < h_hi; ++ho) {
              const S* s = src + ho * Wo;
              S* drow = dst + (ho * sh - g.pad.before[1] + dh) * Wi - g.pad.before[2] + dw;
              for (std::int64_t wo = w_lo; wo < w_hi; ++wo) drow[wo * sw] += s[wo];
            }
          }
        }
      }
    }
  }
}

// out[cout, out_volume] += W[cout, rows] * im2col(x)
template <typename S>
void conv_forward_sample(const S* x, const S* w, const ConvGeometry& g, S* out, std::vector<S>& scratch) {
  const std::int64_t plane = g.out_plane(), step = g.chunk_frames();
  ConstMatMap<S> weight(w, g.cout, g.rows());
  MatMap<S> result(out, g.cout, g.out_volume());
  for (std::int64_t t0 = 0; t0 < g.out[0]; t0 += step) {
    const std::int64_t nt = std::min(step, g.out[0] - t0);
    scratch.resize(static_cast<std::size_t>(g.rows() * nt * plane));
    im2col(x, g, t0, nt, scratch.data());
    result.middleCols(t0 * plane, nt * plane).noalias() += weight * ConstMatMap<S>(scratch.data(), g.rows(), nt * plane);
  }
}

// dx += col2im(W^T * dout)
template <typename S>
void conv_backward_data_sample(const S* dout, const S* w, const ConvGeometry& g, S* dx, std::vector<S>& scratch) {
  const std::int64_t plane = g.out_plane(), step = g.chunk_frames();
  ConstMatMap<S> weight(w, g.cout, g.rows());
  ConstMatMap<S> grad(dout, g.cout, g.out_volume());
  for (std::int64_t t0 = 0; t0 < g.out[0]; t0 += step) {
    const std::int64_t nt = std::min(step, g.out[0] - t0);
    scratch.resize(static_cast<std::size_t>(g.rows() * nt * plane));
    MatMap<S>(scratch.data(), g.rows(), nt * plane).noalias() =
        weight.transpose() * grad.middleCols(t0 * plane, nt * plane);
    col2im(scratch.data(), g, t0, nt, dx);
  }
}

// dW += dout * im2col(x)^T
template <typename S>
void conv_backward_weight_sample(const S* x, const S* dout, const ConvGeometry& g, S* dw, std::vector<S>& scratch) {
  const std::int64_t plane = g.out_plane(), step = g.chunk_frames();
  MatMap<S> grad_w(dw, g.cout, g.rows());
  ConstMatMap<S> grad(dout, g.cout, g.out_volume());
  for (std::int64_t t0 = 0; t0 < g.out[0]; t0 += step) {
    const std::int64_t nt = std::min(step, g.out[0] - t0);
    scratch.resize(static_cast<std::size_t>(g.rows() * nt * plane));
    im2col(x, g, t0, nt, scratch.data());
    grad_w.noalias() +=
        grad.middleCols(t0 * plane, nt * plane) * ConstMatMap<S>(scratch.data(), g.rows(), nt * plane).transpose();
  }
}

template <typename S>
void add_bias(std::vector<S>& out, const BasicTensor<S>& bias, std::int64_t batch, std::int64_t channels,
              std::int64_t volume) {
  const auto b = bias.data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      S* p = out.data() + (n * channels + c) * volume;
      for (std::int64_t i = 0; i < volume; ++i) p[i] += b[c];
    }
}

template <typename S>
void bias_grad(std::span<const S> go, std::vector<S>& gb, std::int64_t batch, std::int64_t channels,
               std::int64_t volume) {
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      const S* p = go.data() + (n * channels + c) * volume;
      S acc = 0;
      for (std::int64_t i = 0; i < volume; ++i) acc += p[i];
      gb[c] += acc;
    }
}

// Promotes [C,T,H,W] to [1,C,T,H,W]; reports whether it did.
template <typename S>
std::pair<BasicTensor<S>, bool> as_batch(const BasicTensor<S>& x, const char* op) {
  if (x.rank() == 5) return {x, false};
  if (x.rank() == 4) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return {reshape(x, s), true};
  }
  throw ShapeError(std::string(op) + " expects [N,C,T,H,W] or [C,T,H,W], got " + to_string(x.shape()));
}

template <typename S>
BasicTensor<S> drop_batch(const BasicTensor<S>& y) {
  return reshape(y, Shape(y.shape().begin() + 1, y.shape().end()));
}

template <typename S>
BasicTensor<S> conv_core(const BasicTensor<S>& x, const BasicTensor<S>& w, const std::optional<BasicTensor<S>>& bias,
                         const ConvGeometry& g, std::int64_t batch, Shape out_shape) {
  std::vector<S> out(static_cast<std::size_t>(batch * g.cout * g.out_volume()), S(0));
  {
    std::vector<S> scratch;
    const auto xd = x.data();
    for (std::int64_t n = 0; n < batch; ++n) {
      conv_forward_sample(xd.data() + n * g.cin * g.in_volume(), w.data().data(), g,
                          out.data() + n * g.cout * g.out_volume(), scratch);
    }
  }
  if (bias) add_bias(out, *bias, batch, g.cout, g.out_volume());
  std::vector<BasicTensor<S>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return record_op(make_result(std::move(out_shape), std::move(out)), std::move(inputs),
                   [x, w, g, batch](auto go, auto gi) {
                     std::vector<S> scratch;
                     for (std::int64_t n = 0; n < batch; ++n) {
                       const S* dout = go.data() + n * g.cout * g.out_volume();
                       if (gi[0]) {
                         conv_backward_data_sample(dout, w.data().data(), g, gi[0]->data() + n * g.cin * g.in_volume(),
                                                   scratch);
                       }
                       if (gi[1]) {
                         conv_backward_weight_sample(x.data().data() + n * g.cin * g.in_volume(), dout, g,
                                                     gi[1]->data(), scratch);
                       }
                     }
                     if (gi.size() > 2 && gi[2]) bias_grad(go, *gi[2], batch, g.cout, g.out_volume());
                   });
}

void check_stride(Dims3 stride) {
  for (auto s : stride)
    if (s < 1) throw ShapeError("strides must be >= 1");
}

template <typename S>
void check_bias(const std::optional<BasicTensor<S>>& bias, std::int64_t channels) {
  if (bias && (bias->rank() != 1 || bias->dim(0) != channels)) {
    throw ShapeError("bias shape " + to_string(bias->shape()) + " does not match " + std::to_string(channels) +
                     " output channels");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolutions

template <typename S>
BasicTensor<S> conv3d(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                      const std::optional<BasicTensor<S>>& bias, Dims3 stride, const Padding3& padding) {
  auto [x, promoted] = as_batch(input, "conv3d");
  if (weight.rank() != 5) throw ShapeError("conv3d kernel must be [Cout,Cin,kT,kH,kW], got " + to_string(weight.shape()));
  check_stride(stride);
  ConvGeometry g;
  g.cin = x.dim(1);
  g.cout = weight.dim(0);
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv3d channel mismatch: input " + to_string(x.shape()) + ", kernel " + to_string(weight.shape()));
  }
  check_bias(bias, g.cout);
  g.kernel = {weight.dim(2), weight.dim(3), weight.dim(4)};
  g.stride = stride;
  g.pad = padding;
  for (std::size_t i = 0; i < 3; ++i) {
    g.in[i] = x.dim(i + 2);
    const std::int64_t padded = g.in[i] + padding.before[i] + padding.after[i];
    if (padded < g.kernel[i]) {
      throw ShapeError("conv3d kernel " + to_string(weight.shape()) + " larger than padded input " +
                       to_string(x.shape()));
    }
    g.out[i] = (padded - g.kernel[i]) / stride[i] + 1;
  }
  const std::int64_t batch = x.dim(0);
  auto y = conv_core(x, weight, bias, g, batch, Shape{batch, g.cout, g.out[0], g.out[1], g.out[2]});
  return promoted ? drop_batch(y) : y;
}

template <typename S>
BasicTensor<S> conv3d(const BasicTensor<S>& input, const ConvLayer<S>& layer) {
  if (layer.transposed) return deconv3d(input, layer);
  return conv3d(input, layer.weight, layer.bias, layer.stride, layer.padding);
}

template <typename S>
BasicTensor<S> deconv3d(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                        const std::optional<BasicTensor<S>>& bias, Dims3 stride, const Padding3& padding) {
  auto [x, promoted] = as_batch(input, "deconv3d");
  if (weight.rank() != 5) throw ShapeError("deconv3d kernel must be [Cin,Cout,kT,kH,kW], got " + to_string(weight.shape()));
  check_stride(stride);
  // Geometry of the forward convolution this is the adjoint of: its input is
  // our output and its output is our input.
  ConvGeometry g;
  g.cout = weight.dim(0);
  g.cin = weight.dim(1);
  if (x.dim(1) != g.cout) {
    throw ShapeError("deconv3d channel mismatch: input " + to_string(x.shape()) + ", kernel " +
                     to_string(weight.shape()));
  }
  check_bias(bias, g.cin);
  g.kernel = {weight.dim(2), weight.dim(3), weight.dim(4)};
  g.stride = stride;
  g.pad = padding;
  for (std::size_t i = 0; i < 3; ++i) {
    g.out[i] = x.dim(i + 2);
    g.in[i] = (g.out[i] - 1) * stride[i] + g.kernel[i] - padding.before[i] - padding.after[i];
    if (g.in[i] < 1) throw ShapeError("deconv3d produces an empty output for input " + to_string(x.shape()));
  }
  const std::int64_t batch = x.dim(0);
  std::vector<S> out(static_cast<std::size_t>(batch * g.cin * g.in_volume()), S(0));
  {
    std::vector<S> scratch;
    for (std::int64_t n = 0; n < batch; ++n) {
      conv_backward_data_sample(x.data().data() + n * g.cout * g.out_volume(), weight.data().data(), g,
                                out.data() + n * g.cin * g.in_volume(), scratch);
    }
  }
  if (bias) add_bias(out, *bias, batch, g.cin, g.in_volume());
  std::vector<BasicTensor<S>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  auto y = record_op(make_result(Shape{batch, g.cin, g.in[0], g.in[1], g.in[2]}, std::move(out)), std::move(inputs),
                     [x, weight, g, batch](auto go, auto gi) {
                       std::vector<S> scratch;
                       for (std::int64_t n = 0; n < batch; ++n) {
                         const S* dy = go.data() + n * g.cin * g.in_volume();
                         if (gi[0]) {
                           conv_forward_sample(dy, weight.data().data(), g, gi[0]->data() + n * g.cout * g.out_volume(),
                                               scratch);
                         }
                         if (gi[1]) {
                           conv_backward_weight_sample(dy, x.data().data() + n * g.cout * g.out_volume(), g,
                                                       gi[1]->data(), scratch);
                         }
                       }
                       if (gi.size() > 2 && gi[2]) bias_grad(go, *gi[2], batch, g.cin, g.in_volume());
                     });
  return promoted ? drop_batch(y) : y;
}

template <typename S>
BasicTensor<S> deconv3d(const BasicTensor<S>& input, const ConvLayer<S>& layer) {
  return deconv3d(input, layer.weight, layer.bias, layer.stride, layer.padding);
}

template <typename S>
BasicTensor<S> conv2d_same(const BasicTensor<S>& input, const BasicTensor<S>& weight) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects [N,C,H,W] input and [Cout,Cin,kH,kW] kernel, got " + to_string(input.shape()) +
                     " and " + to_string(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + ", kernel " +
                     to_string(weight.shape()));
  }
  // [N,C,H,W] and [Cout,Cin,kH,kW] share their memory layout with a unit
  // temporal axis, so the 3-D kernels apply directly.
  ConvGeometry g;
  g.cin = input.dim(1);
  g.cout = weight.dim(0);
  g.kernel = {1, weight.dim(2), weight.dim(3)};
  g.stride = {1, 1, 1};
  g.pad = Padding3::same(g.kernel);
  g.in = {1, input.dim(2), input.dim(3)};
  g.out = g.in;
  const std::int64_t batch = input.dim(0);
  return conv_core(input, weight, std::optional<BasicTensor<S>>{}, g, batch,
                   Shape{batch, g.cout, g.out[1], g.out[2]});
}

template <typename S>
ConvLayer<S> ConvLayer<S>::make(std::int64_t in_channels, std::int64_t out_channels, Dims3 kernel, Dims3 stride,
                                Padding3 padding, CounterRng& rng, bool with_bias) {
  ConvLayer layer;
  const std::int64_t fan_in = in_channels * kernel[0] * kernel[1] * kernel[2];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Shape shape{out_channels, in_channels, kernel[0], kernel[1], kernel[2]};
  std::vector<S> w(numel(shape));
  for (auto& v : w) v = static_cast<S>(rng.uniform(-bound, bound));
  layer.weight = BasicTensor<S>(shape, std::move(w), true);
  if (with_bias) layer.bias = BasicTensor<S>::zeros(Shape{out_channels}, true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

template <typename S>
ConvLayer<S> ConvLayer<S>::make_transposed(std::int64_t in_channels, std::int64_t out_channels, Dims3 kernel,
                                           Dims3 stride, Padding3 padding, CounterRng& rng, bool with_bias) {
  ConvLayer layer;
  const std::int64_t fan_in = in_channels * kernel[0] * kernel[1] * kernel[2];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Shape shape{in_channels, out_channels, kernel[0], kernel[1], kernel[2]};
  std::vector<S> w(numel(shape));
  for (auto& v : w) v = static_cast<S>(rng.uniform(-bound, bound));
  layer.weight = BasicTensor<S>(shape, std::move(w), true);
  if (with_bias) layer.bias = BasicTensor<S>::zeros(Shape{out_channels}, true);
  layer.stride = stride;
  layer.padding = padding;
  layer.transposed = true;
  return layer;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename S>
BasicTensor<S> maxpool3d(const BasicTensor<S>& input, Dims3 kernel, Dims3 stride) {
  auto [x, promoted] = as_batch(input, "maxpool3d");
  check_stride(stride);
  const std::int64_t N = x.dim(0), C = x.dim(1);
  Dims3 in{x.dim(2), x.dim(3), x.dim(4)}, out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (kernel[i] < 1 || in[i] < kernel[i]) {
      throw ShapeError("maxpool3d kernel (" + std::to_string(kernel[0]) + "," + std::to_string(kernel[1]) + "," +
                       std::to_string(kernel[2]) + ") exceeds input " + to_string(x.shape()));
    }
    out[i] = (in[i] - kernel[i]) / stride[i] + 1;
  }
  const std::int64_t in_vol = in[0] * in[1] * in[2], out_vol = out[0] * out[1] * out[2];
  std::vector<S> y(static_cast<std::size_t>(N * C * out_vol));
  std::vector<std::int64_t> argmax(y.size());
  const auto xd = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = xd.data() + nc * in_vol;
    std::int64_t o = nc * out_vol;
    for (std::int64_t t = 0; t < out[0]; ++t)
      for (std::int64_t h = 0; h < out[1]; ++h)
        for (std::int64_t w = 0; w < out[2]; ++w, ++o) {
          S best = -std::numeric_limits<S>::infinity();
          std::int64_t best_idx = -1;
          for (std::int64_t dt = 0; dt < kernel[0]; ++dt)
            for (std::int64_t dh = 0; dh < kernel[1]; ++dh)
              for (std::int64_t dw = 0; dw < kernel[2]; ++dw) {
                const std::int64_t idx =
                    ((t * stride[0] + dt) * in[1] + (h * stride[1] + dh)) * in[2] + (w * stride[2] + dw);
                if (best_idx < 0 || src[idx] > best) {
                  best = src[idx];
                  best_idx = idx;
                }
              }
          y[o] = best;
          argmax[o] = nc * in_vol + best_idx;
        }
  }
  auto result = record_op(make_result(Shape{N, C, out[0], out[1], out[2]}, std::move(y)), {x},
                          [argmax = std::move(argmax)](auto go, auto gi) {
                            auto& g = *gi[0];
                            for (std::size_t i = 0; i < go.size(); ++i) g[argmax[i]] += go[i];
                          });
  return promoted ? drop_batch(result) : result;
}

template <typename S>
BasicTensor<S> spatial_global_avgpool(const BasicTensor<S>& input) {
  auto [x, promoted] = as_batch(input, "spatial_global_avgpool");
  const std::int64_t N = x.dim(0), C = x.dim(1), T = x.dim(2), plane = x.dim(3) * x.dim(4);
  std::vector<S> y(static_cast<std::size_t>(N * C * T));
  const auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const S* p = xd.data() + static_cast<std::int64_t>(i) * plane;
    S acc = 0;
    for (std::int64_t k = 0; k < plane; ++k) acc += p[k];
    y[i] = acc / static_cast<S>(plane);
  }
  auto result = record_op(make_result(Shape{N, C, T, 1, 1}, std::move(y)), {x}, [plane](auto go, auto gi) {
    auto& g = *gi[0];
    const S inv = S(1) / static_cast<S>(plane);
    for (std::size_t i = 0; i < go.size(); ++i) {
      S* p = g.data() + static_cast<std::int64_t>(i) * plane;
      for (std::int64_t k = 0; k < plane; ++k) p[k] += go[i] * inv;
    }
  });
  return promoted ? drop_batch(result) : result;
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <typename S>
BatchNormLayer<S> BatchNormLayer<S>::make(std::int64_t channels) {
  BatchNormLayer layer;
  layer.gamma = BasicTensor<S>::full(Shape{channels}, S(1), true);
  layer.beta = BasicTensor<S>::zeros(Shape{channels}, true);
  layer.running_mean = BasicTensor<S>::zeros(Shape{channels});
  layer.running_var = BasicTensor<S>::full(Shape{channels}, S(1));
  return layer;
}

template <typename S>
BasicTensor<S> batchnorm(const BasicTensor<S>& input, BatchNormLayer<S>& layer, bool training) {
  auto [x, promoted] = as_batch(input, "batchnorm");
  const std::int64_t N = x.dim(0), C = x.dim(1), vol = x.dim(2) * x.dim(3) * x.dim(4);
  if (C != layer.channels()) {
    throw ShapeError("batchnorm channel mismatch: input " + to_string(x.shape()) + ", layer has " +
                     std::to_string(layer.channels()) + " channels");
  }
  const std::int64_t count = N * vol;
  const auto xd = x.data();
  std::vector<S> mean(C), inv_std(C);
  for (std::int64_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0, ss = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = xd.data() + (n * C + c) * vol;
        for (std::int64_t i = 0; i < vol; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = xd.data() + (n * C + c) * vol;
        for (std::int64_t i = 0; i < vol; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<S>(mu);
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(var + layer.epsilon));
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      auto rm = layer.running_mean.mutable_data();
      auto rv = layer.running_var.mutable_data();
      rm[c] = static_cast<S>((1.0 - layer.momentum) * rm[c] + layer.momentum * mu);
      rv[c] = static_cast<S>((1.0 - layer.momentum) * rv[c] + layer.momentum * unbiased);
    } else {
      mean[c] = layer.running_mean[c];
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(layer.running_var[c]) + layer.epsilon));
    }
  }
  const auto gamma = layer.gamma.data(), beta = layer.beta.data();
  std::vector<S> xhat(xd.size()), y(xd.size());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t base = (n * C + c) * vol;
      for (std::int64_t i = 0; i < vol; ++i) {
        const S h = (xd[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        y[base + i] = gamma[c] * h + beta[c];
      }
    }
  auto result = record_op(
      make_result(x.shape(), std::move(y)), {x, layer.gamma, layer.beta},
      [xhat = std::move(xhat), inv_std, g = layer.gamma, N, C, vol, count, training](auto go, auto gi) {
        const auto gamma = g.data();
        for (std::int64_t c = 0; c < C; ++c) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * vol;
            for (std::int64_t i = 0; i < vol; ++i) {
              sum_dy += go[base + i];
              sum_dy_xhat += go[base + i] * xhat[base + i];
            }
          }
          if (gi[1]) (*gi[1])[c] += static_cast<S>(sum_dy_xhat);
          if (gi[2]) (*gi[2])[c] += static_cast<S>(sum_dy);
          if (!gi[0]) continue;
          const S k = gamma[c] * inv_std[c];
          const S mean_dy = training ? static_cast<S>(sum_dy / static_cast<double>(count)) : S(0);
          const S mean_dy_xhat = training ? static_cast<S>(sum_dy_xhat / static_cast<double>(count)) : S(0);
          auto& gx = *gi[0];
          for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * vol;
            for (std::int64_t i = 0; i < vol; ++i) {
              gx[base + i] += k * (go[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
            }
          }
        }
      });
  return promoted ? drop_batch(result) : result;
}

// ---------------------------------------------------------------------------
// Recurrent cells

template <typename S>
std::int64_t RecurrentCell<S>::input_size() const {
  return kind == CellKind::Dense ? input_gate_x.dim(0) : input_gate_x.dim(1);
}

template <typename S>
std::int64_t RecurrentCell<S>::hidden_size() const {
  return kind == CellKind::Dense ? input_gate_x.dim(1) : input_gate_x.dim(0);
}

template <typename S>
std::vector<BasicTensor<S>*> RecurrentCell<S>::parameters() {
  return {&input_gate_x,  &input_gate_h,  &forget_gate_x, &forget_gate_h,
          &output_gate_x, &output_gate_h, &candidate_x,   &candidate_h};
}

namespace {

template <typename S>
BasicTensor<S> uniform_weight(Shape shape, std::int64_t fan_in, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<S> w(numel(shape));
  for (auto& v : w) v = static_cast<S>(rng.uniform(-bound, bound));
  return BasicTensor<S>(std::move(shape), std::move(w), true);
}

}  // namespace

template <typename S>
RecurrentCell<S> RecurrentCell<S>::make_dense(std::int64_t input_size, std::int64_t hidden_size, CounterRng& rng) {
  RecurrentCell cell;
  cell.kind = CellKind::Dense;
  for (std::size_t i = 0; i < 8; ++i) {
    const bool recurrent = i % 2 == 1;
    const std::int64_t in = recurrent ? hidden_size : input_size;
    *cell.parameters()[i] = uniform_weight<S>(Shape{in, hidden_size}, in, rng);
  }
  return cell;
}

template <typename S>
RecurrentCell<S> RecurrentCell<S>::make_conv(std::int64_t input_channels, std::int64_t hidden_channels,
                                             std::int64_t kernel, CounterRng& rng) {
  RecurrentCell cell;
  cell.kind = CellKind::Conv;
  for (std::size_t i = 0; i < 8; ++i) {
    const bool recurrent = i % 2 == 1;
    const std::int64_t in = recurrent ? hidden_channels : input_channels;
    *cell.parameters()[i] = uniform_weight<S>(Shape{hidden_channels, in, kernel, kernel}, in * kernel * kernel, rng);
  }
  return cell;
}

namespace {

template <typename S, typename Project>
RecurrentState<S> lstm_update(const RecurrentCell<S>& cell, const BasicTensor<S>& x, const BasicTensor<S>& hidden,
                              const BasicTensor<S>& memory, Project project) {
  auto gate = [&](const BasicTensor<S>& wx, const BasicTensor<S>& wh) {
    return add(project(x, wx), project(hidden, wh));
  };
  const auto i = sigmoid(gate(cell.input_gate_x, cell.input_gate_h));
  const auto f = sigmoid(gate(cell.forget_gate_x, cell.forget_gate_h));
  const auto o = sigmoid(gate(cell.output_gate_x, cell.output_gate_h));
  const auto candidate = tanh(gate(cell.candidate_x, cell.candidate_h));
  auto c = add(mul(f, memory), mul(i, candidate));
  auto h = mul(o, tanh(c));
  return {std::move(h), std::move(c)};
}

}  // namespace

template <typename S>
RecurrentState<S> lstm_step(const RecurrentCell<S>& cell, const BasicTensor<S>& x, const BasicTensor<S>& hidden,
                            const BasicTensor<S>& memory) {
  if (cell.kind != CellKind::Dense) throw ValidationError("lstm_step needs a dense cell");
  const std::int64_t in = cell.input_size(), hid = cell.hidden_size();
  if (x.rank() != 2 || x.dim(1) != in) {
    throw ShapeError("lstm_step input " + to_string(x.shape()) + " does not match cell input width " +
                     std::to_string(in));
  }
  const Shape state{x.dim(0), hid};
  if (hidden.shape() != state || memory.shape() != state) {
    throw ShapeError("lstm_step state shapes " + to_string(hidden.shape()) + "/" + to_string(memory.shape()) +
                     " expected " + to_string(state));
  }
  return lstm_update(cell, x, hidden, memory, [](const auto& v, const auto& w) { return matmul(v, w); });
}

template <typename S>
RecurrentState<S> convlstm_step(const RecurrentCell<S>& cell, const BasicTensor<S>& x, const BasicTensor<S>& hidden,
                                const BasicTensor<S>& memory) {
  if (cell.kind != CellKind::Conv) throw ValidationError("convlstm_step needs a convolutional cell");
  if (x.rank() != 4 || x.dim(1) != cell.input_size()) {
    throw ShapeError("convlstm_step input " + to_string(x.shape()) + " does not match cell input channels " +
                     std::to_string(cell.input_size()));
  }
  const Shape state{x.dim(0), cell.hidden_size(), x.dim(2), x.dim(3)};
  if (hidden.shape() != state || memory.shape() != state) {
    throw ShapeError("convlstm_step spatial/state mismatch: input " + to_string(x.shape()) + ", state " +
                     to_string(hidden.shape()) + "/" + to_string(memory.shape()));
  }
  return lstm_update(cell, x, hidden, memory, [](const auto& v, const auto& w) { return conv2d_same(v, w); });
}

#define PHYSNET_INSTANTIATE_NN(S)                                                                                 \
  template struct ConvLayer<S>;                                                                                   \
  template struct BatchNormLayer<S>;                                                                              \
  template struct RecurrentCell<S>;                                                                               \
  template BasicTensor<S> conv3d<S>(const BasicTensor<S>&, const BasicTensor<S>&,                                 \
                                    const std::optional<BasicTensor<S>>&, Dims3, const Padding3&);                \
  template BasicTensor<S> conv3d<S>(const BasicTensor<S>&, const ConvLayer<S>&);                                  \
  template BasicTensor<S> deconv3d<S>(const BasicTensor<S>&, const BasicTensor<S>&,                               \
                                      const std::optional<BasicTensor<S>>&, Dims3, const Padding3&);              \
  template BasicTensor<S> deconv3d<S>(const BasicTensor<S>&, const ConvLayer<S>&);                                \
  template BasicTensor<S> conv2d_same<S>(const BasicTensor<S>&, const BasicTensor<S>&);                           \
  template BasicTensor<S> maxpool3d<S>(const BasicTensor<S>&, Dims3, Dims3);                                      \
  template BasicTensor<S> batchnorm<S>(const BasicTensor<S>&, BatchNormLayer<S>&, bool);                          \
  template BasicTensor<S> spatial_global_avgpool<S>(const BasicTensor<S>&);                                       \
  template RecurrentState<S> lstm_step<S>(const RecurrentCell<S>&, const BasicTensor<S>&, const BasicTensor<S>&,  \
                                          const BasicTensor<S>&);                                                 \
  template RecurrentState<S> convlstm_step<S>(const RecurrentCell<S>&, const BasicTensor<S>&,                     \
                                              const BasicTensor<S>&, const BasicTensor<S>&);

PHYSNET_INSTANTIATE_NN(float)
PHYSNET_INSTANTIATE_NN(double)

}  // namespace physnet
