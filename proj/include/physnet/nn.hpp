#pragma once

// Layers shared by the PhysNet variants. Feature maps are [N, C, T, H, W]
// (rank-4 [C, T, H, W] inputs are accepted as a batch of one and returned at
// rank 4). Convolution is cross-correlation; "same" padding is zero padding
// with any odd remainder on the trailing side.

#include <array>
#include <optional>
#include <vector>

#include "physnet/random.hpp"
#include "physnet/tensor.hpp"

namespace physnet {

using Dims3 = std::array<std::int64_t, 3>;  // (T, H, W)

struct Padding3 {
  Dims3 before{0, 0, 0};
  Dims3 after{0, 0, 0};

  static Padding3 none() { return {}; }
  static Padding3 symmetric(Dims3 pad) { return {pad, pad}; }
  // Preserves extents for unit stride.
  static Padding3 same(Dims3 kernel);
};

template <typename S>
struct ConvLayer {
  // Convolution: [Cout, Cin, kT, kH, kW]. Transposed convolution stores the
  // kernel of the convolution it is the adjoint of, as [Cin, Cout, kT, kH, kW].
  BasicTensor<S> weight;
  std::optional<BasicTensor<S>> bias;  // [Cout]
  Dims3 stride{1, 1, 1};
  Padding3 padding;
  bool transposed = false;

  Dims3 kernel() const { return {weight.dim(2), weight.dim(3), weight.dim(4)}; }
  std::int64_t in_channels() const { return transposed ? weight.dim(0) : weight.dim(1); }
  std::int64_t out_channels() const { return transposed ? weight.dim(1) : weight.dim(0); }

  // Weights uniform in +-sqrt(6 / fan_in), bias zero.
  static ConvLayer make(std::int64_t in_channels, std::int64_t out_channels, Dims3 kernel, Dims3 stride,
                        Padding3 padding, CounterRng& rng, bool with_bias = true);
  static ConvLayer make_transposed(std::int64_t in_channels, std::int64_t out_channels, Dims3 kernel, Dims3 stride,
                                   Padding3 padding, CounterRng& rng, bool with_bias = true);
};

template <typename S>
BasicTensor<S> conv3d(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                      const std::optional<BasicTensor<S>>& bias, Dims3 stride, const Padding3& padding);
template <typename S>
BasicTensor<S> conv3d(const BasicTensor<S>& input, const ConvLayer<S>& layer);

// Exact adjoint of conv3d with the same kernel, stride and padding. The output
// extent along each axis is (in - 1) * stride + kernel - pad_before - pad_after.
template <typename S>
BasicTensor<S> deconv3d(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                        const std::optional<BasicTensor<S>>& bias, Dims3 stride, const Padding3& padding);
template <typename S>
BasicTensor<S> deconv3d(const BasicTensor<S>& input, const ConvLayer<S>& layer);

// 2-D "same" convolution over [N, C, H, W] with a [Cout, Cin, kH, kW] kernel.
template <typename S>
BasicTensor<S> conv2d_same(const BasicTensor<S>& input, const BasicTensor<S>& weight);

// Unpadded windowed maximum; ties route the gradient to the first maximum in
// (t, h, w) scan order.
template <typename S>
BasicTensor<S> maxpool3d(const BasicTensor<S>& input, Dims3 kernel, Dims3 stride);

template <typename S>
struct BatchNormLayer {
  BasicTensor<S> gamma;  // [C]
  BasicTensor<S> beta;   // [C]
  BasicTensor<S> running_mean;
  BasicTensor<S> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  std::int64_t channels() const { return gamma.dim(0); }
  static BatchNormLayer make(std::int64_t channels);
};

// Training mode normalises with batch statistics over (N, T, H, W) and updates
// the running statistics (unbiased variance); eval mode uses the running ones.
template <typename S>
BasicTensor<S> batchnorm(const BasicTensor<S>& input, BatchNormLayer<S>& layer, bool training);

// Mean over H and W: [N, C, T, H, W] -> [N, C, T, 1, 1].
template <typename S>
BasicTensor<S> spatial_global_avgpool(const BasicTensor<S>& input);

enum class CellKind { Dense, Conv };

// Bias-free LSTM cell. Dense cells hold [in, hidden] input weights and
// [hidden, hidden] recurrent weights; conv cells hold [hidden, in, k, k] and
// [hidden, hidden, k, k] kernels.
template <typename S>
struct RecurrentCell {
  CellKind kind = CellKind::Dense;
  BasicTensor<S> input_gate_x, input_gate_h;
  BasicTensor<S> forget_gate_x, forget_gate_h;
  BasicTensor<S> output_gate_x, output_gate_h;
  BasicTensor<S> candidate_x, candidate_h;

  std::int64_t input_size() const;
  std::int64_t hidden_size() const;
  std::vector<BasicTensor<S>*> parameters();

  static RecurrentCell make_dense(std::int64_t input_size, std::int64_t hidden_size, CounterRng& rng);
  static RecurrentCell make_conv(std::int64_t input_channels, std::int64_t hidden_channels, std::int64_t kernel,
                                 CounterRng& rng);
};

template <typename S>
struct RecurrentState {
  BasicTensor<S> hidden;
  BasicTensor<S> cell;
};

// x: [N, in], hidden/cell: [N, hidden].
template <typename S>
RecurrentState<S> lstm_step(const RecurrentCell<S>& cell, const BasicTensor<S>& x, const BasicTensor<S>& hidden,
                            const BasicTensor<S>& memory);

// x: [N, in, H, W], hidden/cell: [N, hidden, H, W].
template <typename S>
RecurrentState<S> convlstm_step(const RecurrentCell<S>& cell, const BasicTensor<S>& x, const BasicTensor<S>& hidden,
                                const BasicTensor<S>& memory);

}  // namespace physnet
