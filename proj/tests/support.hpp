#pragma once

// Shared test helpers: random tensors, the finite-difference gradient
// checker and naive reference implementations used as oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "physnet/nn.hpp"
#include "physnet/random.hpp"
#include "physnet/tensor.hpp"

namespace physnet::testing {

template <typename S>
BasicTensor<S> random_tensor(const Shape& shape, CounterRng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::vector<S> data(numel(shape));
  for (auto& v : data) v = static_cast<S>(rng.uniform(lo, hi));
  return BasicTensor<S>(shape, std::move(data), requires_grad);
}

// Values bounded away from zero, for inputs that pass through kinks.
inline Tensor64 random_nonzero(const Shape& shape, CounterRng& rng, bool requires_grad = true) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) {
    const double mag = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor64(shape, std::move(data), requires_grad);
}

// Weighted sum with fixed random weights: every output element contributes a
// distinct amount to the scalar.
template <typename S>
BasicTensor<S> weighted_sum(const BasicTensor<S>& out, const BasicTensor<S>& weights) {
  return sum(mul(out, weights));
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t redrawn = 0;  // coordinates with a kink inside the stencil
};

// Compares tape gradients of `loss_fn` with central differences (step h) for
// up to `max_per_input` randomly chosen elements of every input. Relative
// error is |a - n| / max(|a|, |n|, floor).
//
// With `skip_kinks` each coordinate is also differenced at h/2. Piecewise
// smooth maps (relu, max pooling) give estimates that disagree by more than
// `kink_rel` when a kink falls inside the stencil; such coordinates are
// replaced by fresh ones and counted.
inline GradCheckResult gradcheck(const std::function<Tensor64(const std::vector<Tensor64>&)>& loss_fn,
                                 std::vector<Tensor64> inputs, CounterRng& rng, std::size_t max_per_input = 24,
                                 double h = 1e-4, double floor = 1e-3, bool skip_kinks = false,
                                 double kink_rel = 1e-3) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Gradients<double> grads;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto loss = loss_fn(inputs);
    grads = tape.backward(loss);
  }
  GradCheckResult res;
  for (auto& t : inputs) {
    const auto analytic = grads.contains(t) ? grads.of(t) : Tensor64::zeros(t.shape());
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < idx.size(); ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    auto data = t.mutable_data();
    auto central = [&](std::size_t i, double step) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = loss_fn(inputs).item();
      data[i] = orig - step;
      const double down = loss_fn(inputs).item();
      data[i] = orig;
      return (up - down) / (2 * step);
    };
    std::size_t done = 0;
    for (std::size_t i : idx) {
      if (done == max_per_input) break;
      double numeric = central(i, h);
      if (skip_kinks) {
        const double half = central(i, h / 2);
        if (std::abs(half - numeric) > kink_rel * std::max({std::abs(half), std::abs(numeric), floor})) {
          ++res.redrawn;
          continue;
        }
      }
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
      ++done;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Oracles

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Direct 3-D cross-correlation of one sample [Cin,T,H,W] with [Cout,Cin,kT,kH,kW].
inline std::vector<double> naive_conv3d(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                        const Shape& ws, const std::vector<double>& bias, Dims3 stride,
                                        Dims3 pad_before, Dims3 pad_after, Shape* out_shape) {
  const auto cin = xs[0], T = xs[1], H = xs[2], W = xs[3];
  const auto cout = ws[0], kt = ws[2], kh = ws[3], kw = ws[4];
  const auto To = (T + pad_before[0] + pad_after[0] - kt) / stride[0] + 1;
  const auto Ho = (H + pad_before[1] + pad_after[1] - kh) / stride[1] + 1;
  const auto Wo = (W + pad_before[2] + pad_after[2] - kw) / stride[2] + 1;
  *out_shape = {cout, To, Ho, Wo};
  std::vector<double> y(static_cast<std::size_t>(cout * To * Ho * Wo), 0.0);
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t t = 0; t < To; ++t)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t c = 0; c < cin; ++c)
            for (std::int64_t a = 0; a < kt; ++a)
              for (std::int64_t b = 0; b < kh; ++b)
                for (std::int64_t d = 0; d < kw; ++d) {
                  const auto tt = t * stride[0] + a - pad_before[0];
                  const auto ii = i * stride[1] + b - pad_before[1];
                  const auto jj = j * stride[2] + d - pad_before[2];
                  if (tt < 0 || tt >= T || ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                  acc += x[((c * T + tt) * H + ii) * W + jj] * w[(((o * cin + c) * kt + a) * kh + b) * kw + d];
                }
          y[((o * To + t) * Ho + i) * Wo + j] = acc;
        }
  return y;
}

inline double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// One LSTM step written out per element: x [in], h and c [hid]; weights are
// [in, hid] / [hid, hid] row-major, applied as x^T W.
struct ScalarLstm {
  std::vector<double> wi_x, wi_h, wf_x, wf_h, wo_x, wo_h, wc_x, wc_h;
  std::size_t in = 0, hid = 0;

  void step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c) const {
    std::vector<double> h_new(hid), c_new(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      double zi = 0, zf = 0, zo = 0, zc = 0;
      for (std::size_t p = 0; p < in; ++p) {
        zi += x[p] * wi_x[p * hid + j];
        zf += x[p] * wf_x[p * hid + j];
        zo += x[p] * wo_x[p * hid + j];
        zc += x[p] * wc_x[p * hid + j];
      }
      for (std::size_t p = 0; p < hid; ++p) {
        zi += h[p] * wi_h[p * hid + j];
        zf += h[p] * wf_h[p * hid + j];
        zo += h[p] * wo_h[p * hid + j];
        zc += h[p] * wc_h[p * hid + j];
      }
      const double i = sigmoid_ref(zi), f = sigmoid_ref(zf), o = sigmoid_ref(zo);
      c_new[j] = f * c[j] + i * std::tanh(zc);
      h_new[j] = o * std::tanh(c_new[j]);
    }
    h = h_new;
    c = c_new;
  }
};

// Per-element ConvLSTM reference built from the loop convolution.
struct ScalarConvLstm {
  std::int64_t in, hid, k, H, W;
  std::vector<double> wx[4], wh[4];  // i, f, o, c

  std::vector<double> conv(const std::vector<double>& x, std::int64_t cin, const std::vector<double>& w) const {
    Shape os;
    const std::int64_t p = k / 2;
    return naive_conv3d(x, {cin, 1, H, W}, w, {hid, cin, 1, k, k}, {}, {1, 1, 1}, {0, p, p}, {0, k - 1 - p, k - 1 - p},
                        &os);
  }

  void step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c) const {
    std::vector<double> z[4];
    for (int g = 0; g < 4; ++g) {
      z[g] = conv(x, in, wx[g]);
      const auto zh = conv(h, hid, wh[g]);
      for (std::size_t i = 0; i < z[g].size(); ++i) z[g][i] += zh[i];
    }
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double ig = sigmoid_ref(z[0][i]), fg = sigmoid_ref(z[1][i]), og = sigmoid_ref(z[2][i]);
      c[i] = fg * c[i] + ig * std::tanh(z[3][i]);
      h[i] = og * std::tanh(c[i]);
    }
  }
};

// Independent Adam on a single scalar.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return theta - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace physnet::testing
