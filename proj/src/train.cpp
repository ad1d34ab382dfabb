#include "physnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "physnet/errors.hpp"
#include "physnet/random.hpp"
#include "physnet/tensor_io.hpp"

namespace physnet {

std::string_view loss_name(LossKind kind) { return kind == LossKind::NegPearson ? "negpea" : "mse"; }

LossKind parse_loss(std::string_view name) {
  if (name == "negpea" || name == "neg-pearson") return LossKind::NegPearson;
  if (name == "mse") return LossKind::Mse;
  throw ValidationError("unknown loss '" + std::string(name) + "' (expected negpea or mse)");
}

namespace {

template <typename S>
std::pair<std::int64_t, std::int64_t> rows_and_length(const BasicTensor<S>& pred, const BasicTensor<S>& truth,
                                                      const char* op) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError(std::string(op) + " length mismatch: " + to_string(pred.shape()) + " vs " +
                     to_string(truth.shape()));
  }
  if (pred.rank() == 1) return {1, pred.dim(0)};
  if (pred.rank() == 2) return {pred.dim(0), pred.dim(1)};
  throw ShapeError(std::string(op) + " expects [T] or [N,T], got " + to_string(pred.shape()));
}

}  // namespace

template <typename S>
BasicTensor<S> neg_pearson_loss(const BasicTensor<S>& pred, const BasicTensor<S>& truth) {
  const auto [rows, T] = rows_and_length(pred, truth, "neg_pearson_loss");
  if (T < 2) throw ValidationError("neg_pearson_loss needs at least two samples");
  const auto x = pred.data(), y = truth.data();
  // Per row: centred copies and the normalisers of r = sxy / sqrt(sxx * syy).
  std::vector<double> xc(x.size()), yc(y.size()), sxx(rows), syy(rows), r(rows);
  double total = 0;
  for (std::int64_t n = 0; n < rows; ++n) {
    const std::int64_t o = n * T;
    double mx = 0, my = 0;
    for (std::int64_t t = 0; t < T; ++t) {
      mx += x[o + t];
      my += y[o + t];
    }
    mx /= static_cast<double>(T);
    my /= static_cast<double>(T);
    double sxy = 0;
    for (std::int64_t t = 0; t < T; ++t) {
      xc[o + t] = x[o + t] - mx;
      yc[o + t] = y[o + t] - my;
      sxx[n] += xc[o + t] * xc[o + t];
      syy[n] += yc[o + t] * yc[o + t];
      sxy += xc[o + t] * yc[o + t];
    }
    if (!(sxx[n] > 0) || !(syy[n] > 0)) throw DegenerateSignalError("neg_pearson_loss: constant signal");
    r[n] = sxy / std::sqrt(sxx[n] * syy[n]);
    total += 1.0 - r[n];
  }
  const S value = static_cast<S>(total / static_cast<double>(rows));
  return record_op(make_result(Shape{}, std::vector<S>{value}), {pred, truth},
                   [xc = std::move(xc), yc = std::move(yc), sxx, syy, r, rows = rows, T = T](auto go, auto gi) {
                     const double scale = static_cast<double>(go[0]) / static_cast<double>(rows);
                     for (std::int64_t n = 0; n < rows; ++n) {
                       const std::int64_t o = n * T;
                       const double norm = std::sqrt(sxx[n] * syy[n]);
                       // d(1 - r)/dx_t = -(yc_t / norm - r * xc_t / sxx); symmetric in y.
                       if (gi[0])
                         for (std::int64_t t = 0; t < T; ++t)
                           (*gi[0])[o + t] -= static_cast<S>(scale * (yc[o + t] / norm - r[n] * xc[o + t] / sxx[n]));
                       if (gi[1])
                         for (std::int64_t t = 0; t < T; ++t)
                           (*gi[1])[o + t] -= static_cast<S>(scale * (xc[o + t] / norm - r[n] * yc[o + t] / syy[n]));
                     }
                   });
}

template <typename S>
BasicTensor<S> mse_loss(const BasicTensor<S>& pred, const BasicTensor<S>& truth) {
  rows_and_length(pred, truth, "mse_loss");
  const auto diff = sub(pred, truth);
  return mean(mul(diff, diff));
}

double neg_pearson_loss(const PulseSignal& pred, const PulseSignal& truth) {
  const auto n = static_cast<std::int64_t>(pred.size());
  if (pred.size() != truth.size()) throw ShapeError("neg_pearson_loss length mismatch");
  return neg_pearson_loss(Tensor64(Shape{n}, pred.samples), Tensor64(Shape{n}, truth.samples)).item();
}

double mse_loss(const PulseSignal& pred, const PulseSignal& truth) {
  if (pred.size() != truth.size() || pred.size() == 0) throw ShapeError("mse_loss length mismatch");
  const auto n = static_cast<std::int64_t>(pred.size());
  return mse_loss(Tensor64(Shape{n}, pred.samples), Tensor64(Shape{n}, truth.samples)).item();
}

// ---------------------------------------------------------------------------

template <typename S>
void adam_step(std::span<BasicTensor<S>* const> params, std::span<const BasicTensor<S>> grads, AdamState& state,
               double learning_rate) {
  if (params.size() != grads.size()) throw ValidationError("adam_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("adam_step: gradient shape " + to_string(grads[i].shape()) + " does not match parameter " +
                       to_string(params[i]->shape()));
    }
    for (S g : grads[i].data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw ValidationError("adam_step: non-finite gradient in parameter " + std::to_string(i) + "; step aborted");
      }
    }
  }
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->size(), 0.0);
      state.second_moment.emplace_back(p->size(), 0.0);
    }
  } else if (state.first_moment.size() != params.size()) {
    throw ValidationError("adam_step: optimizer state belongs to a different parameter set");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->mutable_data();
    const auto g = grads[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      theta[k] = static_cast<S>(theta[k] - learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ValidationError("learning rate must be positive");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (clip_length < 2) throw ValidationError("clip length must be >= 2");
  if (model.kind == VariantKind::Cnn3dEd && clip_length % 4 != 0) {
    throw ValidationError("3dcnn-ed needs a clip length divisible by 4, got " + std::to_string(clip_length));
  }
  if (clip_grad_norm && !(*clip_grad_norm > 0)) throw ValidationError("gradient clipping norm must be positive");
  if (!(rate > 0)) throw ValidationError("rate must be positive");
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& epoch_losses) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < epoch_losses.size(); ++e) out << e + 1 << ',' << epoch_losses[e] << '\n';
  write_file_atomic(path, out.str());
}

namespace {

struct Window {
  std::size_t sample;
  std::int64_t start;
};

std::vector<float> znormalized_window(const PulseSignal& signal, std::int64_t start, std::int64_t length) {
  std::vector<float> out(static_cast<std::size_t>(length));
  double mu = 0, ss = 0;
  for (std::int64_t t = 0; t < length; ++t) mu += signal.samples[static_cast<std::size_t>(start + t)];
  mu /= static_cast<double>(length);
  for (std::int64_t t = 0; t < length; ++t) {
    const double d = signal.samples[static_cast<std::size_t>(start + t)] - mu;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(length));
  if (!(sd > 0)) throw DegenerateSignalError("ground-truth window is constant");
  for (std::int64_t t = 0; t < length; ++t) {
    out[static_cast<std::size_t>(t)] =
        static_cast<float>((signal.samples[static_cast<std::size_t>(start + t)] - mu) / sd);
  }
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TrainingSample>& dataset, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");
  const std::int64_t T = config.clip_length;
  std::vector<Window> windows;
  Shape frame_shape;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    s.clip.validate();
    if (std::abs(s.clip.fps - config.rate) > 1e-9 || std::abs(s.signal.rate - config.rate) > 1e-9) {
      throw ValidationError("sample " + std::to_string(i) + " is not at " + std::to_string(config.rate) + " Hz");
    }
    if (static_cast<std::int64_t>(s.signal.size()) != s.clip.length()) {
      throw ValidationError("sample " + std::to_string(i) + ": signal length differs from clip length");
    }
    if (s.clip.length() < T) {
      throw ValidationError("sample " + std::to_string(i) + " is shorter than the clip length " + std::to_string(T));
    }
    const Shape fs{s.clip.frames.dim(2), s.clip.frames.dim(3)};
    if (frame_shape.empty()) frame_shape = fs;
    if (fs != frame_shape) throw ValidationError("all training clips must share one frame size");
    for (std::int64_t start = 0; start + T <= s.clip.length(); start += T) windows.push_back({i, start});
  }

  TrainResult result{PhysNet<float>(config.model), {}};
  PhysNet<float>& model = result.model;
  auto named = model.parameters();
  std::vector<Tensor*> params;
  for (auto& n : named) params.push_back(n.tensor);
  AdamState adam;

  const std::int64_t H = frame_shape[0], W = frame_shape[1];
  const std::int64_t frame_volume = H * W;
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    // Fisher-Yates with the counter generator keeps the order platform-independent.
    std::vector<std::size_t> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    CounterRng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t bn = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), order.size() - b0);
      const auto n = static_cast<std::int64_t>(bn);
      std::vector<float> frames(static_cast<std::size_t>(n * 3 * T * frame_volume));
      std::vector<float> target;
      target.reserve(static_cast<std::size_t>(n * T));
      for (std::size_t k = 0; k < bn; ++k) {
        const Window& w = windows[order[b0 + k]];
        const auto& sample = dataset[w.sample];
        const auto src = sample.clip.frames.data();
        const std::int64_t L = sample.clip.length();
        for (std::int64_t c = 0; c < 3; ++c) {
          std::copy_n(src.begin() + (c * L + w.start) * frame_volume, T * frame_volume,
                      frames.begin() + ((static_cast<std::int64_t>(k) * 3 + c) * T) * frame_volume);
        }
        auto z = znormalized_window(sample.signal, w.start, T);
        target.insert(target.end(), z.begin(), z.end());
      }
      const Tensor batch(Shape{n, 3, T, H, W}, std::move(frames));
      const Tensor truth(Shape{n, T}, std::move(target));

      Tape<float> tape;
      Tensor loss;
      {
        TapeScope<float> scope(tape);
        const Tensor pred = model.forward(batch, true);
        loss = config.loss == LossKind::NegPearson ? neg_pearson_loss(pred, truth) : mse_loss(pred, truth);
      }
      const auto grads = tape.backward(loss);
      std::vector<Tensor> grad_list;
      grad_list.reserve(params.size());
      for (auto* p : params) {
        grad_list.push_back(grads.contains(*p) ? grads.of(*p) : Tensor::zeros(p->shape()));
      }
      if (config.clip_grad_norm) {
        double sq = 0;
        for (const auto& g : grad_list)
          for (float v : g.data()) sq += static_cast<double>(v) * v;
        const double norm = std::sqrt(sq);
        if (norm > *config.clip_grad_norm) {
          const float factor = static_cast<float>(*config.clip_grad_norm / norm);
          for (auto& g : grad_list)
            for (auto& v : g.mutable_data()) v *= factor;
        }
      }
      adam_step<float>(params, grad_list, adam, config.learning_rate);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(bn);
    }

    const double mean_loss = loss_sum / static_cast<double>(windows.size());
    result.epoch_losses.push_back(mean_loss);
    if (!config.checkpoint.empty()) save_checkpoint(config.checkpoint, model, CheckpointInfo{epoch});
    if (!config.loss_csv.empty()) write_loss_csv(config.loss_csv, result.epoch_losses);
    if (on_epoch) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      on_epoch(EpochReport{epoch, mean_loss, secs});
    }
  }
  return result;
}

template BasicTensor<float> neg_pearson_loss<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> neg_pearson_loss<double>(const BasicTensor<double>&, const BasicTensor<double>&);
template BasicTensor<float> mse_loss<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> mse_loss<double>(const BasicTensor<double>&, const BasicTensor<double>&);
template void adam_step<float>(std::span<BasicTensor<float>* const>, std::span<const BasicTensor<float>>, AdamState&,
                               double);
template void adam_step<double>(std::span<BasicTensor<double>* const>, std::span<const BasicTensor<double>>,
                                AdamState&, double);

}  // namespace physnet
