#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "physnet/models.hpp"
#include "physnet/tensor.hpp"

namespace physnet {

enum class LossKind { NegPearson, Mse };

std::string_view loss_name(LossKind kind);
LossKind parse_loss(std::string_view name);

// 1 - Pearson r between prediction and truth, averaged over rows of [N, T]
// (or a single [T] pair). Range [0, 2]. Throws DegenerateSignalError when a
// row has zero variance.
template <typename S>
BasicTensor<S> neg_pearson_loss(const BasicTensor<S>& pred, const BasicTensor<S>& truth);

// Mean squared difference over all elements.
template <typename S>
BasicTensor<S> mse_loss(const BasicTensor<S>& pred, const BasicTensor<S>& truth);

double neg_pearson_loss(const PulseSignal& pred, const PulseSignal& truth);
double mse_loss(const PulseSignal& pred, const PulseSignal& truth);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam update applied in place. Moments are allocated on the
// first call. A non-finite gradient aborts the step before anything changes.
template <typename S>
void adam_step(std::span<BasicTensor<S>* const> params, std::span<const BasicTensor<S>> grads, AdamState& state,
               double learning_rate);

struct TrainConfig {
  ModelConfig model;
  std::int64_t clip_length = 64;
  double learning_rate = 1e-4;
  std::int64_t epochs = 15;
  std::int64_t batch_size = 4;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::NegPearson;
  double rate = 30.0;                   // required fps of clips and signals
  std::optional<double> clip_grad_norm;  // off unless set
  std::filesystem::path checkpoint;      // written after every epoch when set
  std::filesystem::path loss_csv;        // epoch,mean_loss

  void validate() const;
};

struct TrainingSample {
  VideoClip clip;
  PulseSignal signal;
};

struct EpochReport {
  std::int64_t epoch = 0;  // 1-based
  double mean_loss = 0;
  double seconds = 0;
};

struct TrainResult {
  PhysNet<float> model;
  std::vector<double> epoch_losses;
};

using EpochCallback = std::function<void(const EpochReport&)>;

// Clips longer than clip_length are cut into non-overlapping windows.
TrainResult train(const TrainConfig& config, const std::vector<TrainingSample>& dataset,
                  const EpochCallback& on_epoch = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& epoch_losses);

}  // namespace physnet
