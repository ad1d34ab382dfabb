#pragma once

// Paired evaluation of recovered and ground-truth pulses: HR and HRV per
// clip, then SD / RMSE / MAE / Pearson R across clips.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "physnet/hrv.hpp"
#include "physnet/models.hpp"
#include "physnet/pulse.hpp"
#include "physnet/train.hpp"

namespace physnet {

struct Metrics {
  double sd = 0;  // population SD of the signed error pred - truth
  double rmse = 0;
  double mae = 0;
  std::optional<double> r;  // absent when the truth is constant
  std::size_t count = 0;
};

// Throws on length mismatch, fewer than two pairs or constant truth.
Metrics metrics(std::span<const double> pred, std::span<const double> truth);
// Same, but leaves `r` empty instead of throwing when the truth is constant.
Metrics error_metrics(std::span<const double> pred, std::span<const double> truth);

double pearson(std::span<const double> a, std::span<const double> b);

struct EvalOptions {
  PipelineOptions prediction = PipelineOptions::ppg();
  PipelineOptions truth = PipelineOptions::ppg();
  double hrv_min_duration_s = 60.0;
};

struct ClipOutcome {
  std::string id;
  std::optional<std::string> error;  // set when the clip was excluded
  double hr_pred = 0;
  double hr_truth = 0;
  std::optional<HrvFeatures> hrv_pred;
  std::optional<HrvFeatures> hrv_truth;
  double waveform_r = 0;      // processed prediction vs processed truth
  double peak_offset_ms = 0;  // mean distance from each predicted peak to the nearest true peak
};

struct MetricReport {
  std::optional<Metrics> hr, rf, lf, hf, lf_hf;
  double mean_waveform_r = 0;
  double mean_peak_offset_ms = 0;
  std::size_t clips_total = 0;
  std::size_t clips_used = 0;
  std::size_t hrv_clips = 0;
  std::vector<ClipOutcome> clips;

  nlohmann::json to_json() const;
};

struct SignalPair {
  std::string id;
  PulseSignal prediction;
  PulseSignal truth;
};

// Clips whose pipeline fails are excluded and reported; throws
// ValidationError when fewer than two clips remain.
MetricReport evaluate_signals(const std::vector<SignalPair>& pairs, const EvalOptions& options = {});

// Runs the model over every clip, then evaluate_signals.
MetricReport evaluate(PhysNet<float>& model, const std::vector<TrainingSample>& clips, const EvalOptions& options = {},
                      const std::vector<std::string>& ids = {});

void write_report_json(const std::filesystem::path& path, const MetricReport& report);
void write_clip_csv(const std::filesystem::path& path, const MetricReport& report);

}  // namespace physnet
