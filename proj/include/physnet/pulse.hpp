#pragma once

// Test-time signal processing shared by recovered rPPG and ground truth:
// zero-phase band-pass, z-normalisation, peak detection, inter-beat
// intervals and average heart rate.

#include <array>
#include <complex>
#include <filesystem>
#include <vector>

#include "physnet/models.hpp"

namespace physnet {

struct FilterSpec {
  double low_hz = 0.7;
  double high_hz = 3.5;
  int order = 4;  // Butterworth prototype order; the band-pass has 2*order poles

  void validate(double rate) const;
  static FilterSpec ppg() { return {0.7, 3.5, 4}; }
  static FilterSpec ecg() { return {0.7, 40.0, 4}; }
};

struct BiquadSection {
  std::array<double, 3> b{};
  std::array<double, 3> a{};  // a[0] == 1
};

// Digital Butterworth band-pass (bilinear transform with pre-warping) as a
// cascade of second-order sections.
std::vector<BiquadSection> butterworth_bandpass(const FilterSpec& spec, double rate);

// Complex gain of the cascade at `freq_hz` (single pass, not forward-backward).
std::complex<double> frequency_response(const std::vector<BiquadSection>& sections, double freq_hz, double rate);

// Single causal pass with zero initial state.
std::vector<double> sosfilt(const std::vector<BiquadSection>& sections, const std::vector<double>& x);

// Forward-backward filtering with odd extension and steady-state initial
// conditions. Output has the input length.
PulseSignal bandpass(const PulseSignal& signal, const FilterSpec& spec);

PulseSignal znormalize(const PulseSignal& signal);

struct PeakOptions {
  double min_separation_s = 0.25;  // 0 disables the distance rule
  double min_prominence = 0.3;     // measured on the z-normalised signal
  double min_ibi_ms = 250.0;
  double max_ibi_ms = 2000.0;
};

struct IbiSeries {
  std::vector<double> peak_times;    // seconds, strictly increasing
  std::vector<double> intervals_ms;  // successive differences * 1000

  std::size_t size() const { return intervals_ms.size(); }
  void validate() const;
};

// Local maxima passing the separation and prominence rules, refined to
// sub-sample precision by a parabola through the three samples around each
// maximum. Throws DegenerateSignalError when nothing qualifies.
IbiSeries detect_peaks(const PulseSignal& signal, const PeakOptions& options = {});

double average_hr(const IbiSeries& ibi);

struct PipelineOptions {
  FilterSpec filter;
  PeakOptions peaks;

  static PipelineOptions ppg() { return {FilterSpec::ppg(), PeakOptions{}}; }
  // Sharp R-peaks: wide pass band, prominence rule only.
  static PipelineOptions ecg() { return {FilterSpec::ecg(), PeakOptions{0.0, 0.3, 250.0, 2000.0}}; }
};

struct PipelineResult {
  PulseSignal processed;  // filtered and z-normalised
  IbiSeries ibi;
  double hr_bpm = 0;
};

PipelineResult run_pipeline(const PulseSignal& signal, const PipelineOptions& options);

// CSV with header `t_s,value`.
void write_signal_csv(const std::filesystem::path& path, const PulseSignal& signal);
PulseSignal read_signal_csv(const std::filesystem::path& path);
// CSV with header `peak_t_s,ibi_ms`; row k pairs peak k+1 with the interval ending there.
void write_ibi_csv(const std::filesystem::path& path, const IbiSeries& ibi);

}  // namespace physnet
