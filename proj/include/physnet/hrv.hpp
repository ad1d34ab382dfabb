#pragma once

// Frequency-domain HRV: the IBI series is resampled to a uniform grid and
// its Welch spectrum split into the LF and HF bands.

#include <vector>

#include "physnet/pulse.hpp"

namespace physnet {

inline constexpr double kLfLow = 0.04;
inline constexpr double kLfHigh = 0.15;  // also the HF lower edge
inline constexpr double kHfHigh = 0.40;

struct IbiSpectrum {
  std::vector<double> freqs;  // Hz, strictly increasing from 0
  std::vector<double> power;  // ms^2 / Hz

  void validate() const;
};

struct SpectrumOptions {
  double resample_hz = 4.0;
  double segment_s = 64.0;
  double max_freq_hz = 0.5;
  std::size_t min_intervals = 16;
  double min_span_s = 30.0;
};

// Linear resampling against the interval end times, mean removal, then a
// Hann-window Welch estimate with 50% overlap (one-sided density).
IbiSpectrum ibi_spectrum(const IbiSeries& ibi, const SpectrumOptions& options = {});

struct HrvFeatures {
  double lf_nu = 0;
  double hf_nu = 0;
  double lf_hf_ratio = 0;  // +inf when HF power is zero
  double rf_hz = 0;
};

// Band powers are integrals of the piecewise-linear spectrum over the exact
// band edges. Throws DegenerateSignalError when LF + HF is zero.
HrvFeatures hrv_features(const IbiSpectrum& spectrum);

inline HrvFeatures hrv_features(const IbiSeries& ibi) { return hrv_features(ibi_spectrum(ibi)); }

}  // namespace physnet
