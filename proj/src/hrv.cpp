#include "physnet/hrv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "physnet/errors.hpp"

namespace physnet {

void IbiSpectrum::validate() const {
  if (freqs.size() != power.size() || freqs.size() < 2) throw ValidationError("spectrum grid and power must match");
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    if (k > 0 && !(freqs[k] > freqs[k - 1])) throw ValidationError("spectrum grid must be strictly increasing");
    if (!(power[k] >= 0)) throw ValidationError("spectral power must be non-negative");
  }
}

IbiSpectrum ibi_spectrum(const IbiSeries& ibi, const SpectrumOptions& options) {
  ibi.validate();
  if (ibi.size() < options.min_intervals) {
    throw DegenerateSignalError("HRV needs at least " + std::to_string(options.min_intervals) + " intervals, got " +
                                std::to_string(ibi.size()));
  }
  // Each interval is observed at the peak that closes it.
  const std::vector<double> t(ibi.peak_times.begin() + 1, ibi.peak_times.end());
  const auto& v = ibi.intervals_ms;
  const double span = t.back() - t.front();
  if (span < options.min_span_s) {
    throw DegenerateSignalError("HRV needs intervals spanning at least " + std::to_string(options.min_span_s) + " s");
  }

  const double fs = options.resample_hz;
  const auto n = static_cast<std::size_t>(std::floor(span * fs + 1e-9)) + 1;
  std::vector<double> x(n);
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = t.front() + static_cast<double>(i) / fs;
    while (j + 2 < t.size() && t[j + 1] < ti) ++j;
    const double u = std::clamp((ti - t[j]) / (t[j + 1] - t[j]), 0.0, 1.0);
    x[i] = v[j] + u * (v[j + 1] - v[j]);
  }
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  for (double& e : x) e -= mean;

  const std::size_t nseg = std::min(n, static_cast<std::size_t>(std::llround(options.segment_s * fs)));
  const std::size_t step = nseg - nseg / 2;
  std::vector<double> window(nseg);
  double wss = 0;
  for (std::size_t i = 0; i < nseg; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(nseg));
    wss += window[i] * window[i];
  }
  const std::size_t nbins =
      std::min(nseg / 2, static_cast<std::size_t>(std::floor(options.max_freq_hz * static_cast<double>(nseg) / fs))) + 1;

  IbiSpectrum out;
  out.freqs.resize(nbins);
  out.power.assign(nbins, 0.0);
  for (std::size_t k = 0; k < nbins; ++k) out.freqs[k] = static_cast<double>(k) * fs / static_cast<double>(nseg);

  std::size_t segments = 0;
  std::vector<double> seg(nseg);
  for (std::size_t start = 0; start + nseg <= n; start += step, ++segments) {
    const double m = std::accumulate(x.begin() + start, x.begin() + start + nseg, 0.0) / static_cast<double>(nseg);
    for (std::size_t i = 0; i < nseg; ++i) seg[i] = (x[start + i] - m) * window[i];
    for (std::size_t k = 0; k < nbins; ++k) {
      double re = 0, im = 0;
      const double w = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(nseg);
      for (std::size_t i = 0; i < nseg; ++i) {
        re += seg[i] * std::cos(w * static_cast<double>(i));
        im += seg[i] * std::sin(w * static_cast<double>(i));
      }
      double p = (re * re + im * im) / (fs * wss);
      const bool nyquist = nseg % 2 == 0 && k == nseg / 2;
      if (k != 0 && !nyquist) p *= 2.0;
      out.power[k] += p;
    }
  }
  for (double& p : out.power) p /= static_cast<double>(segments);
  return out;
}

namespace {

// Integral over [lo, hi] of the linear interpolant through the spectrum.
double band_power(const IbiSpectrum& s, double lo, double hi) {
  double total = 0;
  for (std::size_t k = 0; k + 1 < s.freqs.size(); ++k) {
    const double f0 = s.freqs[k], f1 = s.freqs[k + 1];
    const double a = std::max(lo, f0), b = std::min(hi, f1);
    if (!(b > a)) continue;
    auto at = [&](double f) { return s.power[k] + (s.power[k + 1] - s.power[k]) * (f - f0) / (f1 - f0); };
    total += 0.5 * (at(a) + at(b)) * (b - a);
  }
  return total;
}

}  // namespace

HrvFeatures hrv_features(const IbiSpectrum& spectrum) {
  spectrum.validate();
  if (spectrum.freqs.front() > kLfLow || spectrum.freqs.back() < kHfHigh) {
    throw ValidationError("spectrum must cover 0.04-0.4 Hz");
  }
  const double lf = band_power(spectrum, kLfLow, kLfHigh);
  const double hf = band_power(spectrum, kLfHigh, kHfHigh);
  if (!(lf + hf > 0)) throw DegenerateSignalError("no LF or HF power in the IBI spectrum");

  HrvFeatures out;
  out.lf_nu = lf / (lf + hf);
  out.hf_nu = 1.0 - out.lf_nu;
  out.lf_hf_ratio = out.hf_nu > 0 ? out.lf_nu / out.hf_nu : std::numeric_limits<double>::infinity();

  double best = -1;
  for (std::size_t k = 0; k < spectrum.freqs.size(); ++k) {
    const double f = spectrum.freqs[k];
    if (f < kLfHigh || f > kHfHigh) continue;
    if (spectrum.power[k] > best) {
      best = spectrum.power[k];
      out.rf_hz = f;
    }
  }
  return out;
}

}  // namespace physnet
