#include "physnet/pulse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "physnet/errors.hpp"
#include "physnet/tensor_io.hpp"

namespace physnet {

void FilterSpec::validate(double rate) const {
  if (order < 1) throw ValidationError("filter order must be >= 1");
  if (!(rate > 0)) throw ValidationError("sampling rate must be positive");
  if (!(low_hz > 0) || !(high_hz > low_hz)) throw ValidationError("filter band must satisfy 0 < low < high");
  if (!(high_hz < rate / 2)) {
    throw ValidationError("filter high cutoff " + std::to_string(high_hz) + " Hz is not below Nyquist (" +
                          std::to_string(rate / 2) + " Hz)");
  }
}

std::vector<BiquadSection> butterworth_bandpass(const FilterSpec& spec, double rate) {
  spec.validate(rate);
  using cd = std::complex<double>;
  const int N = spec.order;
  // Work at a normalised sampling rate of 2 (Nyquist = 1).
  constexpr double fs = 2.0;
  const double wl = 2.0 * fs * std::tan(std::numbers::pi * (spec.low_hz / (rate / 2)) / fs);
  const double wh = 2.0 * fs * std::tan(std::numbers::pi * (spec.high_hz / (rate / 2)) / fs);
  const double bw = wh - wl;
  const double wo2 = wl * wh;

  std::vector<cd> poles;
  for (int m = -N + 1; m <= N - 1; m += 2) {
    const cd proto = -std::exp(cd(0.0, std::numbers::pi * m / (2.0 * N)));
    const cd lp = proto * (bw / 2.0);
    const cd root = std::sqrt(lp * lp - wo2);
    poles.push_back(lp + root);
    poles.push_back(lp - root);
  }
  // Bilinear transform. N analog zeros at s=0 map to z=1; the N zeros at
  // infinity map to z=-1.
  const double fs2 = 2.0 * fs;
  cd denom(1.0, 0.0);
  std::vector<cd> zpoles;
  for (const auto& p : poles) {
    zpoles.push_back((fs2 + p) / (fs2 - p));
    denom *= (fs2 - p);
  }
  const double gain = std::pow(bw, N) * (std::pow(fs2, N) / denom).real();

  std::vector<cd> upper, real;
  for (const auto& p : zpoles) {
    if (p.imag() > 1e-12)
      upper.push_back(p);
    else if (std::abs(p.imag()) <= 1e-12)
      real.push_back(p);
  }
  std::vector<BiquadSection> sections;
  for (const auto& p : upper) {
    BiquadSection s;
    s.b = {1.0, 0.0, -1.0};
    s.a = {1.0, -2.0 * p.real(), std::norm(p)};
    sections.push_back(s);
  }
  for (std::size_t i = 0; i + 1 < real.size(); i += 2) {
    BiquadSection s;
    s.b = {1.0, 0.0, -1.0};
    s.a = {1.0, -(real[i].real() + real[i + 1].real()), real[i].real() * real[i + 1].real()};
    sections.push_back(s);
  }
  if (sections.size() != static_cast<std::size_t>(N)) {
    throw ValidationError("butterworth design failed to pair poles for the requested band");
  }
  for (auto& c : sections.front().b) c *= gain;
  return sections;
}

std::complex<double> frequency_response(const std::vector<BiquadSection>& sections, double freq_hz, double rate) {
  const double w = 2.0 * std::numbers::pi * freq_hz / rate;
  const std::complex<double> z1 = std::polar(1.0, -w), z2 = std::polar(1.0, -2.0 * w);
  std::complex<double> h(1.0, 0.0);
  for (const auto& s : sections) {
    h *= (s.b[0] + s.b[1] * z1 + s.b[2] * z2) / (s.a[0] + s.a[1] * z1 + s.a[2] * z2);
  }
  return h;
}

namespace {

// Transposed direct form II through every section; `state` holds two delay
// values per section and is updated in place.
void filter_in_place(const std::vector<BiquadSection>& sections, std::vector<double>& x,
                     std::vector<std::array<double, 2>>& state) {
  for (std::size_t k = 0; k < sections.size(); ++k) {
    const auto& s = sections[k];
    auto& z = state[k];
    for (double& v : x) {
      const double y = s.b[0] * v + z[0];
      z[0] = s.b[1] * v - s.a[1] * y + z[1];
      z[1] = s.b[2] * v - s.a[2] * y;
      v = y;
    }
  }
}

// Steady-state delay values of the cascade for a unit step input.
std::vector<std::array<double, 2>> step_initial_state(const std::vector<BiquadSection>& sections) {
  std::vector<std::array<double, 2>> zi(sections.size());
  double scale = 1.0;
  for (std::size_t k = 0; k < sections.size(); ++k) {
    const auto& s = sections[k];
    const double B0 = s.b[1] - s.a[1] * s.b[0];
    const double B1 = s.b[2] - s.a[2] * s.b[0];
    const double z0 = (B0 + B1) / (1.0 + s.a[1] + s.a[2]);
    zi[k] = {scale * z0, scale * (B1 - s.a[2] * z0)};
    scale *= (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
  }
  return zi;
}

}  // namespace

std::vector<double> sosfilt(const std::vector<BiquadSection>& sections, const std::vector<double>& x) {
  std::vector<double> y = x;
  std::vector<std::array<double, 2>> state(sections.size(), {0.0, 0.0});
  filter_in_place(sections, y, state);
  return y;
}

PulseSignal bandpass(const PulseSignal& signal, const FilterSpec& spec) {
  signal.validate();
  const auto sections = butterworth_bandpass(spec, signal.rate);
  const std::size_t n = signal.size();
  const std::size_t edge = 3 * (2 * sections.size() + 1);
  if (n <= edge) {
    throw ValidationError("signal of " + std::to_string(n) + " samples is too short for the band-pass (needs > " +
                          std::to_string(edge) + ")");
  }
  const auto& x = signal.samples;
  std::vector<double> ext;
  ext.reserve(n + 2 * edge);
  for (std::size_t i = edge; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= edge; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto zi = step_initial_state(sections);
  auto scaled = [&](double v) {
    auto s = zi;
    for (auto& z : s) z = {z[0] * v, z[1] * v};
    return s;
  };
  auto state = scaled(ext.front());
  filter_in_place(sections, ext, state);
  std::reverse(ext.begin(), ext.end());
  state = scaled(ext.front());
  filter_in_place(sections, ext, state);
  std::reverse(ext.begin(), ext.end());

  PulseSignal out;
  out.rate = signal.rate;
  out.samples.assign(ext.begin() + static_cast<std::ptrdiff_t>(edge),
                     ext.begin() + static_cast<std::ptrdiff_t>(edge + n));
  return out;
}

PulseSignal znormalize(const PulseSignal& signal) {
  if (signal.size() < 2) throw DegenerateSignalError("znormalize needs at least two samples");
  const double n = static_cast<double>(signal.size());
  const double mu = std::accumulate(signal.samples.begin(), signal.samples.end(), 0.0) / n;
  double ss = 0;
  for (double v : signal.samples) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / n);
  if (!(sd > 0) || sd < 1e-12 * (std::abs(mu) + 1.0)) throw DegenerateSignalError("cannot normalise a constant signal");
  PulseSignal out;
  out.rate = signal.rate;
  out.samples.reserve(signal.size());
  for (double v : signal.samples) out.samples.push_back((v - mu) / sd);
  return out;
}

// ---------------------------------------------------------------------------
// Peaks

void IbiSeries::validate() const {
  if (peak_times.empty() ? !intervals_ms.empty() : intervals_ms.size() + 1 != peak_times.size()) {
    throw ValidationError("IBI series needs one interval per consecutive peak pair");
  }
  for (std::size_t k = 0; k < intervals_ms.size(); ++k) {
    if (!(peak_times[k + 1] > peak_times[k])) throw ValidationError("peak times must be strictly increasing");
    if (std::abs(intervals_ms[k] - (peak_times[k + 1] - peak_times[k]) * 1000.0) > 1e-6) {
      throw ValidationError("interval does not match its peak times");
    }
  }
}

namespace {

// Plateau-aware local maxima, endpoints excluded.
std::vector<std::size_t> local_maxima(const std::vector<double>& x) {
  std::vector<std::size_t> peaks;
  const std::size_t n = x.size();
  if (n < 3) return peaks;
  std::size_t i = 1;
  const std::size_t last = n - 1;
  while (i < last) {
    if (x[i - 1] < x[i]) {
      std::size_t ahead = i + 1;
      while (ahead < last && x[ahead] == x[i]) ++ahead;
      if (x[ahead] < x[i]) {
        peaks.push_back((i + ahead - 1) / 2);
        i = ahead;
      }
    }
    ++i;
  }
  return peaks;
}

std::vector<std::size_t> select_by_distance(const std::vector<double>& x, const std::vector<std::size_t>& peaks,
                                            std::size_t distance) {
  std::vector<bool> keep(peaks.size(), true);
  std::vector<std::size_t> order(peaks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[peaks[a]] > x[peaks[b]]; });
  for (std::size_t j : order) {
    if (!keep[j]) continue;
    for (std::size_t k = j; k-- > 0 && peaks[j] - peaks[k] < distance;) keep[k] = false;
    for (std::size_t k = j + 1; k < peaks.size() && peaks[k] - peaks[j] < distance; ++k) keep[k] = false;
  }
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < peaks.size(); ++j)
    if (keep[j]) out.push_back(peaks[j]);
  return out;
}

double prominence(const std::vector<double>& x, std::size_t peak) {
  const double h = x[peak];
  double left_min = h, right_min = h;
  for (std::size_t i = peak + 1; i-- > 0 && x[i] <= h;) left_min = std::min(left_min, x[i]);
  for (std::size_t i = peak; i < x.size() && x[i] <= h; ++i) right_min = std::min(right_min, x[i]);
  return h - std::max(left_min, right_min);
}

double refine(const std::vector<double>& x, std::size_t i) {
  const double ym = x[i - 1], y0 = x[i], yp = x[i + 1];
  const double denom = ym - 2.0 * y0 + yp;
  if (denom >= 0) return static_cast<double>(i);
  const double delta = std::clamp(0.5 * (ym - yp) / denom, -0.5, 0.5);
  return static_cast<double>(i) + delta;
}

}  // namespace

IbiSeries detect_peaks(const PulseSignal& signal, const PeakOptions& options) {
  const PulseSignal z = znormalize(signal);
  const auto& x = z.samples;
  auto peaks = local_maxima(x);
  if (options.min_separation_s > 0) {
    const auto distance = static_cast<std::size_t>(std::max(1.0, std::ceil(options.min_separation_s * z.rate)));
    peaks = select_by_distance(x, peaks, distance);
  }
  std::vector<double> times, heights;
  for (std::size_t p : peaks) {
    if (prominence(x, p) < options.min_prominence) continue;
    times.push_back(refine(x, p) / z.rate);
    heights.push_back(x[p]);
  }
  if (times.empty()) throw DegenerateSignalError("no peaks found");

  // Merge beats closer than the shortest plausible interval by keeping the
  // taller one.
  for (bool merged = true; merged;) {
    merged = false;
    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
      if ((times[k + 1] - times[k]) * 1000.0 < options.min_ibi_ms) {
        const std::size_t drop = heights[k] >= heights[k + 1] ? k + 1 : k;
        times.erase(times.begin() + static_cast<std::ptrdiff_t>(drop));
        heights.erase(heights.begin() + static_cast<std::ptrdiff_t>(drop));
        merged = true;
        break;
      }
    }
  }
  // Intervals longer than the plausible maximum (missed beats) split the
  // series; the longest run of consecutive valid beats is kept.
  std::size_t best_start = 0, best_len = 1, start = 0;
  for (std::size_t k = 1; k <= times.size(); ++k) {
    const bool breaks = k == times.size() || (times[k] - times[k - 1]) * 1000.0 > options.max_ibi_ms;
    if (breaks) {
      if (k - start > best_len) {
        best_len = k - start;
        best_start = start;
      }
      start = k;
    }
  }
  IbiSeries out;
  out.peak_times.assign(times.begin() + static_cast<std::ptrdiff_t>(best_start),
                        times.begin() + static_cast<std::ptrdiff_t>(best_start + best_len));
  for (std::size_t k = 1; k < out.peak_times.size(); ++k) {
    out.intervals_ms.push_back((out.peak_times[k] - out.peak_times[k - 1]) * 1000.0);
  }
  return out;
}

double average_hr(const IbiSeries& ibi) {
  if (ibi.intervals_ms.empty()) throw DegenerateSignalError("average_hr needs at least one interval");
  const double mean =
      std::accumulate(ibi.intervals_ms.begin(), ibi.intervals_ms.end(), 0.0) / static_cast<double>(ibi.size());
  return 60000.0 / mean;
}

PipelineResult run_pipeline(const PulseSignal& signal, const PipelineOptions& options) {
  PipelineResult r;
  r.processed = znormalize(bandpass(signal, options.filter));
  r.ibi = detect_peaks(r.processed, options.peaks);
  r.hr_bpm = average_hr(r.ibi);
  return r;
}

// ---------------------------------------------------------------------------
// CSV

void write_signal_csv(const std::filesystem::path& path, const PulseSignal& signal) {
  std::ostringstream out;
  out.precision(9);
  out << "t_s,value\n";
  for (std::size_t i = 0; i < signal.size(); ++i) {
    out << static_cast<double>(i) / signal.rate << ',' << signal.samples[i] << '\n';
  }
  write_file_atomic(path, out.str());
}

PulseSignal read_signal_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open signal file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("t_s,value", 0) != 0) {
    throw IoError("signal file " + path.string() + " lacks the t_s,value header");
  }
  std::vector<double> t, v;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("malformed signal row in " + path.string());
    try {
      t.push_back(std::stod(line.substr(0, comma)));
      v.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw IoError("malformed signal row in " + path.string());
    }
  }
  if (t.size() < 2 || !(t.back() > t.front())) throw IoError("signal file " + path.string() + " has too few samples");
  PulseSignal s;
  s.rate = static_cast<double>(t.size() - 1) / (t.back() - t.front());
  // Rates written by write_signal_csv are exact to 9 significant digits.
  s.rate = std::round(s.rate * 1e6) / 1e6;
  s.samples = std::move(v);
  return s;
}

void write_ibi_csv(const std::filesystem::path& path, const IbiSeries& ibi) {
  std::ostringstream out;
  out.precision(9);
  out << "peak_t_s,ibi_ms\n";
  for (std::size_t k = 0; k < ibi.intervals_ms.size(); ++k) {
    out << ibi.peak_times[k + 1] << ',' << ibi.intervals_ms[k] << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace physnet
