#include <doctest.h>

#include <cmath>
#include <numbers>

#include "physnet/errors.hpp"
#include "physnet/hrv.hpp"
#include "physnet/random.hpp"

using namespace physnet;

namespace {

constexpr double kPi = std::numbers::pi;

// Beats whose interval depends on the time of the opening beat:
// ibi = mean + sum_i amp * sin(2 pi f_i t_peak).
IbiSeries modulated(std::vector<double> freqs, double seconds, double amp = 50.0, double mean_ms = 1000.0,
                    double t0 = 0.5) {
  IbiSeries s;
  s.peak_times.push_back(t0);
  while (s.peak_times.back() < seconds + t0) {
    const double t = s.peak_times.back();
    double ms = mean_ms;
    for (double f : freqs) ms += amp * std::sin(2 * kPi * f * t);
    s.peak_times.push_back(t + ms / 1000.0);
    s.intervals_ms.push_back(ms);
  }
  return s;
}

double argmax_freq(const IbiSpectrum& s, double lo, double hi) {
  double best = -1, at = 0;
  for (std::size_t k = 0; k < s.freqs.size(); ++k)
    if (s.freqs[k] >= lo && s.freqs[k] <= hi && s.power[k] > best) {
      best = s.power[k];
      at = s.freqs[k];
    }
  return at;
}

double power_at(const IbiSpectrum& s, double f) {
  std::size_t k = 0;
  while (k + 1 < s.freqs.size() && std::abs(s.freqs[k + 1] - f) < std::abs(s.freqs[k] - f)) ++k;
  return s.power[k];
}

}  // namespace

TEST_CASE("Welch spectrum matches frozen reference values") {
  const auto ibi = modulated({0.25}, 120.0);
  const auto s = ibi_spectrum(ibi);
  s.validate();
  REQUIRE(s.freqs.size() == 33);
  CHECK(s.freqs.back() == doctest::Approx(0.5));
  // scipy.signal.welch(hann, nperseg=256, noverlap=128, density) on the same
  // 4 Hz resampled series.
  CHECK(s.power[16] == doctest::Approx(35149.11958259278).epsilon(1e-9));
  CHECK(s.power[17] == doctest::Approx(8774.120933429254).epsilon(1e-9));
  CHECK(s.power[32] == doctest::Approx(62.0309629599293).epsilon(1e-8));
  CHECK(s.power[30] == doctest::Approx(0.003959881884042835).epsilon(1e-5));
  CHECK(s.power[0] == doctest::Approx(0.002303008636415205).epsilon(1e-5));
  CHECK(std::abs(s.power[5] - 6.219746068361044e-06) < 1e-8);
}

TEST_CASE("modulated intervals put the spectral peak at the modulation frequency") {
  const auto s = ibi_spectrum(modulated({0.25}, 120.0));
  CHECK(std::abs(argmax_freq(s, 0.0, 0.5) - 0.25) <= 0.02);
  for (double f : {0.1, 0.2, 0.3}) {
    const auto sf = ibi_spectrum(modulated({f}, 180.0));
    CHECK(std::abs(argmax_freq(sf, 0.0, 0.5) - f) <= 0.02);
  }
}

TEST_CASE("two equal modulations give two comparable peaks") {
  // Linear interpolation between beats attenuates by sinc^2(f * ibi); at a
  // 700 ms mean interval the 0.3 Hz line keeps ~90% of the 0.1 Hz height.
  const auto s = ibi_spectrum(modulated({0.1, 0.3}, 256.0, 30.0, 700.0));
  const double a = argmax_freq(s, 0.05, 0.2), b = argmax_freq(s, 0.2, 0.45);
  CHECK(std::abs(a - 0.1) <= 0.02);
  CHECK(std::abs(b - 0.3) <= 0.02);
  const double pa = power_at(s, a), pb = power_at(s, b);
  CHECK(std::abs(pa - pb) / std::max(pa, pb) < 0.2);
}

TEST_CASE("constant intervals carry no band power") {
  const auto s = ibi_spectrum(modulated({}, 120.0));
  double total = 0;
  for (std::size_t k = 0; k < s.freqs.size(); ++k)
    if (s.freqs[k] > 0.04 && s.freqs[k] <= 0.4) total += s.power[k];
  CHECK(total < 1e-6);
  CHECK_THROWS_AS(hrv_features(s), DegenerateSignalError);
}

TEST_CASE("spectrum preconditions") {
  CHECK_THROWS_AS(ibi_spectrum(modulated({0.25}, 10.0)), DegenerateSignalError);  // too few intervals
  CHECK_THROWS_AS(ibi_spectrum(modulated({0.25}, 25.0, 50.0, 400.0)), DegenerateSignalError);  // span < 30 s
}

TEST_CASE("hrv feature examples") {
  const auto hf = hrv_features(modulated({0.25}, 120.0));
  CHECK(hf.hf_nu > 0.9);
  CHECK(std::abs(hf.rf_hz - 0.25) <= 0.02);

  const auto lf = hrv_features(modulated({0.10}, 120.0));
  CHECK(lf.lf_nu > 0.9);
  CHECK(lf.lf_hf_ratio > 9.0);
}

TEST_CASE("flat spectrum splits by band width") {
  IbiSpectrum s;
  for (int k = 0; k <= 500; ++k) {
    s.freqs.push_back(k / 1000.0);
    s.power.push_back(3.0);
  }
  const auto f = hrv_features(s);
  CHECK(f.lf_nu == doctest::Approx(0.11 / 0.36).epsilon(1e-12));
  CHECK(f.lf_nu == doctest::Approx(0.3056).epsilon(1e-3));
  CHECK(f.hf_nu == doctest::Approx(0.25 / 0.36).epsilon(1e-12));
  CHECK(f.lf_hf_ratio == doctest::Approx(0.11 / 0.25).epsilon(1e-12));
}

TEST_CASE("flat spectrum on a grid that misses the band edges") {
  IbiSpectrum s;
  for (int k = 0; k <= 32; ++k) {
    s.freqs.push_back(k * 4.0 / 256.0);
    s.power.push_back(1.0);
  }
  CHECK(hrv_features(s).lf_nu == doctest::Approx(0.11 / 0.36).epsilon(1e-12));
}

TEST_CASE("hrv features: normalised units, scale invariance and RF range") {
  CounterRng rng(1);
  for (int inst = 0; inst < 40; ++inst) {
    std::vector<double> freqs{rng.uniform(0.05, 0.14)};
    if (rng.uniform() < 0.7) freqs.push_back(rng.uniform(0.16, 0.38));
    auto ibi = modulated(freqs, rng.uniform(60, 200), rng.uniform(10, 60), rng.uniform(600, 1100));
    const auto s = ibi_spectrum(ibi);
    const auto f = hrv_features(s);
    CHECK(f.lf_nu + f.hf_nu == 1.0);
    CHECK(f.lf_nu >= 0.0);
    CHECK(f.hf_nu >= 0.0);
    CHECK(f.rf_hz >= 0.15);
    CHECK(f.rf_hz <= 0.4);
    if (f.hf_nu > 0) CHECK(f.lf_hf_ratio == doctest::Approx(f.lf_nu / f.hf_nu));

    IbiSpectrum scaled = s;
    const double c = rng.uniform(1e-3, 1e3);
    for (double& p : scaled.power) p *= c;
    const auto g = hrv_features(scaled);
    CHECK(g.lf_nu == doctest::Approx(f.lf_nu).epsilon(1e-12));
    CHECK(g.rf_hz == f.rf_hz);
  }
}

TEST_CASE("HF-band modulations recover RF within 0.02 Hz") {
  for (double fm : {0.2, 0.3}) {
    for (double mean_ms : {700.0, 850.0, 1000.0}) {
      const auto f = hrv_features(modulated({fm}, 150.0, 40.0, mean_ms));
      CHECK(std::abs(f.rf_hz - fm) <= 0.02);
    }
  }
}

TEST_CASE("zero HF power gives an infinite ratio") {
  IbiSpectrum s;
  for (int k = 0; k <= 50; ++k) {
    s.freqs.push_back(k / 100.0);
    s.power.push_back(k <= 14 ? 1.0 : 0.0);
  }
  const auto f = hrv_features(s);
  CHECK(f.hf_nu == 0.0);
  CHECK(f.lf_nu == 1.0);
  CHECK(std::isinf(f.lf_hf_ratio));
}
