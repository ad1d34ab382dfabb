#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "physnet/errors.hpp"
#include "physnet/eval.hpp"
#include "physnet/random.hpp"

using namespace physnet;

namespace {

constexpr double kPi = std::numbers::pi;

// A pulse whose maxima sit exactly on beats with respiratory modulation:
// the phase advances linearly by 2 pi between consecutive beats.
PulseSignal beat_signal(double hr_bpm, double resp_hz, double seconds, double rate = 30.0) {
  std::vector<double> beats{0.3};
  const double mean_s = 60.0 / hr_bpm;
  while (beats.back() < seconds + 2) {
    const double t = beats.back();
    beats.push_back(t + mean_s * (1 + 0.05 * std::sin(2 * kPi * resp_hz * t)));
  }
  PulseSignal s;
  s.rate = rate;
  std::size_t k = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(seconds * rate); ++i) {
    const double t = i / rate;
    double phase;
    if (t < beats[0]) {
      phase = 2 * kPi * (t - beats[0]) / (beats[1] - beats[0]);
    } else {
      while (beats[k + 1] <= t) ++k;
      phase = 2 * kPi * (t - beats[k]) / (beats[k + 1] - beats[k]);
    }
    s.samples.push_back(std::cos(phase));
  }
  return s;
}

}  // namespace

TEST_CASE("metrics examples") {
  const std::vector<double> t{60, 72, 90, 110};
  auto m = metrics(t, t);
  CHECK(m.sd == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.mae == 0.0);
  CHECK(*m.r == doctest::Approx(1.0));
  CHECK(m.count == 4);

  std::vector<double> p = t;
  for (double& v : p) v += 2;
  m = metrics(p, t);
  CHECK(m.sd == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.rmse == doctest::Approx(2.0));
  CHECK(m.mae == doctest::Approx(2.0));
  CHECK(*m.r == doctest::Approx(1.0));

  m = metrics(std::vector<double>{1, 2, 4}, std::vector<double>{1, 2, 3});
  CHECK(m.mae == doctest::Approx(1.0 / 3.0));
  CHECK(m.rmse == doctest::Approx(std::sqrt(1.0 / 3.0)));
  CHECK(m.rmse == doctest::Approx(0.5774).epsilon(1e-4));
  // Population SD of errors {0, 0, 1}.
  CHECK(m.sd == doctest::Approx(std::sqrt(2.0) / 3.0));
}

TEST_CASE("metrics errors") {
  CHECK_THROWS_AS(metrics(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ValidationError);
  CHECK_THROWS_AS(metrics(std::vector<double>{1}, std::vector<double>{1}), ValidationError);
  CHECK_THROWS_AS(metrics(std::vector<double>{1, 2}, std::vector<double>{3, 3}), DegenerateSignalError);
  const auto m = error_metrics(std::vector<double>{1, 2}, std::vector<double>{3, 3});
  CHECK_FALSE(m.r.has_value());
  CHECK(m.mae == doctest::Approx(1.5));
}

TEST_CASE("metric invariants on random data") {
  CounterRng rng(1);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> p(n), t(n), ap(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng.uniform(40, 160);
      p[i] = t[i] + rng.uniform(-20, 20) * rng.uniform();
    }
    const double a = rng.uniform(0.01, 20), b = rng.uniform(-50, 50);
    for (std::size_t i = 0; i < n; ++i) ap[i] = a * p[i] + b;
    const auto m = metrics(p, t);
    CHECK(m.rmse >= m.mae);
    CHECK(m.mae >= 0.0);
    CHECK(m.sd <= m.rmse + 1e-12);
    CHECK(*m.r >= -1.0);
    CHECK(*m.r <= 1.0);
    CHECK(*metrics(ap, t).r == doctest::Approx(*m.r).epsilon(1e-9));
  }
}

TEST_CASE("truth evaluated against itself gives the zero-error report") {
  std::vector<SignalPair> pairs;
  const double hrs[] = {58, 66, 75, 84, 97, 112};
  const double resp[] = {0.2, 0.25, 0.3, 0.22, 0.28, 0.33};
  for (int i = 0; i < 6; ++i) {
    const auto s = beat_signal(hrs[i], resp[i], 90.0);
    pairs.push_back({"c" + std::to_string(i), s, s});
  }
  const auto rep = evaluate_signals(pairs);
  CHECK(rep.clips_used == 6);
  CHECK(rep.hrv_clips == 6);
  for (const auto* m : {&rep.hr, &rep.rf, &rep.lf, &rep.hf}) {
    REQUIRE(m->has_value());
    CHECK((*m)->rmse == 0.0);
    CHECK((*m)->mae == 0.0);
    CHECK((*m)->sd == 0.0);
    CHECK(*(*m)->r == doctest::Approx(1.0));
  }
  CHECK(rep.mean_waveform_r == doctest::Approx(1.0));
  CHECK(rep.mean_peak_offset_ms == 0.0);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(rep.clips[i].hr_truth - hrs[i]) < 1.0);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(rep.clips[i].hrv_truth->rf_hz - resp[i]) <= 0.02);

  const auto j = rep.to_json();
  CHECK(j["HR"]["rmse"] == 0.0);
  CHECK(j["clips"].size() == 6);
  CHECK(j["excluded"].empty());
}

TEST_CASE("short clips contribute HR only") {
  std::vector<SignalPair> pairs;
  for (double hr : {65.0, 80.0, 95.0}) {
    const auto s = beat_signal(hr, 0.25, 20.0);
    pairs.push_back({std::to_string(hr), s, s});
  }
  const auto rep = evaluate_signals(pairs);
  CHECK(rep.hr.has_value());
  CHECK(rep.hrv_clips == 0);
  CHECK_FALSE(rep.rf.has_value());
  CHECK(rep.to_json()["RF"].is_null());
}

TEST_CASE("failing clips are excluded and reported") {
  std::vector<SignalPair> pairs;
  for (double hr : {65.0, 80.0}) {
    const auto s = beat_signal(hr, 0.25, 20.0);
    pairs.push_back({std::to_string(hr), s, s});
  }
  PulseSignal flat;
  flat.samples.assign(600, 1.0);
  pairs.push_back({"flat", flat, beat_signal(70, 0.25, 20.0)});
  const auto rep = evaluate_signals(pairs);
  CHECK(rep.clips_total == 3);
  CHECK(rep.clips_used == 2);
  const auto j = rep.to_json();
  REQUIRE(j["excluded"].size() == 1);
  CHECK(j["excluded"][0]["id"] == "flat");

  pairs.erase(pairs.begin());
  CHECK_THROWS_AS(evaluate_signals(pairs), ValidationError);
}

TEST_CASE("a single clip cannot be evaluated") {
  const auto s = beat_signal(70, 0.25, 20.0);
  CHECK_THROWS_AS(evaluate_signals({{"only", s, s}}), ValidationError);
}

TEST_CASE("report files") {
  std::vector<SignalPair> pairs;
  for (double hr : {65.0, 80.0, 95.0}) {
    const auto s = beat_signal(hr, 0.25, 70.0);
    auto p = s;
    for (double& v : p.samples) v *= 3.0;
    pairs.push_back({std::to_string(int(hr)), p, s});
  }
  const auto rep = evaluate_signals(pairs);
  const auto dir = std::filesystem::temp_directory_path() / "physnet_test_eval";
  std::filesystem::create_directories(dir);
  write_report_json(dir / "r.json", rep);
  write_clip_csv(dir / "c.csv", rep);
  std::ifstream in(dir / "r.json");
  const auto j = nlohmann::json::parse(in);
  for (const char* k : {"HR", "RF", "LF", "HF", "LF_HF"}) CHECK(j.contains(k));
  CHECK(j["HR"].contains("sd"));
  CHECK(j["HR"].contains("rmse"));
  CHECK(j["HR"].contains("mae"));
  CHECK(j["HR"].contains("r"));
  std::ifstream csv(dir / "c.csv");
  std::string line;
  int rows = 0;
  std::getline(csv, line);
  CHECK(line.rfind("id,hr_pred,hr_truth", 0) == 0);
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);
  std::filesystem::remove_all(dir);
}
