#include "physnet/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "physnet/errors.hpp"
#include "physnet/pulse.hpp"
#include "physnet/random.hpp"
#include "physnet/tensor_io.hpp"

namespace physnet {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kDicroticAmp = 0.15;
constexpr double kDicroticCenter = 3.3;
constexpr double kDicroticConcentration = 8.0;

double raw_waveform(double phase) {
  return std::sin(phase) + 0.3 * std::sin(2.0 * phase + 0.5) +
         kDicroticAmp * std::exp(kDicroticConcentration * (std::cos(phase - kDicroticCenter) - 1.0));
}

struct WaveformConstants {
  double mean = 0;
  double scale = 1;
  double peak_phase = 0;
};

const WaveformConstants& waveform_constants() {
  static const WaveformConstants c = [] {
    WaveformConstants w;
    constexpr int n = 1 << 14;
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += raw_waveform(kTwoPi * i / n);
    w.mean = sum / n;
    double best = -1e300, worst = 1e300;
    int best_i = 0;
    for (int i = 0; i < n; ++i) {
      const double v = raw_waveform(kTwoPi * i / n);
      if (v > best) {
        best = v;
        best_i = i;
      }
      worst = std::min(worst, v);
    }
    // Golden-section refinement of the maximum within one grid step.
    double lo = kTwoPi * (best_i - 1) / n, hi = kTwoPi * (best_i + 1) / n;
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int it = 0; it < 100; ++it) {
      const double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
      if (raw_waveform(a) > raw_waveform(b))
        hi = b;
      else
        lo = a;
    }
    w.peak_phase = std::fmod(0.5 * (lo + hi) + kTwoPi, kTwoPi);
    best = raw_waveform(w.peak_phase);
    w.scale = std::max(best - w.mean, w.mean - worst);
    return w;
  }();
  return c;
}

// Low-frequency multiplicative texture: a handful of random plane waves.
struct Texture {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;

  Texture(CounterRng& rng, double h, double w) {
    for (int k = 0; k < 6; ++k) {
      Wave v;
      v.fx = rng.uniform(-3.0, 3.0) / w;
      v.fy = rng.uniform(-3.0, 3.0) / h;
      v.phase = rng.uniform(0.0, kTwoPi);
      v.amp = rng.uniform(0.01, 0.05);
      waves.push_back(v);
    }
  }

  double operator()(double y, double x) const {
    double s = 0;
    for (const auto& v : waves) s += v.amp * std::cos(kTwoPi * (v.fx * x + v.fy * y) + v.phase);
    return s;
  }
};

// Stream labels for derive_seed, one per independent source of randomness.
enum Stream : std::uint64_t { kPhase = 1, kTexture = 2, kNoise = 3, kJitter = 4, kDrift = 5 };

}  // namespace

double pulse_waveform(double phase) {
  const auto& c = waveform_constants();
  return (raw_waveform(phase) - c.mean) / c.scale;
}

double pulse_peak_phase() { return waveform_constants().peak_phase; }

void SynthSpec::validate() const {
  if (frames < 1) throw ValidationError("synthetic clip needs at least one frame");
  if (height < 1 || width < 1) throw ValidationError("synthetic frame size must be positive");
  if (!(fps > 0)) throw ValidationError("fps must be positive");
  const double start = hr_bpm - hr_drift_bpm / 2, end = hr_bpm + hr_drift_bpm / 2;
  if (!(start >= 45.0 && end <= 150.0 && end >= 45.0 && start <= 150.0)) {
    throw ValidationError("heart rate must stay within [45, 150] bpm");
  }
  if (!(amplitude >= 0) || !(noise_sigma >= 0) || !(drift_amplitude >= 0) || jitter < 0) {
    throw ValidationError("synthetic amplitudes must be non-negative");
  }
}

SynthClip generate(const SynthSpec& spec) {
  spec.validate();
  const auto& wc = waveform_constants();
  const std::int64_t T = spec.frames, H = spec.height, W = spec.width;
  const double duration = static_cast<double>(T) / spec.fps;

  // Instantaneous frequency drifts linearly around hr_bpm:
  // phase(t) = phi0 + 2*pi*(a*t + b*t^2).
  CounterRng phase_rng(derive_seed(spec.seed, kPhase));
  const double phi0 = phase_rng.uniform(0.0, kTwoPi);
  const double a = (spec.hr_bpm - spec.hr_drift_bpm / 2) / 60.0;
  const double b = spec.hr_drift_bpm / (120.0 * duration);
  auto phase_at = [&](double t) { return phi0 + kTwoPi * (a * t + b * t * t); };

  SynthClip out;
  out.pulse.rate = spec.fps;
  out.pulse.samples.resize(static_cast<std::size_t>(T));
  for (std::int64_t i = 0; i < T; ++i) out.pulse.samples[i] = pulse_waveform(phase_at(i / spec.fps));

  // Peak k sits where the phase crosses peak_phase + 2*pi*k.
  for (double k = std::ceil((phi0 - wc.peak_phase) / kTwoPi - 1.0);; k += 1.0) {
    const double cycles = (wc.peak_phase + kTwoPi * k - phi0) / kTwoPi;
    double t;
    if (b == 0.0)
      t = cycles / a;
    else
      t = (-a + std::sqrt(a * a + 4.0 * b * cycles)) / (2.0 * b);
    if (!(cycles >= 0)) continue;
    if (t >= duration) break;
    out.peak_times.push_back(t);
  }

  CounterRng texture_rng(derive_seed(spec.seed, kTexture));
  const double hd = static_cast<double>(H), wd = static_cast<double>(W);
  const Texture skin(texture_rng, hd, wd), background(texture_rng, hd, wd);
  const std::array<double, 3> skin_color{0.75, 0.55, 0.45};
  const std::array<double, 3> bg_color{0.30, 0.35, 0.40};
  // Green carries the full modulation, red and blue half of it.
  const std::array<double, 3> channel_gain{0.5, 1.0, 0.5};

  CounterRng drift_rng(derive_seed(spec.seed, kDrift));
  const double drift_freq = drift_rng.uniform(0.05, 0.3);
  const double drift_phase = drift_rng.uniform(0.0, kTwoPi);

  CounterRng noise_rng(derive_seed(spec.seed, kNoise));
  CounterRng jitter_rng(derive_seed(spec.seed, kJitter));

  auto inside = [&](double y, double x) {
    if (spec.mask == MaskKind::HalfFrame) return y < hd / 2;
    const double dy = (y + 0.5 - hd / 2) / (0.45 * hd), dx = (x + 0.5 - wd / 2) / (0.35 * wd);
    return dx * dx + dy * dy <= 1.0;
  };

  Tensor frames = Tensor::zeros({3, T, H, W});
  float* data = frames.mutable_data().data();
  for (std::int64_t t = 0; t < T; ++t) {
    const double time = t / spec.fps;
    const double p = out.pulse.samples[t];
    const double drift = spec.drift_amplitude * std::sin(kTwoPi * drift_freq * time + drift_phase);
    std::int64_t dy = 0, dx = 0;
    if (spec.jitter > 0) {
      const auto span = static_cast<std::uint64_t>(2 * spec.jitter + 1);
      dy = static_cast<std::int64_t>(jitter_rng.below(span)) - spec.jitter;
      dx = static_cast<std::int64_t>(jitter_rng.below(span)) - spec.jitter;
    }
    for (std::int64_t y = 0; y < H; ++y) {
      // The scene translates by (dy, dx); pixels uncovered at the border
      // repeat the edge of the scene.
      const double sy = static_cast<double>(std::clamp<std::int64_t>(y - dy, 0, H - 1));
      for (std::int64_t x = 0; x < W; ++x) {
        const double sx = static_cast<double>(std::clamp<std::int64_t>(x - dx, 0, W - 1));
        const bool skin_px = inside(sy, sx);
        const double tex = skin_px ? skin(sy, sx) : background(sy, sx);
        for (int c = 0; c < 3; ++c) {
          const double base = (skin_px ? skin_color[c] : bg_color[c]) * (1.0 + tex);
          double v = base * (1.0 + (skin_px ? spec.amplitude * channel_gain[c] * p : 0.0)) * (1.0 + drift);
          if (spec.noise_sigma > 0) v += spec.noise_sigma * noise_rng.normal();
          if (v < 0.0 || v > 1.0) {
            ++out.clamped_pixels;
            v = std::clamp(v, 0.0, 1.0);
          }
          data[((c * T + t) * H + y) * W + x] = static_cast<float>(v);
        }
      }
    }
  }
  if (out.clamped_pixels > 0) {
    std::fprintf(stderr, "warning: %lld pixel values clamped to [0,1] (seed %llu)\n",
                 static_cast<long long>(out.clamped_pixels), static_cast<unsigned long long>(spec.seed));
  }
  out.clip.frames = std::move(frames);
  out.clip.fps = spec.fps;
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::string split_for_index(std::int64_t index) {
  return splitmix64(static_cast<std::uint64_t>(index)) % 5 == 0 ? "test" : "train";
}

std::filesystem::path make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.clips < 1) throw ValidationError("dataset needs at least one clip");
  if (!(spec.hr_min >= 45.0) || !(spec.hr_max <= 150.0) || !(spec.hr_min <= spec.hr_max)) {
    throw ValidationError("heart-rate range must satisfy 45 <= min <= max <= 150");
  }
  if (spec.test_frames < 0) throw ValidationError("test_frames must be non-negative");
  spec.base.validate();

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  nlohmann::json clips = nlohmann::json::array();
  for (std::int64_t i = 0; i < spec.clips; ++i) {
    SynthSpec s = spec.base;
    s.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
    CounterRng hr_rng(derive_seed(s.seed, 0));
    s.hr_bpm = hr_rng.uniform(spec.hr_min, spec.hr_max);
    // Keep the drifting HR inside the valid range.
    s.hr_bpm = std::clamp(s.hr_bpm, 45.0 + s.hr_drift_bpm / 2, 150.0 - s.hr_drift_bpm / 2);
    const std::string split = split_for_index(i);
    if (split == "test" && spec.test_frames > 0) s.frames = spec.test_frames;

    const SynthClip clip = generate(s);
    char stem[32];
    std::snprintf(stem, sizeof stem, "clip_%04lld", static_cast<long long>(i));
    const std::string tensor_name = std::string(stem) + ".tensor", signal_name = std::string(stem) + ".csv";
    save_tensor(out_dir / tensor_name, clip.clip.frames);
    write_signal_csv(out_dir / signal_name, clip.pulse);

    clips.push_back({{"path", tensor_name},
                     {"signal_path", signal_name},
                     {"hr_bpm", s.hr_bpm},
                     {"seed", s.seed},
                     {"split", split},
                     {"fps", s.fps},
                     {"frames", s.frames},
                     {"height", s.height},
                     {"width", s.width},
                     {"amplitude", s.amplitude},
                     {"hr_drift_bpm", s.hr_drift_bpm},
                     {"noise_sigma", s.noise_sigma},
                     {"drift_amplitude", s.drift_amplitude},
                     {"jitter", s.jitter},
                     {"mask", s.mask == MaskKind::Ellipse ? "ellipse" : "half-frame"}});
  }
  const nlohmann::json manifest = {{"clips", clips}};
  const auto path = out_dir / "manifest.json";
  write_file_atomic(path, manifest.dump(2) + "\n");
  return path;
}

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  std::vector<DatasetEntry> out;
  try {
    for (const auto& c : j.at("clips")) {
      DatasetEntry e;
      e.path = c.at("path").get<std::string>();
      e.signal_path = c.at("signal_path").get<std::string>();
      e.hr_bpm = c.value("hr_bpm", 0.0);
      e.seed = c.value("seed", std::uint64_t{0});
      e.split = c.value("split", std::string("train"));
      e.fps = c.value("fps", 30.0);
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + manifest.string() + " is malformed: " + e.what());
  }
  return out;
}

std::vector<TrainingSample> load_dataset(const std::filesystem::path& manifest, const std::string& split) {
  const auto dir = manifest.parent_path();
  std::vector<TrainingSample> out;
  for (const auto& e : read_manifest(manifest)) {
    if (!split.empty() && e.split != split) continue;
    TrainingSample s;
    s.clip.frames = load_tensor(dir / e.path);
    s.clip.fps = e.fps;
    s.signal = read_signal_csv(dir / e.signal_path);
    s.clip.validate();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace physnet
