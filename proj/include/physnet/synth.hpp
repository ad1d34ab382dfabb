#pragma once

// Deterministic synthetic pulse videos with known ground truth. A skin
// region is colour-modulated by a PPG-like waveform on top of a static
// texture, with optional illumination drift, sensor noise and translation
// jitter. All randomness comes from CounterRng streams keyed by the seed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "physnet/models.hpp"
#include "physnet/train.hpp"

namespace physnet {

enum class MaskKind { Ellipse, HalfFrame };

struct SynthSpec {
  std::uint64_t seed = 0;
  std::int64_t frames = 300;
  std::int64_t height = 64;
  std::int64_t width = 64;
  double fps = 30.0;
  double hr_bpm = 72.0;
  double hr_drift_bpm = 0.0;  // linear change of HR over the whole clip
  double amplitude = 0.01;    // fractional modulation of the green channel
  double noise_sigma = 0.0;
  double drift_amplitude = 0.0;
  std::int64_t jitter = 0;  // max translation per frame, pixels
  MaskKind mask = MaskKind::Ellipse;

  void validate() const;
};

struct SynthClip {
  VideoClip clip;
  PulseSignal pulse;                // waveform sampled at fps
  std::vector<double> peak_times;   // analytic waveform maxima, seconds
  std::int64_t clamped_pixels = 0;  // values pushed outside [0,1] and clipped
};

// PPG-like waveform as a function of cardiac phase (radians): fundamental, a
// 0.3-amplitude second harmonic and a dicrotic bump. Zero mean over a cycle,
// scaled so the largest excursion is 1.
double pulse_waveform(double phase);
// Phase in [0, 2*pi) of the waveform maximum.
double pulse_peak_phase();

SynthClip generate(const SynthSpec& spec);

struct DatasetSpec {
  std::int64_t clips = 10;
  double hr_min = 60.0;
  double hr_max = 120.0;
  std::uint64_t seed = 0;
  std::int64_t test_frames = 0;  // frames of test-split clips; 0 uses base.frames
  SynthSpec base;                // seed and hr_bpm are overridden per clip
};

struct DatasetEntry {
  std::string path;         // clip tensor file, relative to the manifest
  std::string signal_path;  // signal CSV, relative to the manifest
  double hr_bpm = 0;
  std::uint64_t seed = 0;
  std::string split;  // "train" or "test"
  double fps = 30.0;
};

// Split assignment is a pure function of the clip index.
std::string split_for_index(std::int64_t index);

// Writes clip tensors, signal CSVs and manifest.json into `out_dir`; returns
// the manifest path.
std::filesystem::path make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest);

// Loads the entries of one split ("" loads all).
std::vector<TrainingSample> load_dataset(const std::filesystem::path& manifest, const std::string& split);

}  // namespace physnet
