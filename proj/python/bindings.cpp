#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "physnet/cli.hpp"
#include "physnet/errors.hpp"
#include "physnet/eval.hpp"
#include "physnet/hrv.hpp"
#include "physnet/models.hpp"
#include "physnet/pulse.hpp"
#include "physnet/synth.hpp"
#include "physnet/tensor_io.hpp"
#include "physnet/train.hpp"

namespace py = pybind11;
using namespace physnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<float> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data));
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(float));
  return out;
}

DoubleArray to_array(const std::vector<double>& v) {
  DoubleArray out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(double));
  return out;
}

std::vector<double> to_vector(const DoubleArray& a) { return {a.data(), a.data() + a.size()}; }

PulseSignal to_signal(const DoubleArray& samples, double rate) {
  PulseSignal s;
  s.samples = to_vector(samples);
  s.rate = rate;
  return s;
}

IbiSeries ibi_from_peaks(const std::vector<double>& peak_times) {
  IbiSeries ibi;
  ibi.peak_times = peak_times;
  for (std::size_t k = 1; k < peak_times.size(); ++k)
    ibi.intervals_ms.push_back((peak_times[k] - peak_times[k - 1]) * 1000.0);
  return ibi;
}

py::dict hrv_dict(const HrvFeatures& h) {
  py::dict d;
  d["lf_nu"] = h.lf_nu;
  d["hf_nu"] = h.hf_nu;
  d["lf_hf"] = h.lf_hf_ratio;
  d["rf_hz"] = h.rf_hz;
  return d;
}

PipelineOptions pipeline_for(const std::string& kind) {
  if (kind == "ppg") return PipelineOptions::ppg();
  if (kind == "ecg") return PipelineOptions::ecg();
  throw ValidationError("pipeline kind must be 'ppg' or 'ecg'");
}

}  // namespace

PYBIND11_MODULE(_physnet, m) {
  m.doc() = "PhysNet rPPG networks and pulse analysis";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "generate",
      [](std::uint64_t seed, std::int64_t frames, std::int64_t height, std::int64_t width, double fps, double hr_bpm,
         double amplitude, double noise_sigma, double drift_amplitude, std::int64_t jitter, double hr_drift_bpm,
         const std::string& mask) {
        SynthSpec s;
        s.seed = seed;
        s.frames = frames;
        s.height = height;
        s.width = width;
        s.fps = fps;
        s.hr_bpm = hr_bpm;
        s.amplitude = amplitude;
        s.noise_sigma = noise_sigma;
        s.drift_amplitude = drift_amplitude;
        s.jitter = jitter;
        s.hr_drift_bpm = hr_drift_bpm;
        s.mask = mask == "half-frame" ? MaskKind::HalfFrame : MaskKind::Ellipse;
        const SynthClip c = generate(s);
        py::dict d;
        d["frames"] = to_array(c.clip.frames);
        d["pulse"] = to_array(c.pulse.samples);
        d["fps"] = c.clip.fps;
        d["peak_times"] = c.peak_times;
        d["clamped_pixels"] = c.clamped_pixels;
        return d;
      },
      py::arg("seed") = 0, py::arg("frames") = 300, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("fps") = 30.0, py::arg("hr_bpm") = 72.0, py::arg("amplitude") = 0.01, py::arg("noise_sigma") = 0.0,
      py::arg("drift_amplitude") = 0.0, py::arg("jitter") = 0, py::arg("hr_drift_bpm") = 0.0,
      py::arg("mask") = "ellipse", "Synthetic pulse video: dict with frames [3,T,H,W], pulse, peak_times.");

  m.def(
      "make_dataset",
      [](const std::filesystem::path& out_dir, std::int64_t clips, std::uint64_t seed, double hr_min, double hr_max,
         std::int64_t frames, std::int64_t height, std::int64_t width, double amplitude, std::int64_t test_frames) {
        DatasetSpec spec;
        spec.clips = clips;
        spec.seed = seed;
        spec.hr_min = hr_min;
        spec.hr_max = hr_max;
        spec.test_frames = test_frames;
        spec.base.frames = frames;
        spec.base.height = height;
        spec.base.width = width;
        spec.base.amplitude = amplitude;
        return make_dataset(spec, out_dir);
      },
      py::arg("out_dir"), py::arg("clips") = 10, py::arg("seed") = 0, py::arg("hr_min") = 60.0,
      py::arg("hr_max") = 120.0, py::arg("frames") = 300, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("amplitude") = 0.01, py::arg("test_frames") = 0, "Write a dataset; returns the manifest path.");

  m.def(
      "bandpass",
      [](const DoubleArray& samples, double rate, double low_hz, double high_hz, int order) {
        return to_array(bandpass(to_signal(samples, rate), FilterSpec{low_hz, high_hz, order}).samples);
      },
      py::arg("samples"), py::arg("rate"), py::arg("low_hz") = 0.7, py::arg("high_hz") = 3.5, py::arg("order") = 4);

  m.def(
      "znormalize", [](const DoubleArray& samples) { return to_array(znormalize(to_signal(samples, 1.0)).samples); },
      py::arg("samples"));

  m.def(
      "detect_peaks",
      [](const DoubleArray& samples, double rate) {
        const IbiSeries ibi = detect_peaks(to_signal(samples, rate));
        return py::make_tuple(to_array(ibi.peak_times), to_array(ibi.intervals_ms));
      },
      py::arg("samples"), py::arg("rate"), "Returns (peak_times_s, intervals_ms).");

  m.def(
      "average_hr",
      [](const std::vector<double>& intervals_ms) {
        IbiSeries ibi;
        ibi.intervals_ms = intervals_ms;
        return average_hr(ibi);
      },
      py::arg("intervals_ms"));

  m.def(
      "run_pipeline",
      [](const DoubleArray& samples, double rate, const std::string& kind) {
        const auto r = run_pipeline(to_signal(samples, rate), pipeline_for(kind));
        py::dict d;
        d["processed"] = to_array(r.processed.samples);
        d["peak_times"] = to_array(r.ibi.peak_times);
        d["intervals_ms"] = to_array(r.ibi.intervals_ms);
        d["hr_bpm"] = r.hr_bpm;
        return d;
      },
      py::arg("samples"), py::arg("rate"), py::arg("kind") = "ppg");

  m.def(
      "hrv_features",
      [](const std::vector<double>& peak_times) { return hrv_dict(hrv_features(ibi_from_peaks(peak_times))); },
      py::arg("peak_times"), "LF/HF n.u., LF/HF ratio and RF from beat times in seconds.");

  m.def(
      "metrics",
      [](const std::vector<double>& pred, const std::vector<double>& truth) {
        const Metrics mt = metrics(pred, truth);
        py::dict d;
        d["sd"] = mt.sd;
        d["rmse"] = mt.rmse;
        d["mae"] = mt.mae;
        d["r"] = *mt.r;
        return d;
      },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "neg_pearson_loss",
      [](const DoubleArray& pred, const DoubleArray& truth) {
        return neg_pearson_loss(to_signal(pred, 1.0), to_signal(truth, 1.0));
      },
      py::arg("pred"), py::arg("truth"));

  m.def("variants", [] {
    std::vector<std::string> names;
    for (auto k : all_variants()) names.emplace_back(variant_name(k));
    return names;
  });

  py::class_<PhysNet<float>>(m, "PhysNet")
      .def(py::init([](const std::string& variant, std::vector<std::int64_t> widths, std::uint64_t seed) {
             ModelConfig cfg;
             cfg.kind = parse_variant(variant);
             if (!widths.empty()) cfg.widths = std::move(widths);
             cfg.seed = seed;
             return PhysNet<float>(cfg);
           }),
           py::arg("variant") = "3dcnn", py::arg("widths") = std::vector<std::int64_t>{}, py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& path) { return load_checkpoint(path); }, py::arg("path"))
      .def(
          "save",
          [](PhysNet<float>& self, const std::filesystem::path& path, std::int64_t epoch) {
            save_checkpoint(path, self, CheckpointInfo{epoch});
          },
          py::arg("path"), py::arg("epoch") = 0)
      .def_property_readonly("variant", [](const PhysNet<float>& self) { return std::string(variant_name(self.kind())); })
      .def_property_readonly("num_stages", &PhysNet<float>::num_stages)
      .def(
          "infer",
          [](PhysNet<float>& self, const FloatArray& frames, double fps) {
            VideoClip clip;
            clip.frames = to_tensor(frames);
            clip.fps = fps;
            return to_array(infer(self, clip).samples);
          },
          py::arg("frames"), py::arg("fps") = 30.0, "Pulse signal for one clip [3,T,H,W].")
      .def(
          "features",
          [](PhysNet<float>& self, const FloatArray& frames, std::size_t stage) {
            VideoClip clip;
            clip.frames = to_tensor(frames);
            return to_array(dump_features(self, clip, stage));
          },
          py::arg("frames"), py::arg("stage"));

  m.def(
      "train",
      [](const std::filesystem::path& manifest, const std::string& variant, std::vector<std::int64_t> widths,
         std::int64_t clip_length, std::int64_t epochs, double learning_rate, std::int64_t batch_size,
         std::uint64_t seed, const std::string& loss) {
        TrainConfig cfg;
        cfg.model.kind = parse_variant(variant);
        if (!widths.empty()) cfg.model.widths = std::move(widths);
        cfg.model.seed = seed;
        cfg.clip_length = clip_length;
        cfg.epochs = epochs;
        cfg.learning_rate = learning_rate;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.loss = parse_loss(loss);
        auto data = load_dataset(manifest, "train");
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return physnet::train(cfg, data);
        }();
        return py::make_tuple(std::move(r.model), r.epoch_losses);
      },
      py::arg("manifest"), py::arg("variant") = "3dcnn", py::arg("widths") = std::vector<std::int64_t>{},
      py::arg("clip_length") = 64, py::arg("epochs") = 15, py::arg("learning_rate") = 1e-4, py::arg("batch_size") = 4,
      py::arg("seed") = 0, py::arg("loss") = "negpea", "Train on the manifest's train split; returns (model, losses).");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "physnet");
        return run_cli(args);
      },
      py::arg("args"), "Run the command-line tool in-process; returns its exit code.");

  m.def("load_tensor", [](const std::filesystem::path& p) { return to_array(load_tensor(p)); }, py::arg("path"));
  m.def(
      "save_tensor", [](const std::filesystem::path& p, const FloatArray& a) { save_tensor(p, to_tensor(a)); },
      py::arg("path"), py::arg("array"));
}
