#include "physnet/cli.hpp"

#include <cstdio>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "physnet/errors.hpp"
#include "physnet/eval.hpp"
#include "physnet/models.hpp"
#include "physnet/pulse.hpp"
#include "physnet/synth.hpp"
#include "physnet/tensor_io.hpp"
#include "physnet/train.hpp"

namespace physnet {

namespace {

struct SynthArgs {
  std::string out;
  std::int64_t clips = 10;
  std::uint64_t seed = 0;
  double hr_min = 60.0, hr_max = 120.0;
  std::int64_t frames = 300;
  std::int64_t test_frames = 0;
  std::string size = "64x64";
  double amp = 0.01;
  double noise = 0.0;
  double drift = 0.0;
  double hr_drift = 0.0;
  std::int64_t jitter = 0;
  double fps = 30.0;
  std::string mask = "ellipse";
};

struct TrainArgs {
  std::string data;
  std::string variant = "3dcnn";
  std::int64_t clip_len = 64;
  std::int64_t epochs = 15;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::string out;
  std::string loss_csv;
  std::int64_t batch = 4;
  std::string loss = "negpea";
  std::vector<std::int64_t> widths;
  std::optional<double> clip_grad_norm;
  std::string split = "train";
};

struct InferArgs {
  std::string ckpt, clip, out;
  double fps = 30.0;
};

struct EvalArgs {
  std::string ckpt, data, out, per_clip;
  std::string split = "test";
  std::string truth = "ppg";
  double hrv_min_duration = 60.0;
};

struct DumpArgs {
  std::string ckpt, clip, out;
  std::int64_t stage = 0;
  double fps = 30.0;
};

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const auto s = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return {s, s};
    }
    const auto h = std::stoll(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(text);
    const auto w = std::stoll(text.substr(x + 1), &used);
    if (used != text.size() - x - 1) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw ValidationError("--size expects HxW, got '" + text + "'");
  }
}

MaskKind parse_mask(const std::string& name) {
  if (name == "ellipse") return MaskKind::Ellipse;
  if (name == "half-frame") return MaskKind::HalfFrame;
  throw ValidationError("unknown mask '" + name + "' (expected ellipse or half-frame)");
}

int cmd_synth(const SynthArgs& a) {
  if (a.clips < 1) throw ValidationError("--clips must be >= 1");
  DatasetSpec spec;
  spec.clips = a.clips;
  spec.seed = a.seed;
  spec.hr_min = a.hr_min;
  spec.hr_max = a.hr_max;
  spec.test_frames = a.test_frames;
  spec.base.frames = a.frames;
  std::tie(spec.base.height, spec.base.width) = parse_size(a.size);
  spec.base.amplitude = a.amp;
  spec.base.noise_sigma = a.noise;
  spec.base.drift_amplitude = a.drift;
  spec.base.hr_drift_bpm = a.hr_drift;
  spec.base.jitter = a.jitter;
  spec.base.fps = a.fps;
  spec.base.mask = parse_mask(a.mask);
  std::fprintf(stderr, "generating %lld clips into %s\n", static_cast<long long>(a.clips), a.out.c_str());
  const auto manifest = make_dataset(spec, a.out);
  std::printf("%s\n", manifest.string().c_str());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.model.kind = parse_variant(a.variant);
  if (a.widths.size() == 1) {
    cfg.model.widths.assign(4, a.widths[0]);
  } else if (!a.widths.empty()) {
    cfg.model.widths = a.widths;
  }
  cfg.model.seed = a.seed;
  cfg.clip_length = a.clip_len;
  cfg.epochs = a.epochs;
  cfg.learning_rate = a.lr;
  cfg.seed = a.seed;
  cfg.batch_size = a.batch;
  cfg.loss = parse_loss(a.loss);
  cfg.clip_grad_norm = a.clip_grad_norm;
  cfg.checkpoint = a.out;
  cfg.loss_csv = a.loss_csv.empty() ? std::filesystem::path(a.out + ".loss.csv") : std::filesystem::path(a.loss_csv);
  cfg.validate();

  const auto data = load_dataset(a.data, a.split == "all" ? "" : a.split);
  if (data.empty()) throw ValidationError("no clips in split '" + a.split + "' of " + a.data);
  std::fprintf(stderr, "training %s on %zu clips, %lld epochs\n", a.variant.c_str(), data.size(),
               static_cast<long long>(cfg.epochs));
  train(cfg, data, [&](const EpochReport& r) {
    std::fprintf(stderr, "epoch %lld/%lld loss %.6f (%.1f s)\n", static_cast<long long>(r.epoch),
                 static_cast<long long>(cfg.epochs), r.mean_loss, r.seconds);
  });
  return 0;
}

VideoClip load_clip(const std::string& path, double fps) {
  VideoClip clip;
  clip.frames = load_tensor(path);
  clip.fps = fps;
  clip.validate();
  return clip;
}

int cmd_infer(const InferArgs& a) {
  auto model = load_checkpoint(a.ckpt);
  const auto clip = load_clip(a.clip, a.fps);
  write_signal_csv(a.out, infer(model, clip));
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  auto model = load_checkpoint(a.ckpt);
  const std::string split = a.split == "all" ? "" : a.split;
  std::vector<std::string> ids;
  for (const auto& e : read_manifest(a.data))
    if (split.empty() || e.split == split) ids.push_back(e.path);
  const auto data = load_dataset(a.data, split);
  EvalOptions options;
  options.hrv_min_duration_s = a.hrv_min_duration;
  if (a.truth == "ecg")
    options.truth = PipelineOptions::ecg();
  else if (a.truth != "ppg")
    throw ValidationError("--truth must be ppg or ecg");
  std::fprintf(stderr, "evaluating %zu clips\n", data.size());
  const auto report = evaluate(model, data, options, ids);
  write_report_json(a.out, report);
  if (!a.per_clip.empty()) write_clip_csv(a.per_clip, report);
  if (report.hr) {
    std::fprintf(stderr, "HR: MAE %.3f RMSE %.3f SD %.3f; waveform r %.3f; peak offset %.1f ms\n", report.hr->mae,
                 report.hr->rmse, report.hr->sd, report.mean_waveform_r, report.mean_peak_offset_ms);
  }
  return 0;
}

int cmd_dump(const DumpArgs& a) {
  auto model = load_checkpoint(a.ckpt);
  if (a.stage < 0 || static_cast<std::size_t>(a.stage) >= model.num_stages()) {
    throw ValidationError("stage " + std::to_string(a.stage) + " out of range; this model has " +
                          std::to_string(model.num_stages()) + " stages");
  }
  const auto clip = load_clip(a.clip, a.fps);
  save_tensor(a.out, dump_features(model, clip, static_cast<std::size_t>(a.stage)));
  return 0;
}

std::string json_to_arg(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ",") + json_to_arg(e);
    return s;
  }
  return v.dump();
}

// Options from a JSON config file become defaults: they are spliced in right
// after the subcommand name unless the flag was given explicitly. Keys may sit
// at the top level or under the subcommand's name.
std::vector<std::string> apply_config(const std::vector<std::string>& args, CLI::App& app) {
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open config " + config_path);
  nlohmann::json cfg;
  try {
    in >> cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + config_path + " is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw ValidationError("config must be a JSON object");

  std::size_t sub_pos = 0;
  CLI::App* sub = nullptr;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (auto* s = app.get_subcommand_no_throw(args[i])) {
      sub = s;
      sub_pos = i;
      break;
    }
  }
  if (!sub) return args;

  nlohmann::json merged = nlohmann::json::object();
  for (const auto& [k, v] : cfg.items())
    if (!v.is_object()) merged[k] = v;
  if (cfg.contains(sub->get_name()) && cfg[sub->get_name()].is_object()) merged.update(cfg[sub->get_name()]);

  std::vector<std::string> injected;
  for (const auto& [key, value] : merged.items()) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt) continue;
    bool given = false;
    for (std::size_t i = sub_pos + 1; i < args.size(); ++i)
      if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) given = true;
    if (given) continue;
    if (opt->get_expected_max() == 0) {
      if (value.is_boolean() && value.get<bool>()) injected.push_back(flag);
      continue;
    }
    injected.push_back(flag);
    injected.push_back(json_to_arg(value));
  }
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1));
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), args.end());
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args_in) {
  CLI::App app{"PhysNet rPPG toolkit: synthetic data, training, inference, evaluation", "physnet"};
  app.require_subcommand(1);
  std::string config;
  app.add_option("--config", config, "JSON file of flag defaults (flags on the command line win)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-gen", "Write a synthetic pulse-video dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--clips", sa.clips, "Number of clips")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--seed", sa.seed, "Dataset seed")->capture_default_str();
  synth->add_option("--hr-min", sa.hr_min, "Lowest heart rate, bpm")->capture_default_str();
  synth->add_option("--hr-max", sa.hr_max, "Highest heart rate, bpm")->capture_default_str();
  synth->add_option("--frames", sa.frames, "Frames per clip")->capture_default_str();
  synth->add_option("--test-frames", sa.test_frames, "Frames per test-split clip (0: same as --frames)")
      ->capture_default_str();
  synth->add_option("--size", sa.size, "Frame size HxW")->capture_default_str();
  synth->add_option("--amp", sa.amp, "Pulse modulation amplitude (green channel)")->capture_default_str();
  synth->add_option("--noise", sa.noise, "Per-pixel Gaussian noise sigma")->capture_default_str();
  synth->add_option("--drift", sa.drift, "Illumination drift amplitude")->capture_default_str();
  synth->add_option("--hr-drift", sa.hr_drift, "Linear HR change over each clip, bpm")->capture_default_str();
  synth->add_option("--jitter", sa.jitter, "Maximum per-frame translation, pixels")->capture_default_str();
  synth->add_option("--fps", sa.fps, "Frame rate")->capture_default_str();
  synth->add_option("--mask", sa.mask, "Skin region: ellipse or half-frame")->capture_default_str();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a PhysNet variant on a manifest");
  trn->add_option("--data", ta.data, "Dataset manifest")->required();
  trn->add_option("--variant", ta.variant, "2dcnn, 3dcnn, 3dcnn-ed, lstm, bilstm or convlstm")->capture_default_str();
  trn->add_option("--clip-len", ta.clip_len, "Training window length T")->capture_default_str();
  trn->add_option("--epochs", ta.epochs, "Epochs")->capture_default_str();
  trn->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  trn->add_option("--seed", ta.seed, "Initialisation and shuffling seed")->capture_default_str();
  trn->add_option("--out", ta.out, "Checkpoint path")->required();
  trn->add_option("--loss-csv", ta.loss_csv, "Loss curve CSV (default: <out>.loss.csv)");
  trn->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  trn->add_option("--loss", ta.loss, "negpea or mse")->capture_default_str();
  trn->add_option("--widths", ta.widths, "Trunk block widths, comma separated (one value: all blocks)")
      ->delimiter(',');
  trn->add_option("--clip-grad-norm", ta.clip_grad_norm, "Clip the global gradient norm (off by default)");
  trn->add_option("--split", ta.split, "Manifest split to train on (train, test or all)")->capture_default_str();

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Recover the pulse signal of one clip");
  inf->add_option("--ckpt", ia.ckpt, "Checkpoint")->required();
  inf->add_option("--clip", ia.clip, "Clip tensor file [3,T,H,W]")->required();
  inf->add_option("--out", ia.out, "Output signal CSV")->required();
  inf->add_option("--fps", ia.fps, "Clip frame rate")->capture_default_str();

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint against ground truth");
  evl->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
  evl->add_option("--data", ea.data, "Dataset manifest")->required();
  evl->add_option("--out", ea.out, "Report JSON")->required();
  evl->add_option("--split", ea.split, "Manifest split to evaluate (train, test or all)")->capture_default_str();
  evl->add_option("--per-clip", ea.per_clip, "Optional per-clip CSV");
  evl->add_option("--truth", ea.truth, "Ground-truth pipeline: ppg or ecg")->capture_default_str();
  evl->add_option("--hrv-min-duration", ea.hrv_min_duration, "Shortest clip (s) that contributes HRV metrics")
      ->capture_default_str();

  DumpArgs da;
  auto* dmp = app.add_subcommand("dump-features", "Write an intermediate feature map");
  dmp->add_option("--ckpt", da.ckpt, "Checkpoint")->required();
  dmp->add_option("--clip", da.clip, "Clip tensor file [3,T,H,W]")->required();
  dmp->add_option("--stage", da.stage, "Stage index (trunk blocks, then decoder or recurrent layers)")->required();
  dmp->add_option("--out", da.out, "Output tensor file")->required();
  dmp->add_option("--fps", da.fps, "Clip frame rate")->capture_default_str();

  try {
    const auto args = apply_config(args_in, app);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa);
    if (trn->parsed()) return cmd_train(ta);
    if (inf->parsed()) return cmd_infer(ia);
    if (evl->parsed()) return cmd_eval(ea);
    if (dmp->parsed()) return cmd_dump(da);
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace physnet
