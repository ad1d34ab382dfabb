#include "physnet/models.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "physnet/errors.hpp"
#include "physnet/tensor_io.hpp"

namespace physnet {

namespace {

struct VariantEntry {
  VariantKind kind;
  std::string_view name;
};

constexpr VariantEntry kVariants[] = {
    {VariantKind::Cnn2d, "2dcnn"}, {VariantKind::Cnn3d, "3dcnn"},   {VariantKind::Cnn3dEd, "3dcnn-ed"},
    {VariantKind::Lstm, "lstm"},   {VariantKind::BiLstm, "bilstm"}, {VariantKind::ConvLstm, "convlstm"},
};

bool is_3d(VariantKind kind) { return kind == VariantKind::Cnn3d || kind == VariantKind::Cnn3dEd; }

bool is_recurrent(VariantKind kind) {
  return kind == VariantKind::Lstm || kind == VariantKind::BiLstm || kind == VariantKind::ConvLstm;
}

}  // namespace

std::string_view variant_name(VariantKind kind) {
  for (const auto& v : kVariants)
    if (v.kind == kind) return v.name;
  return "unknown";
}

VariantKind parse_variant(std::string_view name) {
  for (const auto& v : kVariants)
    if (v.name == name) return v.kind;
  throw ValidationError("unknown variant '" + std::string(name) +
                        "' (expected 2dcnn, 3dcnn, 3dcnn-ed, lstm, bilstm or convlstm)");
}

const std::vector<VariantKind>& all_variants() {
  static const std::vector<VariantKind> kinds = [] {
    std::vector<VariantKind> out;
    for (const auto& v : kVariants) out.push_back(v.kind);
    return out;
  }();
  return kinds;
}

void VideoClip::validate() const {
  if (frames.rank() != 4 || frames.dim(0) != 3) {
    throw ShapeError("video clip must be [3,T,H,W], got " + to_string(frames.shape()));
  }
  if (!(fps > 0)) throw ValidationError("clip fps must be positive");
  for (float v : frames.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("clip pixel values must lie in [0,1]");
  }
}

void PulseSignal::validate() const {
  if (!(rate > 0)) throw ValidationError("signal rate must be positive");
  for (double v : samples) {
    if (!std::isfinite(v)) throw ValidationError("signal contains non-finite samples");
  }
}

// ---------------------------------------------------------------------------

template <typename S>
PhysNet<S>::PhysNet(ModelConfig config) : config_(std::move(config)) {
  if (config_.widths.empty()) throw ValidationError("model needs at least one trunk block");
  for (auto w : config_.widths)
    if (w < 1) throw ValidationError("trunk widths must be positive");
  if (config_.recurrent_layers < 1) throw ValidationError("recurrent layer count must be >= 1");
  if (config_.convlstm_kernel < 1 || config_.convlstm_kernel % 2 == 0) {
    throw ValidationError("ConvLSTM kernel must be odd");
  }
  CounterRng rng(config_.seed);
  const VariantKind kind = config_.kind;
  const Dims3 kernel = is_3d(kind) ? Dims3{3, 3, 3} : Dims3{1, 3, 3};
  const Padding3 pad = Padding3::same(kernel);

  std::int64_t channels = 3;
  for (std::size_t b = 0; b < config_.widths.size(); ++b) {
    const std::int64_t width = config_.widths[b];
    Block block;
    block.conv1 = ConvLayer<S>::make(channels, width, kernel, {1, 1, 1}, pad, rng);
    block.bn1 = BatchNormLayer<S>::make(width);
    block.conv2 = ConvLayer<S>::make(width, width, kernel, {1, 1, 1}, pad, rng);
    block.bn2 = BatchNormLayer<S>::make(width);
    const bool temporal = kind == VariantKind::Cnn3dEd && (b == 1 || b == 2);
    block.pool_kernel = temporal ? Dims3{2, 2, 2} : Dims3{1, 2, 2};
    block.pool_stride = block.pool_kernel;
    trunk_.push_back(std::move(block));
    channels = width;
  }

  if (kind == VariantKind::Cnn3dEd) {
    const Dims3 dk{4, 1, 1};
    const Padding3 dpad{{1, 0, 0}, {1, 0, 0}};
    for (int i = 0; i < 2; ++i) {
      DecoderLayer layer;
      layer.deconv = ConvLayer<S>::make_transposed(channels, channels, dk, {2, 1, 1}, dpad, rng);
      layer.bn = BatchNormLayer<S>::make(channels);
      decoder_.push_back(std::move(layer));
    }
  }

  if (is_recurrent(kind)) {
    const std::int64_t hidden = config_.hidden_width();
    std::int64_t in = channels;
    for (std::int64_t l = 0; l < config_.recurrent_layers; ++l) {
      if (kind == VariantKind::ConvLstm) {
        forward_cells_.push_back(RecurrentCell<S>::make_conv(in, hidden, config_.convlstm_kernel, rng));
        in = hidden;
      } else {
        forward_cells_.push_back(RecurrentCell<S>::make_dense(in, hidden, rng));
        if (kind == VariantKind::BiLstm) backward_cells_.push_back(RecurrentCell<S>::make_dense(in, hidden, rng));
        in = kind == VariantKind::BiLstm ? 2 * hidden : hidden;
      }
    }
    channels = in;
  }

  projection_ = ConvLayer<S>::make(channels, 1, {1, 1, 1}, {1, 1, 1}, Padding3::none(), rng);
}

template <typename S>
std::size_t PhysNet<S>::num_stages() const {
  return trunk_.size() + decoder_.size() + forward_cells_.size();
}

template <typename S>
void PhysNet<S>::check_input(const Shape& shape) const {
  if (shape.size() != 5 || shape[1] != 3) {
    throw ShapeError("model input must be [N,3,T,H,W] or [3,T,H,W], got " + to_string(shape));
  }
  if (shape[3] < kMinSpatialExtent || shape[4] < kMinSpatialExtent) {
    throw ValidationError("frames must be at least 32x32, got " + std::to_string(shape[3]) + "x" +
                          std::to_string(shape[4]));
  }
  if (config_.kind == VariantKind::Cnn3dEd && shape[2] % 4 != 0) {
    throw ValidationError("3dcnn-ed needs a clip length divisible by 4, got " + std::to_string(shape[2]));
  }
}

template <typename S>
BasicTensor<S> PhysNet<S>::forward(const BasicTensor<S>& clips, bool training) {
  const bool single = clips.rank() == 4;
  auto y = run(clips, training, std::nullopt);  // [N, T]
  return single ? reshape(y, Shape{y.dim(1)}) : y;
}

template <typename S>
BasicTensor<S> PhysNet<S>::features(const BasicTensor<S>& clips, std::size_t stage) {
  if (stage >= num_stages()) {
    throw ValidationError("stage " + std::to_string(stage) + " out of range; " + variant_name(config_.kind).data() +
                          " has " + std::to_string(num_stages()) + " stages");
  }
  return run(clips, false, stage);
}

template <typename S>
BasicTensor<S> PhysNet<S>::run(const BasicTensor<S>& input, bool training, std::optional<std::size_t> stop_stage) {
  BasicTensor<S> x = input;
  if (x.rank() == 4) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    x = reshape(x, s);
  }
  check_input(x.shape());
  const std::int64_t batch = x.dim(0), frames = x.dim(2);
  std::size_t stage = 0;
  auto reached = [&]() { return stop_stage && *stop_stage == stage++; };

  for (auto& block : trunk_) {
    x = relu(batchnorm(conv3d(x, block.conv1), block.bn1, training));
    x = relu(batchnorm(conv3d(x, block.conv2), block.bn2, training));
    x = maxpool3d(x, block.pool_kernel, block.pool_stride);
    if (reached()) return x;
  }
  for (auto& layer : decoder_) {
    x = relu(batchnorm(deconv3d(x, layer.deconv), layer.bn, training));
    if (reached()) return x;
  }

  switch (config_.kind) {
    case VariantKind::ConvLstm:
      for (auto& cell : forward_cells_) {
        x = convlstm_sequence(cell, x);
        if (reached()) return x;
      }
      x = spatial_global_avgpool(x);
      break;
    case VariantKind::Lstm:
    case VariantKind::BiLstm: {
      x = spatial_global_avgpool(x);
      x = reshape(x, Shape{batch, x.dim(1), x.dim(2)});
      for (std::size_t l = 0; l < forward_cells_.size(); ++l) {
        auto fwd = lstm_sequence(forward_cells_[l], x, false);
        if (config_.kind == VariantKind::BiLstm) {
          x = concat(std::vector<BasicTensor<S>>{fwd, lstm_sequence(backward_cells_[l], x, true)}, 1);
        } else {
          x = fwd;
        }
        if (reached()) return reshape(x, Shape{batch, x.dim(1), x.dim(2), 1, 1});
      }
      x = reshape(x, Shape{batch, x.dim(1), x.dim(2), 1, 1});
      break;
    }
    default:
      x = spatial_global_avgpool(x);
      break;
  }
  x = conv3d(x, projection_);  // [N, 1, T, 1, 1]
  if (x.dim(2) != frames) {
    throw ShapeError("internal error: output length " + std::to_string(x.dim(2)) + " != input length " +
                     std::to_string(frames));
  }
  return reshape(x, Shape{batch, frames});
}

template <typename S>
std::vector<NamedTensor<S>> PhysNet<S>::parameters() {
  std::vector<NamedTensor<S>> out;
  auto conv = [&](const std::string& prefix, ConvLayer<S>& layer) {
    out.push_back({prefix + ".weight", &layer.weight});
    if (layer.bias) out.push_back({prefix + ".bias", &*layer.bias});
  };
  auto bn = [&](const std::string& prefix, BatchNormLayer<S>& layer) {
    out.push_back({prefix + ".gamma", &layer.gamma});
    out.push_back({prefix + ".beta", &layer.beta});
  };
  for (std::size_t b = 0; b < trunk_.size(); ++b) {
    const std::string p = "trunk." + std::to_string(b);
    conv(p + ".conv1", trunk_[b].conv1);
    bn(p + ".bn1", trunk_[b].bn1);
    conv(p + ".conv2", trunk_[b].conv2);
    bn(p + ".bn2", trunk_[b].bn2);
  }
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    const std::string p = "decoder." + std::to_string(d);
    conv(p + ".deconv", decoder_[d].deconv);
    bn(p + ".bn", decoder_[d].bn);
  }
  static const char* gate_names[] = {"input_x", "input_h", "forget_x", "forget_h",
                                     "output_x", "output_h", "candidate_x", "candidate_h"};
  auto cells = [&](const std::string& prefix, std::vector<RecurrentCell<S>>& list) {
    for (std::size_t l = 0; l < list.size(); ++l) {
      auto params = list[l].parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back({prefix + "." + std::to_string(l) + "." + gate_names[i], params[i]});
      }
    }
  };
  cells("recurrent.forward", forward_cells_);
  cells("recurrent.backward", backward_cells_);
  conv("projection", projection_);
  return out;
}

template <typename S>
std::vector<NamedTensor<S>> PhysNet<S>::buffers() {
  std::vector<NamedTensor<S>> out;
  auto bn = [&](const std::string& prefix, BatchNormLayer<S>& layer) {
    out.push_back({prefix + ".running_mean", &layer.running_mean});
    out.push_back({prefix + ".running_var", &layer.running_var});
  };
  for (std::size_t b = 0; b < trunk_.size(); ++b) {
    const std::string p = "trunk." + std::to_string(b);
    bn(p + ".bn1", trunk_[b].bn1);
    bn(p + ".bn2", trunk_[b].bn2);
  }
  for (std::size_t d = 0; d < decoder_.size(); ++d) bn("decoder." + std::to_string(d) + ".bn", decoder_[d].bn);
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
BasicTensor<S> lstm_sequence(const RecurrentCell<S>& cell, const BasicTensor<S>& x, bool reverse) {
  if (x.rank() != 3) throw ShapeError("lstm_sequence expects [N,C,T], got " + to_string(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), T = x.dim(2), H = cell.hidden_size();
  auto hidden = BasicTensor<S>::zeros(Shape{N, H});
  auto memory = BasicTensor<S>::zeros(Shape{N, H});
  std::vector<BasicTensor<S>> outputs(static_cast<std::size_t>(T));
  for (std::int64_t k = 0; k < T; ++k) {
    const std::int64_t t = reverse ? T - 1 - k : k;
    auto xt = reshape(slice(x, 2, t, 1), Shape{N, C});
    auto state = lstm_step(cell, xt, hidden, memory);
    hidden = state.hidden;
    memory = state.cell;
    outputs[static_cast<std::size_t>(t)] = reshape(hidden, Shape{N, H, 1});
  }
  return concat(outputs, 2);
}

template <typename S>
BasicTensor<S> convlstm_sequence(const RecurrentCell<S>& cell, const BasicTensor<S>& x) {
  if (x.rank() != 5) throw ShapeError("convlstm_sequence expects [N,C,T,H,W], got " + to_string(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), T = x.dim(2), Hh = x.dim(3), Ww = x.dim(4);
  const std::int64_t hid = cell.hidden_size();
  auto hidden = BasicTensor<S>::zeros(Shape{N, hid, Hh, Ww});
  auto memory = BasicTensor<S>::zeros(Shape{N, hid, Hh, Ww});
  std::vector<BasicTensor<S>> outputs;
  outputs.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    auto xt = reshape(slice(x, 2, t, 1), Shape{N, C, Hh, Ww});
    auto state = convlstm_step(cell, xt, hidden, memory);
    hidden = state.hidden;
    memory = state.cell;
    outputs.push_back(reshape(hidden, Shape{N, hid, 1, Hh, Ww}));
  }
  return concat(outputs, 2);
}

PulseSignal infer(PhysNet<float>& model, const VideoClip& clip) {
  clip.validate();
  const auto y = model.forward(clip.frames, false);
  PulseSignal signal;
  signal.rate = clip.fps;
  signal.samples.assign(y.data().begin(), y.data().end());
  return signal;
}

Tensor dump_features(PhysNet<float>& model, const VideoClip& clip, std::size_t stage) {
  clip.validate();
  const auto f = model.features(clip.frames, stage);
  return reshape(f, Shape(f.shape().begin() + 1, f.shape().end()));
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, PhysNet<float>& model, const CheckpointInfo& info) {
  const auto& cfg = model.config();
  nlohmann::json manifest;
  manifest["format"] = "physnet-checkpoint";
  manifest["version"] = 1;
  manifest["kind"] = std::string(variant_name(cfg.kind));
  manifest["widths"] = cfg.widths;
  manifest["recurrent_layers"] = cfg.recurrent_layers;
  manifest["recurrent_width"] = cfg.recurrent_width;
  manifest["convlstm_kernel"] = cfg.convlstm_kernel;
  manifest["seed"] = cfg.seed;
  manifest["epoch"] = info.epoch;
  auto tensors = model.parameters();
  auto buffers = model.buffers();
  tensors.insert(tensors.end(), buffers.begin(), buffers.end());
  nlohmann::json records = nlohmann::json::array();
  for (const auto& t : tensors) records.push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  manifest["tensors"] = records;

  std::ostringstream out(std::ios::binary);
  out << manifest.dump() << '\n';
  for (const auto& t : tensors) write_tensor(out, *t.tensor);
  write_file_atomic(path, out.str());
}

PhysNet<float> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty checkpoint " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "physnet-checkpoint") throw IoError("not a physnet checkpoint: " + path.string());

  ModelConfig cfg;
  try {
    cfg.kind = parse_variant(manifest.at("kind").get<std::string>());
    cfg.widths = manifest.at("widths").get<std::vector<std::int64_t>>();
    cfg.recurrent_layers = manifest.at("recurrent_layers").get<std::int64_t>();
    cfg.recurrent_width = manifest.at("recurrent_width").get<std::int64_t>();
    cfg.convlstm_kernel = manifest.at("convlstm_kernel").get<std::int64_t>();
    cfg.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("incomplete checkpoint manifest: " + std::string(e.what()));
  }
  PhysNet<float> model(cfg);
  auto tensors = model.parameters();
  auto buffers = model.buffers();
  tensors.insert(tensors.end(), buffers.begin(), buffers.end());
  const auto& records = manifest.at("tensors");
  if (records.size() != tensors.size()) throw IoError("checkpoint tensor count does not match its architecture");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (records[i].at("name").get<std::string>() != tensors[i].name) {
      throw IoError("checkpoint tensor order mismatch at " + tensors[i].name);
    }
    Tensor t = read_tensor(in);
    if (t.shape() != tensors[i].tensor->shape()) {
      throw IoError("checkpoint tensor " + tensors[i].name + " has shape " + to_string(t.shape()) + ", expected " +
                    to_string(tensors[i].tensor->shape()));
    }
    auto dst = tensors[i].tensor->mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  if (info) info->epoch = manifest.value("epoch", std::int64_t{0});
  return model;
}

template class PhysNet<float>;
template class PhysNet<double>;
template BasicTensor<float> lstm_sequence<float>(const RecurrentCell<float>&, const BasicTensor<float>&, bool);
template BasicTensor<double> lstm_sequence<double>(const RecurrentCell<double>&, const BasicTensor<double>&, bool);
template BasicTensor<float> convlstm_sequence<float>(const RecurrentCell<float>&, const BasicTensor<float>&);
template BasicTensor<double> convlstm_sequence<double>(const RecurrentCell<double>&, const BasicTensor<double>&);

}  // namespace physnet
