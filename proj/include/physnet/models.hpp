#pragma once

// The PhysNet family: a spatio-temporal feature extractor followed by spatial
// global average pooling and a 1x1x1 projection to a single channel, mapping
// a [3, T, H, W] clip to a pulse signal of length T.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "physnet/nn.hpp"
#include "physnet/tensor.hpp"

namespace physnet {

enum class VariantKind { Cnn2d, Cnn3d, Cnn3dEd, Lstm, BiLstm, ConvLstm };

// Names used on the command line and in checkpoints: 2dcnn, 3dcnn, 3dcnn-ed,
// lstm, bilstm, convlstm.
std::string_view variant_name(VariantKind kind);
VariantKind parse_variant(std::string_view name);
const std::vector<VariantKind>& all_variants();

struct VideoClip {
  Tensor frames;  // [3, T, H, W], values in [0, 1]
  double fps = 30.0;

  std::int64_t length() const { return frames.dim(1); }
  void validate() const;
};

struct PulseSignal {
  std::vector<double> samples;
  double rate = 30.0;

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / rate; }
  void validate() const;
};

struct ModelConfig {
  VariantKind kind = VariantKind::Cnn3d;
  std::vector<std::int64_t> widths{32, 64, 64, 64};  // output channels of each trunk block
  std::int64_t recurrent_layers = 2;
  std::int64_t recurrent_width = 0;  // 0: same as the last trunk width
  std::int64_t convlstm_kernel = 3;
  std::uint64_t seed = 0;

  std::int64_t hidden_width() const { return recurrent_width > 0 ? recurrent_width : widths.back(); }
};

inline constexpr std::int64_t kMinSpatialExtent = 32;

template <typename S>
struct NamedTensor {
  std::string name;
  BasicTensor<S>* tensor;
};

template <typename S>
class PhysNet {
 public:
  explicit PhysNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  VariantKind kind() const { return config_.kind; }

  // clips: [N, 3, T, H, W] or [3, T, H, W]; returns [N, T] (or [T]).
  BasicTensor<S> forward(const BasicTensor<S>& clips, bool training);

  // Intermediate feature map after `stage`, computed in eval mode. Stages are
  // the trunk blocks, then the decoder layers (ED) or the recurrent layers.
  BasicTensor<S> features(const BasicTensor<S>& clips, std::size_t stage);
  std::size_t num_stages() const;

  // Throws ValidationError when the clip shape is not accepted.
  void check_input(const Shape& shape) const;

  std::vector<NamedTensor<S>> parameters();
  // Non-trainable state (batch-norm running statistics).
  std::vector<NamedTensor<S>> buffers();

  // Final 1x1x1 projection, exposed for tests and weight surgery.
  ConvLayer<S>& projection() { return projection_; }
  std::vector<RecurrentCell<S>>& forward_cells() { return forward_cells_; }
  std::vector<RecurrentCell<S>>& backward_cells() { return backward_cells_; }

 private:
  struct Block {
    ConvLayer<S> conv1, conv2;
    BatchNormLayer<S> bn1, bn2;
    Dims3 pool_kernel, pool_stride;
  };
  struct DecoderLayer {
    ConvLayer<S> deconv;
    BatchNormLayer<S> bn;
  };

  // Runs the network; stops after `stop_stage` if it is set and returns that
  // stage's features.
  BasicTensor<S> run(const BasicTensor<S>& x, bool training, std::optional<std::size_t> stop_stage);

  ModelConfig config_;
  std::vector<Block> trunk_;
  std::vector<DecoderLayer> decoder_;
  std::vector<RecurrentCell<S>> forward_cells_;
  std::vector<RecurrentCell<S>> backward_cells_;
  ConvLayer<S> projection_;
};

// Runs a dense LSTM over x: [N, C, T] and returns the hidden sequence
// [N, hidden, T]. With `reverse` the recurrence runs from the last frame to
// the first; outputs stay in original time order.
template <typename S>
BasicTensor<S> lstm_sequence(const RecurrentCell<S>& cell, const BasicTensor<S>& x, bool reverse);

// ConvLSTM over x: [N, C, T, H, W] -> [N, hidden, T, H, W].
template <typename S>
BasicTensor<S> convlstm_sequence(const RecurrentCell<S>& cell, const BasicTensor<S>& x);

// Eval-mode inference on a single clip.
PulseSignal infer(PhysNet<float>& model, const VideoClip& clip);

// First batch element of the stage output as [C, T, H, W].
Tensor dump_features(PhysNet<float>& model, const VideoClip& clip, std::size_t stage);

struct CheckpointInfo {
  std::int64_t epoch = 0;
};

// Manifest JSON line followed by one tensor record per parameter and buffer.
void save_checkpoint(const std::filesystem::path& path, PhysNet<float>& model, const CheckpointInfo& info);
PhysNet<float> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace physnet
