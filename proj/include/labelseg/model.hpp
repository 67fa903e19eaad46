#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "labelseg/layers.hpp"

namespace labelseg {

enum class NormKind { kInstance, kNone };

/// Architecture hyper-parameters of the encoder-decoder network.
struct UNetConfig {
  int in_channels = 1;
  int num_classes = 8;
  int base_features = 32;
  int max_features = 320;
  /// Number of stride-2 stages; the last one is the bottleneck.
  int num_resolution_reductions = 5;
  NormKind norm = NormKind::kInstance;
  double negative_slope = 0.01;
  /// Main output plus (levels - 1) auxiliary heads at successively halved resolutions.
  int deep_supervision_levels = 4;
  std::array<std::int64_t, 3> patch_shape = {128, 160, 128};

  /// Feature width of resolution level l (0 = full resolution).
  [[nodiscard]] int width(int level) const;
  /// Throws ValidationError describing the first violated invariant.
  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

nlohmann::json to_json(const UNetConfig& c);
UNetConfig unet_config_from_json(const nlohmann::json& j, UNetConfig defaults = {});

enum class NetworkMode { kTrain, kEval };

/// Two (conv 3x3x3 -> norm -> leaky ReLU) units; the first conv may be strided.
class ConvBlock {
 public:
  struct Cache {
    nn::Tensor input;
    nn::Tensor mid;  // activation after unit 1
    nn::Tensor out;  // activation after unit 2
    nn::InstanceNorm::Cache norm1, norm2;
  };

  ConvBlock() = default;
  ConvBlock(int in, int out, int stride, NormKind norm, double slope, const std::string& name);

  [[nodiscard]] nn::Tensor forward(const nn::Tensor& x, Cache* cache = nullptr) const;
  nn::Tensor backward(Cache& cache, nn::Tensor dy, bool need_input_grad = true);

  void init(std::mt19937_64& rng);
  std::vector<nn::Param*> params();

 private:
  NormKind norm_ = NormKind::kInstance;
  float slope_ = 0.01f;
  nn::Conv3d conv1_, conv2_;
  nn::InstanceNorm norm1_, norm2_;
};

/// 3D U-Net with skip connections, transposed-convolution upsampling, and
/// deep-supervision heads. Outputs are per-voxel class probabilities.
class Network {
 public:
  /// Activations retained from a training forward pass.
  struct TrainCache {
    std::vector<ConvBlock::Cache> encoder;
    std::vector<ConvBlock::Cache> decoder;
    std::vector<nn::Tensor> up_inputs;
    std::vector<nn::Tensor> probs;  // one per supervised level
  };

  Network(const UNetConfig& config, std::uint64_t seed);

  [[nodiscard]] const UNetConfig& config() const { return config_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] NetworkMode mode() const { return mode_; }
  void set_mode(NetworkMode m) { mode_ = m; }

  /// Probability maps: index 0 at input resolution; in train mode also the auxiliary maps
  /// at 1/2, 1/4, ... resolution. Throws ShapeError unless the input matches the patch shape
  /// (or `any_shape` is set and every dimension is divisible by 2^reductions).
  [[nodiscard]] std::vector<nn::Tensor> forward(const nn::Tensor& x, bool any_shape = false) const;

  /// Forward pass retaining activations for backward(); always yields all supervised levels.
  std::vector<nn::Tensor> forward_train(const nn::Tensor& x, TrainCache& cache, bool any_shape = false) const;

  /// Accumulates parameter gradients given dL/dprob for each supervised level.
  void backward(TrainCache& cache, const std::vector<nn::Tensor>& dprobs);

  /// Parameters in a stable order (names are unique).
  std::vector<nn::Param*> params();
  [[nodiscard]] std::vector<const nn::Param*> params() const;
  void zero_grad();

 private:
  void check_input(const nn::Tensor& x, bool any_shape) const;

  UNetConfig config_;
  std::uint64_t seed_ = 0;
  NetworkMode mode_ = NetworkMode::kEval;
  std::vector<ConvBlock> encoder_;          // 0..R
  std::vector<nn::ConvTranspose3d> up_;     // index l: level l+1 -> l
  std::vector<ConvBlock> decoder_;          // index l: block at level l
  std::vector<nn::Conv3d> heads_;           // index s: head at level s
};

/// Builds a He-initialized network; identical seeds give identical parameters.
std::unique_ptr<Network> build_network(const UNetConfig& config, std::uint64_t seed);

std::size_t count_parameters(const Network& net);

/// Metadata stored next to the weights.
struct CheckpointInfo {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string split_id;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Network& net, const CheckpointInfo& info, const std::filesystem::path& path);

struct LoadedCheckpoint {
  std::unique_ptr<Network> network;
  CheckpointInfo info;
};

/// Loads and verifies a checkpoint. When `expected` is given, its num_classes, in_channels,
/// and patch_shape must match the stored configuration.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected = nullptr);

/// Network input tensor (one channel) from an image patch.
nn::Tensor to_tensor(const Volume3D& patch);

}  // namespace labelseg
