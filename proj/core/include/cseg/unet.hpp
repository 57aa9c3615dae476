#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cseg/layers.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

inline constexpr std::size_t kNumClasses = 5;

struct UNetConfig {
  std::size_t rank = 2;
  std::size_t in_channels = 1;
  std::size_t num_classes = kNumClasses;
  std::size_t base_channels = 16;
  /// Number of pooling stages.
  std::size_t depth = 4;
  std::size_t max_channels = 320;
  /// One entry per stage, each with one factor per spatial axis. Empty means
  /// a factor of 2 on every axis at every stage.
  std::vector<std::vector<std::size_t>> pool_factors;
  std::size_t kernel_size = 3;
  double leaky_slope = 0.01;
  double norm_epsilon = 1e-5;
  /// Nominal spatial input size. When set, build rejects configurations whose
  /// pooling would collapse an axis below one voxel.
  std::vector<std::size_t> input_extents;

  /// Throws ConfigError.
  void validate() const;
  std::size_t width(std::size_t stage) const;
  std::vector<std::size_t> pool(std::size_t stage) const;
  /// Product of the pool factors along each axis.
  std::vector<std::size_t> divisors() const;
  std::string canonical() const;
  std::uint64_t fingerprint() const;

  static UNetConfig default_2d();
  static UNetConfig default_3d();
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Serializable parameter set of one network.
struct ModelWeights {
  std::uint64_t config_fingerprint = 0;
  std::vector<NamedTensor<float>> tensors;
};

template <typename T>
struct UNetGradients {
  Tensor<T> input_grad;
  /// Aligned with UNet::parameters().
  std::vector<Tensor<T>> params;
};

/// Encoder-decoder segmentation network with skip connections and a softmax
/// head. Inputs of any spatial size are zero padded to a multiple of the
/// pooling divisors and the logits are cropped back.
template <typename T>
class UNet {
 public:
  struct BlockTrace {
    ConvContext<T> conv;
    InstanceNormContext<T> norm;
    Tensor<T> pre_activation;
  };
  /// Everything the reverse pass needs from one forward call.
  struct Trace {
    std::vector<std::size_t> pad_before, pad_after;
    std::vector<BlockTrace> blocks;
    std::vector<MaxPoolContext> pools;
    std::vector<TransposedConvContext<T>> ups;
    std::vector<std::size_t> skip_channels;
    ConvContext<T> head;
    Tensor<T> logits;
    Tensor<T> probs;
  };

  UNet(UNetConfig cfg, std::uint64_t seed);

  const UNetConfig& config() const noexcept { return cfg_; }
  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;

  /// Per-voxel class probabilities, [b, num_classes, S...].
  Tensor<T> forward(const Tensor<T>& input, Trace* trace = nullptr) const;

  /// `logit_grad` is the loss gradient w.r.t. the (cropped) pre-softmax logits.
  UNetGradients<T> backward(const Trace& trace, const Tensor<T>& logit_grad) const;

  ModelWeights export_weights() const;
  /// Refuses weights whose fingerprint, names, or shapes disagree.
  void import_weights(const ModelWeights& weights);

 private:
  struct Block {
    std::size_t weight, bias, gain, offset;
  };
  struct Up {
    std::size_t weight, bias;
  };

  std::size_t add_param(std::string name, Shape shape);
  Block add_block(const std::string& prefix, std::size_t c_in, std::size_t c_out);
  Tensor<T> run_block(const Block& b, const Tensor<T>& x, Trace* trace) const;
  Tensor<T> back_block(const Block& b, const BlockTrace& t, const Tensor<T>& grad,
                       std::vector<Tensor<T>>& param_grads) const;
  Shape kernel_shape(std::size_t c_out, std::size_t c_in, std::size_t k) const;

  UNetConfig cfg_;
  std::vector<NamedTensor<T>> params_;
  std::vector<std::pair<Block, Block>> encoder_;
  std::pair<Block, Block> bottleneck_{};
  std::vector<Up> ups_;
  std::vector<std::pair<Block, Block>> decoder_;
  Up head_{};
};

void write_weights(const ModelWeights& weights, const std::filesystem::path& path);
/// Throws FormatError for a bad magic, truncated data, or trailing bytes.
ModelWeights read_weights(const std::filesystem::path& path);

template <typename T>
void save_weights(const UNet<T>& model, const std::filesystem::path& path) {
  write_weights(model.export_weights(), path);
}

template <typename T>
void load_weights(UNet<T>& model, const std::filesystem::path& path) {
  model.import_weights(read_weights(path));
}

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace cseg
