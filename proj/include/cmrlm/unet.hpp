#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmrlm/ops.hpp"
#include "cmrlm/tensor.hpp"

namespace cmrlm {

/// Resolution ladder of the heat-map U-Net. Level L runs at 1/2^L of the input
/// resolution with base_filters * 2^L channels.
struct ArchConfig {
  int num_layers = 4;
  std::vector<int> blocks_per_layer{3, 3, 4, 4};
  int base_filters = 32;
  int in_channels = 1;
  int out_channels = 4;
  double leaky_slope = 0.01;

  /// Four levels, 3-4 blocks per level, 32 base filters.
  static ArchConfig full();
  /// Four levels, one block per level, 8 base filters: the phantom-scale network.
  static ArchConfig desk();

  void validate() const;  // throws ConfigError
  int filters(int level) const { return base_filters << level; }
  /// Spatial extents must be multiples of this.
  int required_divisor() const { return 1 << (num_layers - 1); }

  bool operator==(const ArchConfig&) const = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <class T>
struct NamedNormState {
  std::string name;
  BatchNormState<T> state;
};

/// Spatial shape of the feature map at each encoder level, recorded by forward().
struct ForwardTrace {
  std::vector<std::array<int, 2>> level_extents;
};

template <class T>
class UNet {
 public:
  UNet() = default;

  /// Deterministic He fan-in initialisation from `seed`; gamma = 1, beta = 0, head bias = 0.
  static UNet build(const ArchConfig& arch, std::uint64_t seed);

  const ArchConfig& arch() const noexcept { return arch_; }

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  std::vector<NamedNormState<T>>& norm_states() noexcept { return norms_; }
  const std::vector<NamedNormState<T>>& norm_states() const noexcept { return norms_; }

  std::size_t parameter_count() const;
  void zero_grad();

  /// input [B, in_channels, H, W] -> scores [B, out_channels, H, W]. Train mode
  /// normalises with batch statistics and updates the running statistics.
  Var<T> forward(Graph<T>& graph, Var<T> input, Mode mode, ForwardTrace* trace = nullptr);

  /// Eval-mode scores without recording a backward tape. Does not mutate the model.
  Tensor<T> predict(const Tensor<T>& batch) const;

  /// Eval-mode per-pixel class probabilities.
  Tensor<T> predict_probs(const Tensor<T>& batch) const;

  template <class U>
  UNet<U> cast() const;

 private:
  template <class>
  friend class UNet;

  struct ConvBn {
    int weight = -1;
    int gamma = -1;
    int beta = -1;
    int norm = -1;
  };
  struct Block {
    ConvBn first;
    ConvBn second;
  };

  Var<T> run_conv_bn(Graph<T>& g, Var<T> x, const ConvBn& layer, Mode mode);
  Var<T> run_block(Graph<T>& g, Var<T> x, const Block& block, Mode mode);
  void assemble();

  ArchConfig arch_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedNormState<T>> norms_;
  std::vector<std::vector<Block>> encoder_;
  std::vector<std::vector<Block>> decoder_;  // decoder_[L] for L = 0 .. num_layers - 2
  int head_weight_ = -1;
  int head_bias_ = -1;
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace cmrlm
