#pragma once

// Differentiable operators over Graph<T>. Every op validates shapes (ConfigError)
// and rejects non-finite results (NumericError).

#include <optional>

#include "cmrlm/tensor.hpp"

namespace cmrlm {

enum class Mode { Train, Eval };

/// Running statistics of one batch-norm layer.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  bool initialized = false;

  BatchNormState() = default;
  explicit BatchNormState(int channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kDiceEps = 1e-5;

/// 3x3, stride 1, zero padding 1. input [B,Cin,H,W], weight [Cout,Cin,3,3], bias [Cout].
template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias);

template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias) {
  return conv2d<T>(input, weight, std::optional<Var<T>>(bias));
}

template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight) {
  return conv2d<T>(input, weight, std::optional<Var<T>>());
}

/// Per-channel normalisation over (B,H,W). Train mode uses batch statistics and
/// updates `state`; eval mode uses the running statistics.
template <class T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode);

template <class T>
Var<T> leaky_relu(Var<T> input, T slope);

/// 2x2 max pooling; ties route the gradient to the first element in row-major order.
template <class T>
Var<T> max_pool2(Var<T> input);

/// Nearest-neighbour x2.
template <class T>
Var<T> upsample2(Var<T> input);

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b);

/// Channels [begin, end) of a rank-4 tensor.
template <class T>
Var<T> slice_channels(Var<T> input, int begin, int end);

template <class T>
Var<T> softmax_channels(Var<T> scores);

/// Mean over batch and pixels of sum_c t * (log t - log max(p, 1e-12)); 0 log 0 = 0.
template <class T>
Var<T> kl_loss(const Tensor<T>& target, Var<T> probs);

/// Mean over batch and channels 1..C-1 of 1 - (2 sum pg + eps) / (sum p^2 + sum g^2 + eps).
template <class T>
Var<T> soft_dice_loss(Var<T> probs, const Tensor<T>& target);

template <class T>
Var<T> add(Var<T> a, Var<T> b);

template <class T>
Var<T> sum(Var<T> input);

template <class T>
Var<T> sum_squares(Var<T> input);

/// sum_i input_i * weights_i; a random projection used by gradient checks.
template <class T>
Var<T> dot(Var<T> input, const Tensor<T>& weights);

}  // namespace cmrlm
