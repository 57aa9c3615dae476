#pragma once

// Differentiable layer primitives shared by the 2D and 3D networks.
//
// Every forward op is a pure function of its arguments. Ops that need
// state for the reverse pass take an optional context pointer which the
// forward call fills; the matching *_backward function consumes it.
// Spatial parameters (stride, padding, window) take one entry per spatial
// axis, or a single entry that is broadcast to all axes.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

template <typename T>
struct LayerGrad {
  Tensor<T> input_grad;
  std::map<std::string, Tensor<T>> param_grads;
};

template <typename T>
struct ConvContext {
  Tensor<T> input;
  Tensor<T> kernel;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;
  bool valid = false;
};

/// Cross-correlation. input [b,c_in,S...], kernel [c_out,c_in,K...] with odd K,
/// bias [c_out]. Output extent per axis is floor((S + 2*pad - K)/stride) + 1.
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::span<const std::size_t> stride, std::span<const std::size_t> padding,
                       ConvContext<T>* ctx = nullptr);

/// Gradients for "input", and params "weight" and "bias".
template <typename T>
LayerGrad<T> conv_backward(const ConvContext<T>& ctx, const Tensor<T>& out_grad);

template <typename T>
struct TransposedConvContext {
  Tensor<T> input;
  Tensor<T> kernel;
  std::vector<std::size_t> stride;
  bool valid = false;
};

/// Adjoint of a strided convolution. kernel is [c_in,c_out,K...]; output extent
/// per axis is (S - 1)*stride + K, so K == stride multiplies extents by stride.
template <typename T>
Tensor<T> upsample_transposed_conv(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                                   std::span<const std::size_t> stride,
                                   TransposedConvContext<T>* ctx = nullptr);

template <typename T>
LayerGrad<T> upsample_transposed_conv_backward(const TransposedConvContext<T>& ctx, const Tensor<T>& out_grad);

struct MaxPoolContext {
  Shape input_shape;
  /// Flat input index of the selected element, one per output element.
  std::vector<std::size_t> argmax;
};

/// Per-window maximum with floor truncation of incomplete windows. Ties pick
/// the first element in scan order.
template <typename T>
Tensor<T> maxpool(const Tensor<T>& input, std::span<const std::size_t> window, std::span<const std::size_t> stride,
                  MaxPoolContext* ctx = nullptr);

template <typename T>
Tensor<T> maxpool_backward(const MaxPoolContext& ctx, const Tensor<T>& out_grad);

/// Concatenates along the channel axis, a's channels first. A default
/// constructed (empty) tensor is the identity.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Splits a concatenated gradient back into the (a, b) parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>& out_grad, std::size_t a_channels);

template <typename T>
struct InstanceNormContext {
  Tensor<T> normalized;           // (x - mean) * inv_std
  std::vector<double> inv_std;    // per (batch, channel)
  Tensor<T> gain;
  bool valid = false;
};

/// Per (batch, channel) slice: (x - mean)/sqrt(var + epsilon) * gain + offset,
/// with the biased variance.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& offset, double epsilon,
                        InstanceNormContext<T>* ctx = nullptr);

/// Gradients for "input", and params "gain" and "offset".
template <typename T>
LayerGrad<T> instance_norm_backward(const InstanceNormContext<T>& ctx, const Tensor<T>& out_grad);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope);

/// Uses the forward input to pick the branch.
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& input, T slope, const Tensor<T>& out_grad);

/// Softmax over the channel axis, stabilised by max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Vector-Jacobian product of softmax given its output.
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& out_grad);

/// Zero padding of the spatial axes: `before[i]` and `after[i]` voxels on axis i.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& input, std::span<const std::size_t> before, std::span<const std::size_t> after);

/// Inverse of pad_spatial; also the gradient of pad_spatial.
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& input, std::span<const std::size_t> before, std::span<const std::size_t> after);

}  // namespace cseg
