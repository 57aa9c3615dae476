#pragma once

#include <cstdint>
#include <span>

#include "cseg/tensor.hpp"

namespace cseg {

inline constexpr double kDiceSmoothing = 1e-5;

/// A scalar loss and its gradient with respect to the pre-softmax logits.
template <typename T>
struct LossResult {
  double value = 0;
  Tensor<T> logit_grad;
};

struct LossValue {
  double total = 0;
  double ce = 0;
  double dice = 0;
};

template <typename T>
struct CombinedLossResult {
  LossValue value;
  Tensor<T> logit_grad;
};

/// Mean over voxels of -log p(true class). `probs` is softmax output
/// [b,5,S...]; `target` holds b*prod(S) labels in 0..4, in tensor order.
template <typename T>
LossResult<T> ce_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target);

/// 1 - mean soft Dice over the foreground classes 1..4 that occur in the
/// target; 0 when the target has no foreground. Per class:
/// (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
template <typename T>
LossResult<T> soft_dice_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target,
                             double smoothing = kDiceSmoothing);

template <typename T>
CombinedLossResult<T> combined_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target);

}  // namespace cseg
