#include "cseg/loss.hpp"

#include <array>
#include <cmath>
#include <limits>

#include "cseg/errors.hpp"
#include "cseg/layers.hpp"
#include "cseg/unet.hpp"

namespace cseg {
namespace {

template <typename T>
void check_inputs(const Tensor<T>& probs, std::span<const std::uint8_t> target, const char* op) {
  if (probs.rank() < 3 || probs.channels() != kNumClasses)
    throw ShapeError(std::string(op) + ": expected probabilities [b,5,S...], got " + shape_str(probs.shape()));
  if (target.size() != probs.batch() * probs.spatial_size())
    throw ShapeError(std::string(op) + ": target has " + std::to_string(target.size()) + " labels, expected " +
                     std::to_string(probs.batch() * probs.spatial_size()));
  for (auto l : target)
    if (l >= kNumClasses) throw std::invalid_argument(std::string(op) + ": label " + std::to_string(l) + " outside 0..4");
}

}  // namespace

template <typename T>
LossResult<T> ce_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target) {
  check_inputs(probs, target, "ce_loss");
  const std::size_t n = probs.spatial_size();
  const std::size_t c = kNumClasses;
  const double inv_m = 1.0 / static_cast<double>(target.size());
  LossResult<T> r;
  r.logit_grad = Tensor<T>(probs.shape());
  double sum = 0;
  for (std::size_t b = 0; b < probs.batch(); ++b) {
    const T* p = probs.data() + b * c * n;
    T* g = r.logit_grad.data() + b * c * n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t t = target[b * n + i];
      const double pt = std::max<double>(p[t * n + i], std::numeric_limits<T>::min());
      sum -= std::log(pt);
      for (std::size_t k = 0; k < c; ++k)
        g[k * n + i] = static_cast<T>((p[k * n + i] - (k == t ? 1.0 : 0.0)) * inv_m);
    }
  }
  r.value = sum * inv_m;
  return r;
}

template <typename T>
LossResult<T> soft_dice_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target, double smoothing) {
  check_inputs(probs, target, "soft_dice_loss");
  const std::size_t n = probs.spatial_size();
  const std::size_t c = kNumClasses;
  std::array<double, kNumClasses> inter{}, psum{}, gsum{};
  for (std::size_t b = 0; b < probs.batch(); ++b) {
    const T* p = probs.data() + b * c * n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t t = target[b * n + i];
      gsum[t] += 1;
      inter[t] += p[t * n + i];
      for (std::size_t k = 1; k < c; ++k) psum[k] += p[k * n + i];
    }
  }

  std::array<double, kNumClasses> coef{};  // dL/dp_k = coef_a[k] * g - coef_b[k]
  std::array<double, kNumClasses> coef_g{};
  std::size_t present = 0;
  for (std::size_t k = 1; k < c; ++k) present += gsum[k] > 0;

  LossResult<T> r;
  r.logit_grad = Tensor<T>(probs.shape());
  if (present == 0) return r;

  double dice_sum = 0;
  for (std::size_t k = 1; k < c; ++k) {
    if (gsum[k] == 0) continue;
    const double num = 2 * inter[k] + smoothing;
    const double den = psum[k] + gsum[k] + smoothing;
    dice_sum += num / den;
    // d dice / d p_i = (2 g_i den - num) / den^2, loss carries -1/present.
    coef_g[k] = -2.0 / den / static_cast<double>(present);
    coef[k] = num / (den * den) / static_cast<double>(present);
  }
  r.value = 1.0 - dice_sum / static_cast<double>(present);

  Tensor<T> prob_grad(probs.shape());
  for (std::size_t b = 0; b < probs.batch(); ++b) {
    T* g = prob_grad.data() + b * c * n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t t = target[b * n + i];
      for (std::size_t k = 1; k < c; ++k) g[k * n + i] = static_cast<T>(coef[k] + (t == k ? coef_g[k] : 0.0));
    }
  }
  r.logit_grad = softmax_channels_backward(probs, prob_grad);
  return r;
}

template <typename T>
CombinedLossResult<T> combined_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target) {
  auto ce = ce_loss(probs, target);
  auto dice = soft_dice_loss(probs, target);
  CombinedLossResult<T> r;
  r.value.ce = ce.value;
  r.value.dice = dice.value;
  r.value.total = ce.value + dice.value;
  r.logit_grad = std::move(ce.logit_grad);
  for (std::size_t i = 0; i < r.logit_grad.size(); ++i) r.logit_grad[i] += dice.logit_grad[i];
  return r;
}

#define CSEG_INSTANTIATE_LOSS(T)                                                                  \
  template LossResult<T> ce_loss(const Tensor<T>&, std::span<const std::uint8_t>);                \
  template LossResult<T> soft_dice_loss(const Tensor<T>&, std::span<const std::uint8_t>, double); \
  template CombinedLossResult<T> combined_loss(const Tensor<T>&, std::span<const std::uint8_t>);

CSEG_INSTANTIATE_LOSS(float)
CSEG_INSTANTIATE_LOSS(double)

#undef CSEG_INSTANTIATE_LOSS

}  // namespace cseg
