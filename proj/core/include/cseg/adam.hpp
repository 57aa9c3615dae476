#pragma once

#include <cstddef>
#include <vector>

#include "cseg/tensor.hpp"
#include "cseg/unet.hpp"

namespace cseg {

struct AdamOptions {
  double lr0 = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Polynomial decay lr(t) = lr0 * (1 - t/total_steps)^power.
  double power = 0.9;
  std::size_t total_steps = 1;
};

/// lr(t), clamped to 0 once t reaches total_steps.
double poly_learning_rate(const AdamOptions& opt, std::size_t step);

template <typename T>
struct AdamState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  AdamState() = default;
  AdamState(AdamOptions opt, const std::vector<NamedTensor<T>>& params);

  double current_lr() const { return poly_learning_rate(options, step); }
};

/// One bias-corrected Adam update using lr(step + 1). Throws NumericError,
/// leaving params and state untouched, if any gradient is non-finite.
template <typename T>
void adam_step(AdamState<T>& state, std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads);

}  // namespace cseg
