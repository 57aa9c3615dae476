#include "cseg/adam.hpp"

#include <cmath>

#include "cseg/errors.hpp"

namespace cseg {

double poly_learning_rate(const AdamOptions& opt, std::size_t step) {
  if (opt.total_steps == 0 || step >= opt.total_steps) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(opt.total_steps);
  return opt.lr0 * std::pow(frac, opt.power);
}

template <typename T>
AdamState<T>::AdamState(AdamOptions opt, const std::vector<NamedTensor<T>>& params) : options(opt) {
  if (!(opt.lr0 >= 0) || !(opt.beta1 >= 0 && opt.beta1 < 1) || !(opt.beta2 >= 0 && opt.beta2 < 1) || !(opt.eps > 0))
    throw ConfigError("adam: invalid hyperparameters");
  for (const auto& p : params) {
    first_moment.emplace_back(p.value.shape());
    second_moment.emplace_back(p.value.shape());
  }
}

template <typename T>
void adam_step(AdamState<T>& state, std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter, gradient, and moment counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape() || state.first_moment[i].shape() != params[i].value.shape())
      throw ShapeError("adam_step: gradient shape " + shape_str(grads[i].shape()) + " does not match parameter '" +
                       params[i].name + "' " + shape_str(params[i].value.shape()));
    for (auto g : grads[i].values())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name + "' at step " +
                           std::to_string(state.step + 1));
  }

  const auto& o = state.options;
  const std::size_t t = ++state.step;
  const double lr = poly_learning_rate(o, t);
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i].value.data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const T* g = grads[i].data();
    for (std::size_t j = 0; j < params[i].value.size(); ++j) {
      const double mj = o.beta1 * m[j] + (1 - o.beta1) * g[j];
      const double vj = o.beta2 * v[j] + (1 - o.beta2) * static_cast<double>(g[j]) * g[j];
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(w[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + o.eps));
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(AdamState<float>&, std::vector<NamedTensor<float>>&, const std::vector<Tensor<float>>&);
template void adam_step(AdamState<double>&, std::vector<NamedTensor<double>>&, const std::vector<Tensor<double>>&);

}  // namespace cseg
