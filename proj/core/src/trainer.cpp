#include "cseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "cseg/errors.hpp"
#include "cseg/random.hpp"

namespace cseg {
namespace {

// Reverses the given spatial axis of image and labels in place.
template <typename T>
void flip_axis(Sample<T>& s, std::size_t axis) {
  const Shape& shape = s.image.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 2; a < 2 + axis; ++a) outer *= shape[a];
  for (std::size_t a = 3 + axis; a < shape.size(); ++a) inner *= shape[a];
  const std::size_t len = shape[2 + axis];
  const std::size_t plane = s.image.spatial_size();
  auto flip = [&](auto* data) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len / 2; ++i)
        for (std::size_t k = 0; k < inner; ++k)
          std::swap(data[(o * len + i) * inner + k], data[(o * len + (len - 1 - i)) * inner + k]);
  };
  for (std::size_t p = 0; p < s.image.batch() * s.image.channels(); ++p) flip(s.image.data() + p * plane);
  for (std::size_t b = 0; b < s.image.batch(); ++b) flip(s.labels.data() + b * plane);
}

template <typename T>
Sample<T> augmented(const Sample<T>& in, std::mt19937_64& rng, const AugmentOptions& opt) {
  Sample<T> s = in;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  if (opt.flips) {
    for (std::size_t axis = 0; axis < 2 && axis < s.image.spatial_rank(); ++axis)
      if (u(rng) > 0) flip_axis(s, axis);
  }
  const double scale = 1.0 + u(rng) * opt.intensity_scale;
  const double shift = u(rng) * opt.intensity_shift;
  const std::size_t plane = s.image.spatial_size();
  for (std::size_t b = 0; b < s.image.batch(); ++b) {
    T* x = s.image.data() + b * s.image.channels() * plane;
    for (std::size_t i = 0; i < plane; ++i) x[i] = static_cast<T>(x[i] * scale + shift);
  }
  return s;
}

}  // namespace

template <typename T>
EpochStats train_epoch(UNet<T>& model, std::span<const Sample<T>> samples, AdamState<T>& optimizer,
                       std::uint64_t seed, std::size_t epoch, const AugmentOptions& augment,
                       const std::function<void(const std::string&)>& on_step) {
  if (samples.empty()) throw std::invalid_argument("train_epoch: no training samples");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  stats.epoch = epoch;
  typename UNet<T>::Trace trace;
  for (std::size_t idx : order) {
    const Sample<T>* sample = &samples[idx];
    Sample<T> aug;
    if (augment.enabled) {
      aug = augmented(*sample, rng, augment);
      sample = &aug;
    }
    const Tensor<T> probs = model.forward(sample->image, &trace);
    auto loss = combined_loss(probs, std::span<const std::uint8_t>(sample->labels));
    if (!std::isfinite(loss.value.total))
      throw NumericError("train_epoch: non-finite loss on case '" + sample->case_id + "' in epoch " +
                         std::to_string(epoch));
    if (on_step) on_step(sample->case_id);
    auto grads = model.backward(trace, loss.logit_grad);
    adam_step(optimizer, model.parameters(), grads.params);
    stats.mean.ce += loss.value.ce;
    stats.mean.dice += loss.value.dice;
    stats.mean.total += loss.value.total;
  }
  const double n = static_cast<double>(samples.size());
  stats.mean.ce /= n;
  stats.mean.dice /= n;
  stats.mean.total /= n;
  stats.lr = poly_learning_rate(optimizer.options, optimizer.step);
  return stats;
}

template <typename T>
std::vector<EpochStats> train_model(UNet<T>& model, std::span<const Sample<T>> samples, const TrainOptions& options) {
  AdamOptions adam = options.adam;
  adam.total_steps = options.epochs * samples.size();
  AdamState<T> state(adam, model.parameters());
  if (!options.log_path.empty()) std::filesystem::remove(options.log_path);

  std::vector<EpochStats> history;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    EpochStats stats;
    try {
      stats = train_epoch(model, samples, state, options.seed, e, options.augment, options.on_step);
    } catch (const NumericError& err) {
      const std::string where = options.checkpoint_path.empty() || e == 0
                                    ? std::string("no checkpoint")
                                    : "last good checkpoint " + options.checkpoint_path.string() + " (epoch " +
                                          std::to_string(e - 1) + ")";
      throw NumericError(std::string(err.what()) + "; training diverged, " + where);
    }
    history.push_back(stats);
    if (!options.log_path.empty()) append_training_log(options.log_path, stats);
    if (!options.checkpoint_path.empty()) save_weights(model, options.checkpoint_path);
    if (options.on_epoch) options.on_epoch(stats);
  }
  return history;
}

void append_training_log(const std::filesystem::path& path, const EpochStats& stats) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open training log " + path.string());
  if (fresh) out << "epoch,ce,dice,total,lr\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.9g,%.9g\n", stats.epoch, stats.mean.ce, stats.mean.dice,
                stats.mean.total, stats.lr);
  out << line;
}

template EpochStats train_epoch(UNet<float>&, std::span<const Sample<float>>, AdamState<float>&, std::uint64_t,
                                std::size_t, const AugmentOptions&,
                                const std::function<void(const std::string&)>&);
template EpochStats train_epoch(UNet<double>&, std::span<const Sample<double>>, AdamState<double>&, std::uint64_t,
                                std::size_t, const AugmentOptions&,
                                const std::function<void(const std::string&)>&);
template std::vector<EpochStats> train_model(UNet<float>&, std::span<const Sample<float>>, const TrainOptions&);
template std::vector<EpochStats> train_model(UNet<double>&, std::span<const Sample<double>>, const TrainOptions&);

}  // namespace cseg
