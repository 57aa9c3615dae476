#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cseg/adam.hpp"
#include "cseg/loss.hpp"
#include "cseg/unet.hpp"

namespace cseg {

/// One training example: network input [1,c,S...] and its labels in tensor order.
template <typename T>
struct Sample {
  std::string case_id;
  Tensor<T> image;
  std::vector<std::uint8_t> labels;
};

struct AugmentOptions {
  bool enabled = false;
  /// Random flips of the first two spatial axes.
  bool flips = true;
  /// Channel 0 becomes x * (1 + u1*scale) + u2*shift with u ~ U(-1,1).
  double intensity_scale = 0.1;
  double intensity_shift = 0.1;
};

struct EpochStats {
  std::size_t epoch = 0;
  LossValue mean;
  /// Learning rate after the last step of the epoch.
  double lr = 0;
};

/// One pass over `samples` in a seeded shuffled order, one optimiser step per
/// sample. Returns the arithmetic mean of the per-sample losses.
template <typename T>
EpochStats train_epoch(UNet<T>& model, std::span<const Sample<T>> samples, AdamState<T>& optimizer,
                       std::uint64_t seed, std::size_t epoch, const AugmentOptions& augment = {},
                       const std::function<void(const std::string&)>& on_step = {});

struct TrainOptions {
  std::size_t epochs = 1;
  AdamOptions adam;
  std::uint64_t seed = 0;
  AugmentOptions augment;
  /// CSV log (epoch,ce,dice,total,lr); empty disables it.
  std::filesystem::path log_path;
  /// Written after every finished epoch; empty disables it.
  std::filesystem::path checkpoint_path;
  /// Called after every finished epoch.
  std::function<void(const EpochStats&)> on_epoch;
  /// Called with the sample's case id before each gradient step.
  std::function<void(const std::string&)> on_step;
};

/// Runs `epochs` epochs with a polynomial schedule over epochs*samples steps.
/// A non-finite loss or gradient raises NumericError naming the last good
/// checkpoint.
template <typename T>
std::vector<EpochStats> train_model(UNet<T>& model, std::span<const Sample<T>> samples, const TrainOptions& options);

void append_training_log(const std::filesystem::path& path, const EpochStats& stats);

}  // namespace cseg
