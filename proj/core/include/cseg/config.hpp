#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "cseg/phantom.hpp"
#include "cseg/trainer.hpp"
#include "cseg/unet.hpp"

namespace cseg {

struct StageTrainConfig {
  std::size_t epochs = 1;
  double lr0 = 0.01;
  std::uint64_t seed = 0;
  bool augment = false;
};

/// Everything a run needs. Stored as a JSON document with the sections data,
/// phantom, split, cv, unet2d, unet3d, train2d, train3d and postprocess.
struct RunConfig {
  /// Dataset directory with images/ and labels/; empty means synthetic phantoms.
  std::filesystem::path data_dir;
  /// Optional test set for ensemble inference; empty means synthetic phantoms.
  std::filesystem::path test_dir;
  std::filesystem::path output_dir;

  PhantomSpec phantom;
  double pathology_rate = 0.67;

  std::size_t train_cases = 40;
  std::size_t val_cases = 10;

  std::size_t cv_cases = 100;
  std::size_t folds = 5;
  std::size_t test_cases = 20;
  std::uint64_t split_seed = 0;

  UNetConfig unet2d;
  UNetConfig unet3d;
  StageTrainConfig train2d;
  StageTrainConfig train3d;
  std::size_t min_component_voxels = 10;
  /// Reuse fold weights whose recorded config hash matches.
  bool resume = true;

  /// Throws ConfigError.
  void validate() const;
  /// FNV-1a over the canonical JSON, excluding output_dir and resume.
  std::uint64_t hash() const;
  TrainOptions train_options(const StageTrainConfig& stage) const;

  /// The default desk-scale setup: 64x64x8 phantoms, 40/10 split, 2D depth 3
  /// base 8, 3D depth 2 base 8.
  static RunConfig desk();
};

/// Missing keys keep the desk defaults; unknown keys are errors.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string dump_config(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace cseg
