#pragma once

#include <filesystem>

#include "cseg/config.hpp"

namespace cseg::testing {

/// A cross-validation run that finishes in seconds: 10 small phantoms, five
/// folds, one epoch per stage, depth-1 networks.
inline RunConfig tiny_cv_config(const std::filesystem::path& out) {
  RunConfig c = RunConfig::desk();
  c.output_dir = out;
  c.phantom.extents = {32, 32, 4};
  c.phantom.cavity_radius = {4, 6};
  c.phantom.wall_thickness = {2.5, 3.5};
  c.cv_cases = 10;
  c.folds = 5;
  c.test_cases = 4;
  c.train_cases = 6;
  c.val_cases = 2;
  c.unet2d.depth = 1;
  c.unet2d.base_channels = 2;
  c.unet3d.depth = 1;
  c.unet3d.base_channels = 2;
  c.unet3d.pool_factors = {{2, 2, 1}};
  c.train2d.epochs = 1;
  c.train3d.epochs = 1;
  return c;
}

}  // namespace cseg::testing
