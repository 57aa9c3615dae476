#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cseg/image.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

struct FoldSplit {
  std::uint64_t seed = 0;
  std::size_t k = 0;
  std::map<std::string, std::size_t> fold_of;

  std::vector<std::string> held_out(std::size_t fold) const;
  /// Every case outside `fold`, in sorted id order.
  std::vector<std::string> training(std::size_t fold) const;
};

/// Seeded shuffle followed by a contiguous partition; fold sizes differ by
/// at most one. Throws ConfigError for k < 2, fewer cases than folds, or
/// duplicate ids.
FoldSplit make_folds(std::vector<std::string> case_ids, std::size_t k, std::uint64_t seed);

/// Per-voxel modal label; ties go to the smallest tied label. Throws
/// ShapeError on an empty list or mismatched geometry.
LabelMap majority_vote(std::span<const LabelMap> maps);

/// Vote fractions per class, [5, nx, ny, nz], in tensor order.
Tensor<float> vote_fractions(std::span<const LabelMap> maps);

}  // namespace cseg
