#pragma once

#include <cstdint>
#include <vector>

#include "cseg/image.hpp"

namespace cseg {

struct ComponentLabeling {
  /// 0 for background, otherwise component id 1..n in order of first voxel in scan order.
  std::vector<std::uint32_t> ids;
  /// sizes[k] is the voxel count of component k + 1.
  std::vector<std::size_t> sizes;
};

/// Connected components of the nonzero voxels; connectivity 6, 18, or 26.
ComponentLabeling connected_components(const Mask& mask, int connectivity = 26);

}  // namespace cseg
