#include "cseg/components.hpp"

#include <array>
#include <stdexcept>

namespace cseg {

ComponentLabeling connected_components(const Mask& mask, int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw std::invalid_argument("connected_components: connectivity must be 6, 18, or 26");
  const auto [nx, ny, nz] = mask.extents;

  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = (dx != 0) + (dy != 0) + (dz != 0);
        if (n == 0 || (connectivity == 6 && n > 1) || (connectivity == 18 && n > 2)) continue;
        offsets.push_back({dx, dy, dz});
      }

  ComponentLabeling out;
  out.ids.assign(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.voxels[start] || out.ids[start]) continue;
    const auto id = static_cast<std::uint32_t>(out.sizes.size() + 1);
    std::size_t count = 0;
    out.ids[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++count;
      const long x = static_cast<long>(i % nx), y = static_cast<long>((i / nx) % ny), z = static_cast<long>(i / (nx * ny));
      for (const auto& o : offsets) {
        const long qx = x + o[0], qy = y + o[1], qz = z + o[2];
        if (qx < 0 || qy < 0 || qz < 0 || qx >= static_cast<long>(nx) || qy >= static_cast<long>(ny) ||
            qz >= static_cast<long>(nz))
          continue;
        const std::size_t q = mask.index(static_cast<std::size_t>(qx), static_cast<std::size_t>(qy), static_cast<std::size_t>(qz));
        if (mask.voxels[q] && !out.ids[q]) {
          out.ids[q] = id;
          stack.push_back(q);
        }
      }
    }
    out.sizes.push_back(count);
  }
  return out;
}

}  // namespace cseg
