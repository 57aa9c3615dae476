#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cseg {

using Extents3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Scalar 3D image with physical voxel spacing. Voxels are stored x fastest,
/// then y, then z (the NIfTI on-disk order).
template <typename V>
struct Image {
  Extents3 extents{1, 1, 1};
  Spacing3 spacing_mm{1.0, 1.0, 1.0};
  std::vector<V> voxels;
  std::string case_id;

  Image() : voxels(1) {}
  Image(Extents3 ext, Spacing3 spacing, V fill = V{}, std::string id = {})
      : extents(ext), spacing_mm(spacing), voxels(ext[0] * ext[1] * ext[2], fill), case_id(std::move(id)) {}

  std::size_t size() const noexcept { return voxels.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return x + extents[0] * (y + extents[1] * z);
  }
  V& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
  const V& at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }

  double voxel_volume_mm3() const noexcept { return spacing_mm[0] * spacing_mm[1] * spacing_mm[2]; }

  /// Throws ShapeError on non-positive spacing or a voxel count mismatch.
  void validate() const;
};

using Volume = Image<float>;
/// Class IDs 0 background, 1 cavity, 2 normal myocardium, 3 infarction, 4 no-reflow.
using LabelMap = Image<std::uint8_t>;
/// Binary mask, values 0 or 1.
using Mask = Image<std::uint8_t>;

enum Label : std::uint8_t { kBackground = 0, kCavity = 1, kMyocardium = 2, kInfarction = 3, kNoReflow = 4 };

/// Equal extents and spacing equal to within 1e-5 relative.
template <typename A, typename B>
bool same_geometry(const Image<A>& a, const Image<B>& b) {
  if (a.extents != b.extents) return false;
  for (int i = 0; i < 3; ++i) {
    const double d = a.spacing_mm[i] - b.spacing_mm[i];
    if ((d < 0 ? -d : d) > 1e-5 * a.spacing_mm[i]) return false;
  }
  return true;
}

/// Throws ShapeError unless every label lies in 0..4.
void validate_labels(const LabelMap& labels);

/// Mean 0, variance 1 over the whole volume; constant volumes become zeros.
Volume zscore_normalize(const Volume& v);

/// Slice k is the z = k plane, returned as an image with nz = 1 that keeps
/// the full spacing.
template <typename V>
std::vector<Image<V>> extract_slices(const Image<V>& v);

/// Inverse of extract_slices. Throws ShapeError on mismatched slices.
template <typename V>
Image<V> stack_slices(const std::vector<Image<V>>& slices);

}  // namespace cseg
