#include "cseg/image.hpp"

#include <algorithm>
#include <cmath>

#include "cseg/errors.hpp"

namespace cseg {

template <typename V>
void Image<V>::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (extents[i] == 0) throw ShapeError("image '" + case_id + "': zero extent");
    if (!(spacing_mm[i] > 0) || !std::isfinite(spacing_mm[i]))
      throw ShapeError("image '" + case_id + "': spacing must be strictly positive");
  }
  if (voxels.size() != extents[0] * extents[1] * extents[2])
    throw ShapeError("image '" + case_id + "': voxel count does not match extents");
}

template struct Image<float>;
template struct Image<std::uint8_t>;

void validate_labels(const LabelMap& labels) {
  labels.validate();
  for (auto l : labels.voxels)
    if (l > kNoReflow)
      throw ShapeError("label map '" + labels.case_id + "': label " + std::to_string(l) + " outside 0..4");
}

Volume zscore_normalize(const Volume& v) {
  if (v.size() < 2) throw ShapeError("zscore_normalize: need at least 2 voxels");
  double mean = 0;
  for (float x : v.voxels) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v.voxels) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  Volume out = v;
  const double sd = std::sqrt(var);
  if (sd < 1e-8) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  for (std::size_t i = 0; i < v.size(); ++i) out.voxels[i] = static_cast<float>((v.voxels[i] - mean) / sd);
  return out;
}

template <typename V>
std::vector<Image<V>> extract_slices(const Image<V>& v) {
  v.validate();
  const std::size_t plane = v.extents[0] * v.extents[1];
  std::vector<Image<V>> out;
  out.reserve(v.extents[2]);
  for (std::size_t z = 0; z < v.extents[2]; ++z) {
    Image<V> s({v.extents[0], v.extents[1], 1}, v.spacing_mm, V{}, v.case_id);
    std::copy_n(v.voxels.begin() + static_cast<std::ptrdiff_t>(z * plane), plane, s.voxels.begin());
    out.push_back(std::move(s));
  }
  return out;
}

template <typename V>
Image<V> stack_slices(const std::vector<Image<V>>& slices) {
  if (slices.empty()) throw ShapeError("stack_slices: no slices");
  const auto& first = slices.front();
  for (const auto& s : slices) {
    if (s.extents[2] != 1 || s.extents[0] != first.extents[0] || s.extents[1] != first.extents[1])
      throw ShapeError("stack_slices: slice extents differ");
    if (!same_geometry(s, first)) throw ShapeError("stack_slices: slice spacing differs");
  }
  const std::size_t plane = first.extents[0] * first.extents[1];
  Image<V> out({first.extents[0], first.extents[1], slices.size()}, first.spacing_mm, V{}, first.case_id);
  for (std::size_t z = 0; z < slices.size(); ++z)
    std::copy(slices[z].voxels.begin(), slices[z].voxels.end(), out.voxels.begin() + static_cast<std::ptrdiff_t>(z * plane));
  return out;
}

template std::vector<Image<float>> extract_slices(const Image<float>&);
template std::vector<Image<std::uint8_t>> extract_slices(const Image<std::uint8_t>&);
template Image<float> stack_slices(const std::vector<Image<float>>&);
template Image<std::uint8_t> stack_slices(const std::vector<Image<std::uint8_t>>&);

}  // namespace cseg
