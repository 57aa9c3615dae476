#pragma once

// Raw + JSON sidecar format: "<base>.raw" holds little-endian voxels, x
// fastest then y, z, channel; "<base>.json" describes them (see
// schemas/sidecar.schema.json).

#include <filesystem>
#include <string>
#include <vector>

#include "cseg/image.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

enum class SidecarDtype { kUInt8, kInt16, kFloat32 };

struct SidecarImage {
  std::string case_id;
  Extents3 extents{1, 1, 1};
  std::size_t channels = 1;
  Spacing3 spacing_mm{1, 1, 1};
  SidecarDtype dtype = SidecarDtype::kFloat32;
  std::vector<float> values;
};

/// Writes base.json and base.raw; returns the JSON path.
std::filesystem::path write_sidecar(const SidecarImage& image, const std::filesystem::path& base);
/// Accepts either the .json path or the base path. Throws FormatError.
SidecarImage read_sidecar(const std::filesystem::path& path);

SidecarImage to_sidecar(const Volume& v);
SidecarImage to_sidecar(const LabelMap& labels);
/// Channel-first probabilities [C, nx, ny, nz] in tensor order.
SidecarImage to_sidecar(const Tensor<float>& probs, const Spacing3& spacing, const std::string& case_id);

Volume sidecar_volume(const SidecarImage& image);
LabelMap sidecar_labels(const SidecarImage& image);

}  // namespace cseg
