#pragma once

// Single-file NIfTI-1 (.nii) subset: little-endian, uncompressed, magic
// "n+1", 1 to 3 non-trivial dimensions, datatypes uint8 / int16 / float32.
// Orientation matrices are written as a diagonal sform but ignored on read.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cseg/image.hpp"

namespace cseg {

enum class NiftiDatatype : std::int16_t { kUInt8 = 2, kInt16 = 4, kFloat32 = 16 };

struct NiftiImage {
  Extents3 extents{1, 1, 1};
  Spacing3 spacing_mm{1, 1, 1};
  NiftiDatatype datatype = NiftiDatatype::kFloat32;
  float scl_slope = 0;
  float scl_inter = 0;
  /// Voxel values after the scl_slope/scl_inter transform (when slope != 0).
  std::vector<float> values;
};

/// Parses an in-memory .nii file. Throws FormatError naming the offending field.
NiftiImage decode_nifti(const std::string& bytes);
/// Stores `values` verbatim in the given datatype (no scaling).
std::string encode_nifti(const NiftiImage& image);

NiftiImage read_nifti(const std::filesystem::path& path);
void write_nifti(const NiftiImage& image, const std::filesystem::path& path);

/// Case id taken from the file name without ".nii".
Volume read_volume_nifti(const std::filesystem::path& path);
/// Throws FormatError when a value is not an integer label in 0..4.
LabelMap read_labels_nifti(const std::filesystem::path& path);
/// float32 on disk.
void write_nifti(const Volume& v, const std::filesystem::path& path);
/// uint8 on disk.
void write_nifti(const LabelMap& labels, const std::filesystem::path& path);

std::string case_id_from_path(const std::filesystem::path& path);

}  // namespace cseg
