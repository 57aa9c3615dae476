#include "cseg/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cseg/errors.hpp"

namespace cseg {
namespace {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

// Byte offsets in the NIfTI-1 header.
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffSrowX = 280;
constexpr std::size_t kOffMagic = 344;

template <typename U>
U load(const std::string& b, std::size_t off) {
  U v;
  std::memcpy(&v, b.data() + off, sizeof(U));
  return v;
}

template <typename U>
void store(std::string& b, std::size_t off, U v) {
  std::memcpy(b.data() + off, &v, sizeof(U));
}

std::size_t bytes_per_voxel(NiftiDatatype t) {
  switch (t) {
    case NiftiDatatype::kUInt8: return 1;
    case NiftiDatatype::kInt16: return 2;
    case NiftiDatatype::kFloat32: return 4;
  }
  return 0;
}

}  // namespace

NiftiImage decode_nifti(const std::string& bytes) {
  if (bytes.size() < kHeaderSize)
    throw FormatError("sizeof_hdr", "file shorter than the 348-byte NIfTI-1 header");
  const auto hdr_size = load<std::int32_t>(bytes, 0);
  if (hdr_size != static_cast<std::int32_t>(kHeaderSize)) {
    if (hdr_size == 0x5C010000)
      throw FormatError("sizeof_hdr", "big-endian NIfTI files are not supported");
    throw FormatError("sizeof_hdr", "expected 348, found " + std::to_string(hdr_size));
  }
  if (std::memcmp(bytes.data() + kOffMagic, "n+1\0", 4) != 0)
    throw FormatError("magic", "expected single-file magic \"n+1\"");

  NiftiImage img;
  const auto ndim = load<std::int16_t>(bytes, kOffDim);
  if (ndim < 1 || ndim > 7) throw FormatError("dim", "dim[0] must lie in 1..7, found " + std::to_string(ndim));
  for (int i = 1; i <= ndim; ++i) {
    const auto d = load<std::int16_t>(bytes, kOffDim + 2 * i);
    if (d < 1) throw FormatError("dim", "dim[" + std::to_string(i) + "] must be >= 1");
    if (i <= 3)
      img.extents[i - 1] = static_cast<std::size_t>(d);
    else if (d != 1)
      throw FormatError("dim", "only 3D images are supported (dim[" + std::to_string(i) + "] = " + std::to_string(d) + ")");
  }
  for (int i = 1; i <= std::min<int>(ndim, 3); ++i) {
    const auto p = load<float>(bytes, kOffPixdim + 4 * i);
    if (!(p > 0) || !std::isfinite(p))
      throw FormatError("pixdim", "pixdim[" + std::to_string(i) + "] must be a positive spacing");
    img.spacing_mm[i - 1] = p;
  }

  const auto dt = load<std::int16_t>(bytes, kOffDatatype);
  if (dt != 2 && dt != 4 && dt != 16)
    throw FormatError("datatype", "unsupported datatype code " + std::to_string(dt) + " (need uint8, int16, float32)");
  img.datatype = static_cast<NiftiDatatype>(dt);
  const std::size_t bpv = bytes_per_voxel(img.datatype);
  const auto bitpix = load<std::int16_t>(bytes, kOffBitpix);
  if (bitpix != static_cast<std::int16_t>(8 * bpv))
    throw FormatError("bitpix", "bitpix " + std::to_string(bitpix) + " disagrees with datatype");

  const auto vox_offset = load<float>(bytes, kOffVoxOffset);
  if (!(vox_offset >= static_cast<float>(kHeaderSize)) || vox_offset != std::floor(vox_offset))
    throw FormatError("vox_offset", "vox_offset must be an integer >= 348");
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t n = img.extents[0] * img.extents[1] * img.extents[2];
  if (offset > bytes.size() || bytes.size() - offset < n * bpv)
    throw FormatError("data", "data section truncated: need " + std::to_string(n * bpv) + " bytes at offset " +
                                  std::to_string(offset) + ", file has " + std::to_string(bytes.size()));

  img.scl_slope = load<float>(bytes, kOffSclSlope);
  img.scl_inter = load<float>(bytes, kOffSclInter);
  const bool scaled = img.scl_slope != 0 && std::isfinite(img.scl_slope);
  const float inter = std::isfinite(img.scl_inter) ? img.scl_inter : 0.0f;

  img.values.resize(n);
  const char* data = bytes.data() + offset;
  for (std::size_t i = 0; i < n; ++i) {
    float v = 0;
    switch (img.datatype) {
      case NiftiDatatype::kUInt8: v = static_cast<unsigned char>(data[i]); break;
      case NiftiDatatype::kInt16: {
        std::int16_t s;
        std::memcpy(&s, data + 2 * i, 2);
        v = s;
        break;
      }
      case NiftiDatatype::kFloat32: std::memcpy(&v, data + 4 * i, 4); break;
    }
    img.values[i] = scaled ? v * img.scl_slope + inter : v;
  }
  return img;
}

std::string encode_nifti(const NiftiImage& image) {
  const std::size_t n = image.extents[0] * image.extents[1] * image.extents[2];
  if (image.values.size() != n) throw ShapeError("encode_nifti: value count does not match extents");
  const std::size_t bpv = bytes_per_voxel(image.datatype);
  std::string b(kDataOffset + n * bpv, '\0');

  store<std::int32_t>(b, 0, static_cast<std::int32_t>(kHeaderSize));
  store<std::int16_t>(b, kOffDim, 3);
  for (int i = 0; i < 3; ++i) {
    if (image.extents[i] > 32767) throw ShapeError("encode_nifti: extent exceeds int16 range");
    store<std::int16_t>(b, kOffDim + 2 * (i + 1), static_cast<std::int16_t>(image.extents[i]));
  }
  for (int i = 4; i < 8; ++i) store<std::int16_t>(b, kOffDim + 2 * i, 1);
  store<std::int16_t>(b, kOffDatatype, static_cast<std::int16_t>(image.datatype));
  store<std::int16_t>(b, kOffBitpix, static_cast<std::int16_t>(8 * bpv));
  store<float>(b, kOffPixdim, 1.0f);
  for (int i = 0; i < 3; ++i) store<float>(b, kOffPixdim + 4 * (i + 1), static_cast<float>(image.spacing_mm[i]));
  store<float>(b, kOffVoxOffset, static_cast<float>(kDataOffset));
  store<float>(b, kOffSclSlope, image.scl_slope);
  store<float>(b, kOffSclInter, image.scl_inter);
  b[kOffXyztUnits] = 2;  // mm
  store<std::int16_t>(b, kOffSformCode, 1);
  for (int r = 0; r < 3; ++r) store<float>(b, kOffSrowX + 16 * r + 4 * r, static_cast<float>(image.spacing_mm[r]));
  std::memcpy(b.data() + kOffMagic, "n+1\0", 4);

  char* data = b.data() + kDataOffset;
  for (std::size_t i = 0; i < n; ++i) {
    const float v = image.values[i];
    switch (image.datatype) {
      case NiftiDatatype::kUInt8: {
        if (!(v >= 0 && v <= 255) || v != std::floor(v)) throw ShapeError("encode_nifti: value does not fit uint8");
        data[i] = static_cast<char>(static_cast<unsigned char>(v));
        break;
      }
      case NiftiDatatype::kInt16: {
        if (!(v >= -32768 && v <= 32767) || v != std::floor(v)) throw ShapeError("encode_nifti: value does not fit int16");
        const auto s = static_cast<std::int16_t>(v);
        std::memcpy(data + 2 * i, &s, 2);
        break;
      }
      case NiftiDatatype::kFloat32: std::memcpy(data + 4 * i, &v, 4); break;
    }
  }
  return b;
}

NiftiImage read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return decode_nifti(std::string(std::istreambuf_iterator<char>(in), {}));
  } catch (const FormatError& e) {
    throw FormatError(e.field(), std::string(e.what()).substr(e.field().size() + 2) + " [" + path.string() + "]");
  }
}

void write_nifti(const NiftiImage& image, const std::filesystem::path& path) {
  const std::string bytes = encode_nifti(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string case_id_from_path(const std::filesystem::path& path) {
  std::string name = path.filename().string();
  for (const char* ext : {".nii", ".json", ".raw"}) {
    const std::string e(ext);
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      name.resize(name.size() - e.size());
      break;
    }
  }
  return name;
}

Volume read_volume_nifti(const std::filesystem::path& path) {
  NiftiImage img = read_nifti(path);
  Volume v(img.extents, img.spacing_mm, 0.0f, case_id_from_path(path));
  v.voxels = std::move(img.values);
  return v;
}

LabelMap read_labels_nifti(const std::filesystem::path& path) {
  const NiftiImage img = read_nifti(path);
  LabelMap m(img.extents, img.spacing_mm, 0, case_id_from_path(path));
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const float v = img.values[i];
    if (!(v >= 0 && v <= 4) || v != std::floor(v))
      throw FormatError("data", "value " + std::to_string(v) + " is not a label in 0..4 [" + path.string() + "]");
    m.voxels[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

void write_nifti(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  NiftiImage img;
  img.extents = v.extents;
  img.spacing_mm = v.spacing_mm;
  img.datatype = NiftiDatatype::kFloat32;
  img.values = v.voxels;
  write_nifti(img, path);
}

void write_nifti(const LabelMap& labels, const std::filesystem::path& path) {
  labels.validate();
  NiftiImage img;
  img.extents = labels.extents;
  img.spacing_mm = labels.spacing_mm;
  img.datatype = NiftiDatatype::kUInt8;
  img.values.assign(labels.voxels.begin(), labels.voxels.end());
  write_nifti(img, path);
}

}  // namespace cseg
