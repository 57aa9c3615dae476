#include "cseg/sidecar.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "cseg/errors.hpp"

namespace cseg {
namespace {

using nlohmann::json;

const char* dtype_name(SidecarDtype t) {
  switch (t) {
    case SidecarDtype::kUInt8: return "uint8";
    case SidecarDtype::kInt16: return "int16";
    case SidecarDtype::kFloat32: return "float32";
  }
  return "?";
}

std::size_t dtype_size(SidecarDtype t) {
  switch (t) {
    case SidecarDtype::kUInt8: return 1;
    case SidecarDtype::kInt16: return 2;
    case SidecarDtype::kFloat32: return 4;
  }
  return 0;
}

SidecarDtype parse_dtype(const std::string& s) {
  if (s == "uint8") return SidecarDtype::kUInt8;
  if (s == "int16") return SidecarDtype::kInt16;
  if (s == "float32") return SidecarDtype::kFloat32;
  throw FormatError("dtype", "unsupported dtype '" + s + "'");
}

std::filesystem::path with_ext(std::filesystem::path base, const char* ext) {
  if (base.extension() == ".json" || base.extension() == ".raw") base.replace_extension();
  base += ext;
  return base;
}

}  // namespace

std::filesystem::path write_sidecar(const SidecarImage& image, const std::filesystem::path& base) {
  const std::size_t n = image.extents[0] * image.extents[1] * image.extents[2] * image.channels;
  if (image.values.size() != n) throw ShapeError("write_sidecar: value count does not match extents");
  const auto json_path = with_ext(base, ".json");
  const auto raw_path = with_ext(base, ".raw");

  json j;
  j["format"] = "cseg-raw";
  j["version"] = 1;
  j["case_id"] = image.case_id;
  j["extents"] = {image.extents[0], image.extents[1], image.extents[2]};
  j["channels"] = image.channels;
  j["spacing_mm"] = {image.spacing_mm[0], image.spacing_mm[1], image.spacing_mm[2]};
  j["dtype"] = dtype_name(image.dtype);
  j["byte_order"] = "little";
  j["data_file"] = raw_path.filename().string();

  std::string raw(n * dtype_size(image.dtype), '\0');
  for (std::size_t i = 0; i < n; ++i) {
    const float v = image.values[i];
    switch (image.dtype) {
      case SidecarDtype::kUInt8: raw[i] = static_cast<char>(static_cast<unsigned char>(v)); break;
      case SidecarDtype::kInt16: {
        const auto s = static_cast<std::int16_t>(v);
        std::memcpy(raw.data() + 2 * i, &s, 2);
        break;
      }
      case SidecarDtype::kFloat32: std::memcpy(raw.data() + 4 * i, &v, 4); break;
    }
  }
  std::ofstream(json_path) << j.dump(2) << '\n';
  std::ofstream out(raw_path, std::ios::binary | std::ios::trunc);
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw std::runtime_error("failed writing " + raw_path.string());
  return json_path;
}

SidecarImage read_sidecar(const std::filesystem::path& path) {
  const auto json_path = with_ext(path, ".json");
  std::ifstream jin(json_path);
  if (!jin) throw std::runtime_error("cannot open " + json_path.string());
  SidecarImage img;
  std::filesystem::path raw_path = with_ext(path, ".raw");
  try {
    const json j = json::parse(jin);
    if (j.at("format").get<std::string>() != "cseg-raw") throw FormatError("format", "expected \"cseg-raw\"");
    if (j.at("version").get<int>() != 1) throw FormatError("version", "unsupported sidecar version");
    if (j.value("byte_order", std::string("little")) != "little")
      throw FormatError("byte_order", "only little-endian data is supported");
    img.case_id = j.value("case_id", std::string());
    const auto ext = j.at("extents").get<std::vector<std::size_t>>();
    if (ext.size() != 3) throw FormatError("extents", "expected three extents");
    for (int i = 0; i < 3; ++i) {
      if (ext[i] == 0) throw FormatError("extents", "extents must be >= 1");
      img.extents[i] = ext[i];
    }
    img.channels = j.value("channels", std::size_t{1});
    if (img.channels == 0) throw FormatError("channels", "channels must be >= 1");
    const auto sp = j.at("spacing_mm").get<std::vector<double>>();
    if (sp.size() != 3) throw FormatError("spacing_mm", "expected three spacings");
    for (int i = 0; i < 3; ++i) {
      if (!(sp[i] > 0)) throw FormatError("spacing_mm", "spacing must be strictly positive");
      img.spacing_mm[i] = sp[i];
    }
    img.dtype = parse_dtype(j.at("dtype").get<std::string>());
    if (j.contains("data_file")) raw_path = json_path.parent_path() / j["data_file"].get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("json", std::string(e.what()) + " [" + json_path.string() + "]");
  }

  std::ifstream rin(raw_path, std::ios::binary);
  if (!rin) throw FormatError("data_file", "cannot open " + raw_path.string());
  const std::string raw(std::istreambuf_iterator<char>(rin), {});
  const std::size_t bpv = dtype_size(img.dtype);
  // Bounded by the file size as it grows, so the product cannot overflow.
  std::size_t n = 1;
  for (std::size_t f : {img.extents[0], img.extents[1], img.extents[2], img.channels}) {
    if (n > raw.size() / bpv / f)
      throw FormatError("data", "extents describe more voxels than " + raw_path.string() + " holds");
    n *= f;
  }
  if (raw.size() != n * bpv)
    throw FormatError("data", "expected " + std::to_string(n * bpv) + " bytes in " + raw_path.string() + ", found " +
                                  std::to_string(raw.size()));
  img.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (img.dtype) {
      case SidecarDtype::kUInt8: img.values[i] = static_cast<unsigned char>(raw[i]); break;
      case SidecarDtype::kInt16: {
        std::int16_t s;
        std::memcpy(&s, raw.data() + 2 * i, 2);
        img.values[i] = s;
        break;
      }
      case SidecarDtype::kFloat32: std::memcpy(&img.values[i], raw.data() + 4 * i, 4); break;
    }
  }
  return img;
}

SidecarImage to_sidecar(const Volume& v) {
  SidecarImage s;
  s.case_id = v.case_id;
  s.extents = v.extents;
  s.spacing_mm = v.spacing_mm;
  s.dtype = SidecarDtype::kFloat32;
  s.values = v.voxels;
  return s;
}

SidecarImage to_sidecar(const LabelMap& labels) {
  SidecarImage s;
  s.case_id = labels.case_id;
  s.extents = labels.extents;
  s.spacing_mm = labels.spacing_mm;
  s.dtype = SidecarDtype::kUInt8;
  s.values.assign(labels.voxels.begin(), labels.voxels.end());
  return s;
}

SidecarImage to_sidecar(const Tensor<float>& probs, const Spacing3& spacing, const std::string& case_id) {
  if (probs.rank() != 4) throw ShapeError("to_sidecar: expected [C,nx,ny,nz], got " + shape_str(probs.shape()));
  SidecarImage s;
  s.case_id = case_id;
  s.channels = probs.dim(0);
  s.extents = {probs.dim(1), probs.dim(2), probs.dim(3)};
  s.spacing_mm = spacing;
  s.dtype = SidecarDtype::kFloat32;
  const std::size_t nx = s.extents[0], ny = s.extents[1], nz = s.extents[2];
  s.values.resize(probs.size());
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t z = 0; z < nz; ++z)
          s.values[c * nx * ny * nz + x + nx * (y + ny * z)] = probs[((c * nx + x) * ny + y) * nz + z];
  return s;
}

Volume sidecar_volume(const SidecarImage& image) {
  if (image.channels != 1) throw FormatError("channels", "expected a single-channel image");
  Volume v(image.extents, image.spacing_mm, 0.0f, image.case_id);
  v.voxels = image.values;
  return v;
}

LabelMap sidecar_labels(const SidecarImage& image) {
  if (image.channels != 1) throw FormatError("channels", "expected a single-channel label map");
  LabelMap m(image.extents, image.spacing_mm, 0, image.case_id);
  for (std::size_t i = 0; i < image.values.size(); ++i) {
    const float v = image.values[i];
    if (!(v >= 0 && v <= 4) || v != std::floor(v)) throw FormatError("data", "value is not a label in 0..4");
    m.voxels[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

}  // namespace cseg
