#include "cseg/cascade.hpp"

#include <algorithm>

#include "cseg/components.hpp"
#include "cseg/errors.hpp"

namespace cseg {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kCoarse: return "coarse";
    case Stage::kRefined: return "refined";
    case Stage::kPostprocessed: return "postprocessed";
  }
  return "?";
}

Tensor<float> volume_tensor(const Volume& v) {
  const auto [nx, ny, nz] = v.extents;
  Tensor<float> t(Shape{1, 1, nx, ny, nz});
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) t[(x * ny + y) * nz + z] = v.at(x, y, z);
  return t;
}

Tensor<float> slice_batch(const Volume& v) {
  const auto [nx, ny, nz] = v.extents;
  Tensor<float> t(Shape{nz, 1, nx, ny});
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) t[(z * nx + x) * ny + y] = v.at(x, y, z);
  return t;
}

std::vector<std::uint8_t> tensor_order_labels(const LabelMap& labels) {
  const auto [nx, ny, nz] = labels.extents;
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) out[(x * ny + y) * nz + z] = labels.at(x, y, z);
  return out;
}

std::vector<std::uint8_t> slice_labels(const LabelMap& labels, std::size_t z) {
  const auto [nx, ny, nz] = labels.extents;
  if (z >= nz) throw ShapeError("slice_labels: slice index out of range");
  std::vector<std::uint8_t> out(nx * ny);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) out[x * ny + y] = labels.at(x, y, z);
  return out;
}

LabelMap argmax_labels(const Tensor<float>& probs, const Spacing3& spacing, const std::string& case_id) {
  if (probs.rank() != 4 || probs.dim(0) != kNumClasses)
    throw ShapeError("argmax_labels: expected [5,nx,ny,nz], got " + shape_str(probs.shape()));
  const std::size_t nx = probs.dim(1), ny = probs.dim(2), nz = probs.dim(3);
  const std::size_t n = nx * ny * nz;
  LabelMap out({nx, ny, nz}, spacing, 0, case_id);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) {
        const std::size_t i = (x * ny + y) * nz + z;
        std::uint8_t best = 0;
        for (std::uint8_t c = 1; c < kNumClasses; ++c)
          if (probs[c * n + i] > probs[best * n + i]) best = c;
        out.at(x, y, z) = best;
      }
  return out;
}

SegmentationResult run_coarse(const UNet<float>& model2d, const Volume& normalized) {
  if (model2d.config().rank != 2) throw ShapeError("run_coarse: expected a 2D model");
  normalized.validate();
  const auto [nx, ny, nz] = normalized.extents;
  const Tensor<float> probs2d = model2d.forward(slice_batch(normalized));  // [nz,5,nx,ny]
  SegmentationResult r;
  r.probs = Tensor<float>(Shape{kNumClasses, nx, ny, nz});
  const std::size_t plane = nx * ny;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const float* src = probs2d.data() + (z * kNumClasses + c) * plane;
      for (std::size_t xy = 0; xy < plane; ++xy) r.probs[(c * plane + xy) * nz + z] = src[xy];
    }
  r.labels = argmax_labels(r.probs, normalized.spacing_mm, normalized.case_id);
  r.stage = Stage::kCoarse;
  r.case_id = normalized.case_id;
  return r;
}

Tensor<float> compose_refine_input(const Volume& normalized, const SegmentationResult& coarse) {
  const auto [nx, ny, nz] = normalized.extents;
  if (coarse.probs.shape() != Shape{kNumClasses, nx, ny, nz} || !same_geometry(normalized, coarse.labels))
    throw ShapeError("compose_refine_input: coarse result " + shape_str(coarse.probs.shape()) +
                     " does not match volume geometry");
  const std::size_t n = nx * ny * nz;
  Tensor<float> t(Shape{1, 1 + kNumClasses, nx, ny, nz});
  const Tensor<float> img = volume_tensor(normalized);
  std::copy_n(img.data(), n, t.data());
  std::copy_n(coarse.probs.data(), kNumClasses * n, t.data() + n);
  return t;
}

SegmentationResult run_refine(const UNet<float>& model3d, const Tensor<float>& refine_input,
                              const Spacing3& spacing, const std::string& case_id) {
  if (model3d.config().rank != 3) throw ShapeError("run_refine: expected a 3D model");
  const Tensor<float> probs = model3d.forward(refine_input);
  SegmentationResult r;
  r.probs = probs.reshaped(Shape{kNumClasses, probs.dim(2), probs.dim(3), probs.dim(4)});
  r.labels = argmax_labels(r.probs, spacing, case_id);
  r.stage = Stage::kRefined;
  r.case_id = case_id;
  return r;
}

LabelMap postprocess_labels(const LabelMap& labels, std::size_t min_component_voxels) {
  Mask fg(labels.extents, labels.spacing_mm, 0, labels.case_id);
  for (std::size_t i = 0; i < labels.size(); ++i) fg.voxels[i] = labels.voxels[i] != kBackground;
  const ComponentLabeling cc = connected_components(fg, 26);
  LabelMap out = labels;
  if (cc.sizes.empty()) return out;
  const std::size_t largest =
      static_cast<std::size_t>(std::max_element(cc.sizes.begin(), cc.sizes.end()) - cc.sizes.begin()) + 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t id = cc.ids[i];
    if (id != 0 && id != largest && cc.sizes[id - 1] < min_component_voxels) out.voxels[i] = kBackground;
  }
  return out;
}

SegmentationResult postprocess(const SegmentationResult& result, std::size_t min_component_voxels) {
  SegmentationResult out = result;
  out.labels = postprocess_labels(result.labels, min_component_voxels);
  out.stage = Stage::kPostprocessed;
  const auto [nx, ny, nz] = out.labels.extents;
  const std::size_t n = nx * ny * nz;
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) {
        if (out.labels.at(x, y, z) == result.labels.at(x, y, z)) continue;
        const std::size_t i = (x * ny + y) * nz + z;
        for (std::size_t c = 0; c < kNumClasses; ++c) out.probs[c * n + i] = c == kBackground ? 1.0f : 0.0f;
      }
  return out;
}

PipelineResult run_pipeline(const UNet<float>& model2d, const UNet<float>& model3d, const Volume& image,
                            std::size_t min_component_voxels) {
  PipelineResult r;
  r.normalized = zscore_normalize(image);
  r.coarse = run_coarse(model2d, r.normalized);
  r.refined = run_refine(model3d, compose_refine_input(r.normalized, r.coarse), image.spacing_mm, image.case_id);
  r.final = postprocess(r.refined, min_component_voxels);
  return r;
}

std::vector<Sample<float>> slice_samples(const Volume& normalized, const LabelMap& labels) {
  if (!same_geometry(normalized, labels)) throw ShapeError("slice_samples: image and labels differ in geometry");
  const auto [nx, ny, nz] = normalized.extents;
  const Tensor<float> batch = slice_batch(normalized);
  std::vector<Sample<float>> out;
  for (std::size_t z = 0; z < nz; ++z) {
    Sample<float> s;
    s.case_id = normalized.case_id + "#z" + std::to_string(z);
    s.image = Tensor<float>(Shape{1, 1, nx, ny});
    std::copy_n(batch.data() + z * nx * ny, nx * ny, s.image.data());
    s.labels = slice_labels(labels, z);
    out.push_back(std::move(s));
  }
  return out;
}

Sample<float> refine_sample(const Volume& normalized, const SegmentationResult& coarse, const LabelMap& labels) {
  if (!same_geometry(normalized, labels)) throw ShapeError("refine_sample: image and labels differ in geometry");
  return {normalized.case_id, compose_refine_input(normalized, coarse), tensor_order_labels(labels)};
}

}  // namespace cseg
