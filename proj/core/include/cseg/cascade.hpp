#pragma once

// Two-stage segmentation: a 2D network labels every short-axis slice, its
// class probabilities are stacked and concatenated with the image as input
// to a 3D network, and the refined labels are cleaned of scattered voxels.

#include <cstdint>
#include <string>
#include <vector>

#include "cseg/image.hpp"
#include "cseg/tensor.hpp"
#include "cseg/trainer.hpp"
#include "cseg/unet.hpp"

namespace cseg {

enum class Stage { kCoarse, kRefined, kPostprocessed };

const char* stage_name(Stage s);

struct SegmentationResult {
  /// [5, nx, ny, nz]
  Tensor<float> probs;
  /// Argmax of probs, ties broken toward the smaller class index.
  LabelMap labels;
  Stage stage = Stage::kCoarse;
  std::string case_id;
};

/// Volume as a [1, 1, nx, ny, nz] tensor.
Tensor<float> volume_tensor(const Volume& v);
/// Slices as a batch, [nz, 1, nx, ny].
Tensor<float> slice_batch(const Volume& v);
/// Labels in [nx, ny, nz] row-major order, matching volume_tensor.
std::vector<std::uint8_t> tensor_order_labels(const LabelMap& labels);
/// Labels of slice z in [nx, ny] row-major order, matching slice_batch.
std::vector<std::uint8_t> slice_labels(const LabelMap& labels, std::size_t z);

LabelMap argmax_labels(const Tensor<float>& probs, const Spacing3& spacing, const std::string& case_id);

/// `normalized` must already be z-scored.
SegmentationResult run_coarse(const UNet<float>& model2d, const Volume& normalized);

/// [1, 6, nx, ny, nz]: channel 0 the normalized image, 1..5 the coarse class
/// probabilities in class order.
Tensor<float> compose_refine_input(const Volume& normalized, const SegmentationResult& coarse);

SegmentationResult run_refine(const UNet<float>& model3d, const Tensor<float>& refine_input,
                              const Spacing3& spacing, const std::string& case_id);

/// Keeps the largest 26-connected foreground component and every other
/// component of at least `min_component_voxels`; removed voxels become
/// background with probability one.
SegmentationResult postprocess(const SegmentationResult& result, std::size_t min_component_voxels);
LabelMap postprocess_labels(const LabelMap& labels, std::size_t min_component_voxels);

struct PipelineResult {
  Volume normalized;
  SegmentationResult coarse;
  SegmentationResult refined;
  SegmentationResult final;
};

/// z-score, coarse, compose, refine, postprocess.
PipelineResult run_pipeline(const UNet<float>& model2d, const UNet<float>& model3d, const Volume& image,
                            std::size_t min_component_voxels);

/// One 2D sample per slice of a normalized volume.
std::vector<Sample<float>> slice_samples(const Volume& normalized, const LabelMap& labels);
/// The 3D sample for one case given its coarse result.
Sample<float> refine_sample(const Volume& normalized, const SegmentationResult& coarse, const LabelMap& labels);

}  // namespace cseg
