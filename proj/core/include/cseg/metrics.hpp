#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cseg/image.hpp"

namespace cseg {

Mask class_mask(const LabelMap& labels, std::uint8_t label);
/// Left-ventricle wall: labels {2, 3, 4}.
Mask myocardium_mask(const LabelMap& labels);

struct DiceCounts {
  std::size_t intersection = 0;
  std::size_t size_a = 0;
  std::size_t size_b = 0;
  /// 2|A∩B|/(|A|+|B|); 1 when both are empty.
  double value() const;
};

/// Throws ShapeError on a geometry mismatch.
DiceCounts dice_counts(const Mask& a, const Mask& b);
double dice(const Mask& a, const Mask& b);

double volume_mm3(const Mask& mask);
double voldif_mm3(const Mask& pred, const Mask& gt);

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the image.
Mask boundary(const Mask& mask);

/// Symmetric Hausdorff distance in mm between the boundaries of two masks.
/// `percentile` < 100 gives the percentile variant (nearest rank) of each
/// directed distance. Empty when either mask is empty.
std::optional<double> hausdorff_mm(const Mask& a, const Mask& b, double percentile = 100.0);

/// 100 * volume(label) / volume(myocardium); 0 when the myocardium is empty.
double class_percentage(const LabelMap& labels, std::uint8_t label);
/// |pct(pred) - pct(gt)| in percentage points, label 3 or 4.
double ratio_error(const LabelMap& pred, const LabelMap& gt, std::uint8_t label);

struct CaseMetrics {
  std::string case_id;
  double myo_dice_pct = 0;
  double myo_voldif_mm3 = 0;
  /// Empty when either myocardium mask is empty.
  std::optional<double> myo_hsd_mm;
  double inf_dice_pct = 0;
  double inf_voldif_mm3 = 0;
  double inf_ratio_pts = 0;
  double nr_dice_pct = 0;
  double nr_voldif_mm3 = 0;
  double nr_ratio_pts = 0;
  /// A ratio used the empty-myocardium convention.
  bool degenerate_ratio = false;
};

/// Throws ShapeError on a geometry mismatch.
CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& gt);

struct ExcludedCase {
  std::string case_id;
  std::string reason;
};

struct MetricsReport {
  std::vector<CaseMetrics> rows;
  /// Arithmetic means; myo_hsd_mm averages only the evaluable rows.
  CaseMetrics aggregate;
  std::size_t hsd_excluded = 0;
  std::vector<ExcludedCase> excluded;
};

MetricsReport aggregate(std::vector<CaseMetrics> rows, std::vector<ExcludedCase> excluded = {});

struct CasePair {
  LabelMap pred;
  LabelMap gt;
};

/// Evaluates every pair; geometry mismatches are listed as excluded cases.
MetricsReport evaluate_cases(const std::vector<CasePair>& cases);

/// Mean foreground Dice (fraction) over labels 1..4 of one case.
double mean_foreground_dice(const LabelMap& pred, const LabelMap& gt);

}  // namespace cseg
