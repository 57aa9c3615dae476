#pragma once

#include <filesystem>
#include <string>

#include "cseg/metrics.hpp"

namespace cseg {

/// One row per case plus a final "mean" row. Columns: case_id, myo_dice,
/// myo_voldif_mm3, myo_hsd_mm, inf_dice, inf_voldif_mm3, inf_ratio_pts,
/// nr_dice, nr_voldif_mm3, nr_ratio_pts. Dice in percent, two decimals;
/// a missing Hausdorff distance is written as NA.
std::string report_csv(const MetricsReport& report);

/// Same rows under "cases", the means under "aggregate" (flat and grouped
/// per target), and "excluded_cases".
std::string report_json(const MetricsReport& report);

/// Chooses CSV or JSON from the extension (.csv / .json).
void write_report(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace cseg
