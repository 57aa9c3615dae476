#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cseg/image.hpp"

namespace cseg {

struct Range {
  double min = 0;
  double max = 0;
};

/// Synthetic delayed-enhancement short-axis stack. Lengths are in in-plane
/// voxels, angles in degrees.
struct PhantomSpec {
  std::uint64_t seed = 0;
  std::string case_id = "phantom";
  Extents3 extents{64, 64, 8};
  Spacing3 spacing_mm{1.667, 1.667, 10.0};
  Range cavity_radius{7.0, 10.0};
  Range wall_thickness{3.5, 5.5};
  Range infarct_half_angle{25.0, 60.0};
  /// Fraction of the wall, from the endocardium outwards, that the infarct spans.
  Range infarct_transmurality{0.5, 1.0};
  double noreflow_probability = 0.6;
  Range noreflow_radius{1.5, 2.5};
  double noise_sigma = 0.06;
  bool pathological = true;

  /// Throws ConfigError.
  void validate() const;
};

struct Phantom {
  Volume image;
  LabelMap labels;
};

/// Per slice: an elliptical cavity (1) inside a myocardial annulus (2). When
/// pathological, a wedge of the annulus growing from the endocardium becomes
/// infarct (3) and may hold a no-reflow core (4). Geometry drifts smoothly
/// across slices; intensities follow a bright-blood, nulled-myocardium,
/// hyperintense-infarct model with Gaussian noise.
Phantom generate_phantom(const PhantomSpec& spec);

/// `count` specs derived from `base`, with per-case seeds and a pathology flag
/// drawn with probability `pathology_rate`. Case ids are "<prefix>_NNN".
std::vector<PhantomSpec> phantom_cohort(const PhantomSpec& base, std::size_t count, std::uint64_t seed,
                                        double pathology_rate, const std::string& prefix = "phantom");

}  // namespace cseg
