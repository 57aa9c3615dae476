#include "cseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <random>

#include "cseg/errors.hpp"
#include "cseg/random.hpp"

namespace cseg {
namespace {

void check_range(const Range& r, const char* name, double lo, double hi) {
  if (!(r.min <= r.max) || r.min < lo || r.max > hi)
    throw ConfigError(std::string("phantom: ") + name + " must be a non-empty range within [" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
}

double draw(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.min, r.max)(rng);
}

double wrap_angle(double a) {
  const double two_pi = 2 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

// Intensity model (before jitter and noise).
constexpr double kIntensityBackground = 0.30;
constexpr double kIntensityCavity = 0.75;
constexpr double kIntensityMyocardium = 0.10;
constexpr double kIntensityInfarct = 0.95;
constexpr double kIntensityNoReflow = 0.18;
constexpr double kJitter = 0.04;

}  // namespace

void PhantomSpec::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (extents[i] == 0) throw ConfigError("phantom: extents must be >= 1");
    if (!(spacing_mm[i] > 0)) throw ConfigError("phantom: spacing must be positive");
  }
  check_range(cavity_radius, "cavity_radius", 1e-3, 1e6);
  check_range(wall_thickness, "wall_thickness", 1e-3, 1e6);
  check_range(infarct_half_angle, "infarct_half_angle", 0.0, 180.0);
  check_range(infarct_transmurality, "infarct_transmurality", 1e-3, 1.0);
  check_range(noreflow_radius, "noreflow_radius", 0.0, 1e6);
  if (!(noreflow_probability >= 0 && noreflow_probability <= 1))
    throw ConfigError("phantom: noreflow_probability must lie in [0,1]");
  if (!(noise_sigma >= 0)) throw ConfigError("phantom: noise_sigma must be >= 0");
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sym = [&](double half) { return (2 * unit(rng) - 1) * half; };

  const auto [nx, ny, nz] = spec.extents;
  // Spacing is stored at float precision so NIfTI round trips are exact.
  Spacing3 spacing;
  for (int i = 0; i < 3; ++i) spacing[i] = static_cast<double>(static_cast<float>(spec.spacing_mm[i]));

  Phantom ph{Volume(spec.extents, spacing, 0.0f, spec.case_id), LabelMap(spec.extents, spacing, 0, spec.case_id)};

  const double cx0 = 0.5 * (nx - 1) + sym(0.06 * nx);
  const double cy0 = 0.5 * (ny - 1) + sym(0.06 * ny);
  const double drift_x = sym(0.5), drift_y = sym(0.5);
  const double ecc = 1.0 + sym(0.15);
  const double rot = unit(rng) * std::numbers::pi;
  const double radius0 = draw(rng, spec.cavity_radius);
  const double thickness0 = draw(rng, spec.wall_thickness);

  // Pathology geometry, drawn unconditionally so the random stream does not
  // depend on the flag.
  const double theta0 = unit(rng) * 2 * std::numbers::pi;
  const double theta_drift = sym(0.12);
  const double half_angle0 = draw(rng, spec.infarct_half_angle) * std::numbers::pi / 180.0;
  const double transmural0 = draw(rng, spec.infarct_transmurality);
  const std::size_t span = std::max<std::size_t>(1, (nz + 1) / 2 + static_cast<std::size_t>(unit(rng) * (nz / 2 + 1)));
  const std::size_t inf_len = std::min(span, nz);
  const std::size_t z_first = static_cast<std::size_t>(unit(rng) * static_cast<double>(nz - inf_len + 1));
  const std::size_t z_last = std::min(nz - 1, z_first + inf_len - 1);
  const bool has_noreflow = unit(rng) < spec.noreflow_probability;
  const double nr_radius = draw(rng, spec.noreflow_radius);
  const double z_mid = 0.5 * static_cast<double>(z_first + z_last);

  const double i_bg = kIntensityBackground + sym(kJitter), i_cav = kIntensityCavity + sym(kJitter);
  const double i_myo = kIntensityMyocardium + sym(kJitter);
  const double i_inf = kIntensityInfarct + sym(kJitter), i_nr = kIntensityNoReflow + sym(kJitter);
  const double tex_a = unit(rng) * 6.28, tex_b = unit(rng) * 6.28;

  const double cr = std::cos(rot), sr = std::sin(rot);
  for (std::size_t z = 0; z < nz; ++z) {
    const double frac = nz > 1 ? static_cast<double>(z) / static_cast<double>(nz - 1) : 0.0;
    const double scale = 1.0 - 0.4 * frac * frac;  // narrowing towards the apex
    const double r_in = radius0 * scale;
    const double r_out = r_in + thickness0 * (1.0 - 0.15 * frac);
    const double cx = cx0 + drift_x * static_cast<double>(z);
    const double cy = cy0 + drift_y * static_cast<double>(z);
    const bool infarct_slice = spec.pathological && z >= z_first && z <= z_last;
    const double dz = static_cast<double>(z) - z_mid;
    const double theta = theta0 + theta_drift * dz;
    const double half_angle = half_angle0 * (1.0 - 0.25 * std::abs(dz) / std::max(1.0, static_cast<double>(nz)));
    const double transmural = std::clamp(transmural0 * (1.0 - 0.1 * std::abs(dz)), 0.3, 1.0);
    const bool nr_slice = infarct_slice && has_noreflow && std::abs(dz) <= 1.0;
    // No-reflow core: inside the wedge, a third of the way into the infarct.
    const double nr_depth = r_in + (r_out - r_in) * transmural * 0.4;
    const double nr_cx = cx + nr_depth * std::cos(theta) * 1.0;
    const double nr_cy = cy + nr_depth * std::sin(theta) * 1.0;

    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        // Elliptical radius in the rotated frame.
        const double u = (cr * dx + sr * dy) / ecc;
        const double v = (-sr * dx + cr * dy) * ecc;
        const double rho = std::hypot(u, v);
        std::uint8_t label = kBackground;
        if (rho < r_in) {
          label = kCavity;
        } else if (rho < r_out) {
          label = kMyocardium;
          if (infarct_slice) {
            const double ang = std::atan2(dy, dx);
            const double wall_pos = (rho - r_in) / (r_out - r_in);
            if (std::abs(wrap_angle(ang - theta)) <= half_angle && wall_pos <= transmural) {
              label = kInfarction;
              if (nr_slice && std::hypot(static_cast<double>(x) - nr_cx, static_cast<double>(y) - nr_cy) <= nr_radius)
                label = kNoReflow;
            }
          }
        }
        double intensity = i_bg + 0.06 * std::sin(0.15 * static_cast<double>(x) + tex_a) *
                                      std::cos(0.11 * static_cast<double>(y) + tex_b);
        switch (label) {
          case kCavity: intensity = i_cav; break;
          case kMyocardium: intensity = i_myo; break;
          case kInfarction: intensity = i_inf; break;
          case kNoReflow: intensity = i_nr; break;
          default: break;
        }
        ph.labels.at(x, y, z) = label;
        ph.image.at(x, y, z) = static_cast<float>(intensity);
      }
  }
  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : ph.image.voxels) v = static_cast<float>(v + noise(rng));
  }
  return ph;
}

std::vector<PhantomSpec> phantom_cohort(const PhantomSpec& base, std::size_t count, std::uint64_t seed,
                                        double pathology_rate, const std::string& prefix) {
  if (!(pathology_rate >= 0 && pathology_rate <= 1)) throw ConfigError("phantom: pathology rate must lie in [0,1]");
  std::vector<PhantomSpec> out;
  out.reserve(count);
  std::mt19937_64 flags(derive_seed(seed, 0xC0407));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = base;
    s.seed = derive_seed(seed, i);
    s.pathological = unit(flags) < pathology_rate;
    char id[32];
    std::snprintf(id, sizeof(id), "_%03zu", i);
    s.case_id = prefix + id;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cseg
