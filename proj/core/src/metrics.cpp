#include "cseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cseg/errors.hpp"

namespace cseg {
namespace {

void require_same_geometry(const Mask& a, const Mask& b, const char* op) {
  if (!same_geometry(a, b)) throw ShapeError(std::string(op) + ": masks differ in geometry");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1D squared distance transform (lower envelope of parabolas) of f
// sampled at positions i*spacing; infinite entries are not sites.
void edt_1d(const std::vector<double>& f, double spacing, std::vector<double>& out, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  const std::size_t n = f.size();
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double pq = static_cast<double>(q) * spacing;
    if (!any) {
      any = true;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    auto intersect = [&](std::size_t vk) {
      const double pv = static_cast<double>(vk) * spacing;
      return ((f[q] + pq * pq) - (f[vk] + pv * pv)) / (2.0 * (pq - pv));
    };
    // z[0] is -inf, so the scan stops at k == 0 at the latest.
    double s = intersect(v[k]);
    while (s <= z[k]) s = intersect(v[--k]);
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (!any) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  k = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double pp = static_cast<double>(p) * spacing;
    while (z[k + 1] < pp) ++k;
    // Offset taken in whole voxels first so a site maps to exactly 0.
    const double d = (static_cast<double>(p) - static_cast<double>(v[k])) * spacing;
    out[p] = d * d + f[v[k]];
  }
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
std::vector<double> squared_distance_map(const Mask& sites) {
  const auto [nx, ny, nz] = sites.extents;
  std::vector<double> d(sites.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = sites.voxels[i] ? 0.0 : kInf;

  std::vector<double> line, out;
  std::vector<std::size_t> v;
  std::vector<double> z;
  const std::size_t ext[3] = {nx, ny, nz};
  const std::size_t stride[3] = {1, nx, nx * ny};
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t n = ext[axis];
    line.resize(n);
    out.resize(n);
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (std::size_t i = 0; i < ext[a1]; ++i)
      for (std::size_t j = 0; j < ext[a2]; ++j) {
        const std::size_t base = i * stride[a1] + j * stride[a2];
        for (std::size_t p = 0; p < n; ++p) line[p] = d[base + p * stride[axis]];
        edt_1d(line, sites.spacing_mm[axis], out, v, z);
        for (std::size_t p = 0; p < n; ++p) d[base + p * stride[axis]] = out[p];
      }
  }
  return d;
}

double directed(const Mask& from_boundary, const std::vector<double>& to_map, double percentile) {
  std::vector<double> dist;
  for (std::size_t i = 0; i < from_boundary.size(); ++i)
    if (from_boundary.voxels[i]) dist.push_back(std::sqrt(to_map[i]));
  if (percentile >= 100.0) return *std::max_element(dist.begin(), dist.end());
  std::sort(dist.begin(), dist.end());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(dist.size())));
  return dist[std::clamp<std::size_t>(rank, 1, dist.size()) - 1];
}

std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.voxels.begin(), m.voxels.end(), [](auto v) { return v != 0; }));
}

}  // namespace

Mask class_mask(const LabelMap& labels, std::uint8_t label) {
  Mask m(labels.extents, labels.spacing_mm, 0, labels.case_id);
  for (std::size_t i = 0; i < labels.size(); ++i) m.voxels[i] = labels.voxels[i] == label;
  return m;
}

Mask myocardium_mask(const LabelMap& labels) {
  Mask m(labels.extents, labels.spacing_mm, 0, labels.case_id);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels.voxels[i];
    m.voxels[i] = l == kMyocardium || l == kInfarction || l == kNoReflow;
  }
  return m;
}

double DiceCounts::value() const {
  if (size_a + size_b == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection) / static_cast<double>(size_a + size_b);
}

DiceCounts dice_counts(const Mask& a, const Mask& b) {
  require_same_geometry(a, b, "dice");
  DiceCounts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.voxels[i] != 0, y = b.voxels[i] != 0;
    c.size_a += x;
    c.size_b += y;
    c.intersection += x && y;
  }
  return c;
}

double dice(const Mask& a, const Mask& b) { return dice_counts(a, b).value(); }

double volume_mm3(const Mask& mask) { return static_cast<double>(count(mask)) * mask.voxel_volume_mm3(); }

double voldif_mm3(const Mask& pred, const Mask& gt) {
  require_same_geometry(pred, gt, "voldif");
  // Difference of counts, so voldif(a, b) == voldif(b, a) and voldif(a, a) == 0 exactly.
  const std::size_t np = count(pred), ng = count(gt);
  return static_cast<double>(np > ng ? np - ng : ng - np) * gt.voxel_volume_mm3();
}

Mask boundary(const Mask& mask) {
  const auto [nx, ny, nz] = mask.extents;
  Mask out(mask.extents, mask.spacing_mm, 0, mask.case_id);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        if (!mask.at(x, y, z)) continue;
        const bool edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        out.at(x, y, z) = edge || !mask.at(x - 1, y, z) || !mask.at(x + 1, y, z) || !mask.at(x, y - 1, z) ||
                          !mask.at(x, y + 1, z) || !mask.at(x, y, z - 1) || !mask.at(x, y, z + 1);
      }
  return out;
}

std::optional<double> hausdorff_mm(const Mask& a, const Mask& b, double percentile) {
  require_same_geometry(a, b, "hausdorff");
  if (!(percentile > 0 && percentile <= 100)) throw std::invalid_argument("hausdorff: percentile must lie in (0,100]");
  if (count(a) == 0 || count(b) == 0) return std::nullopt;
  const Mask ba = boundary(a), bb = boundary(b);
  const auto da = squared_distance_map(ba), db = squared_distance_map(bb);
  return std::max(directed(ba, db, percentile), directed(bb, da, percentile));
}

double class_percentage(const LabelMap& labels, std::uint8_t label) {
  // Voxel counts: the voxel volume cancels, and leaving it out keeps the
  // ratio independent of spacing roundoff.
  const std::size_t myo = count(myocardium_mask(labels));
  if (myo == 0) return 0.0;
  return 100.0 * static_cast<double>(count(class_mask(labels, label))) / static_cast<double>(myo);
}

double ratio_error(const LabelMap& pred, const LabelMap& gt, std::uint8_t label) {
  return std::abs(class_percentage(pred, label) - class_percentage(gt, label));
}

CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& gt) {
  if (!same_geometry(pred, gt))
    throw ShapeError("evaluate_case '" + gt.case_id + "': prediction and ground truth differ in geometry");
  CaseMetrics m;
  m.case_id = gt.case_id.empty() ? pred.case_id : gt.case_id;
  const Mask myo_p = myocardium_mask(pred), myo_g = myocardium_mask(gt);
  m.myo_dice_pct = 100.0 * dice(myo_p, myo_g);
  m.myo_voldif_mm3 = voldif_mm3(myo_p, myo_g);
  m.myo_hsd_mm = hausdorff_mm(myo_p, myo_g);

  const Mask inf_p = class_mask(pred, kInfarction), inf_g = class_mask(gt, kInfarction);
  m.inf_dice_pct = 100.0 * dice(inf_p, inf_g);
  m.inf_voldif_mm3 = voldif_mm3(inf_p, inf_g);
  m.inf_ratio_pts = ratio_error(pred, gt, kInfarction);

  const Mask nr_p = class_mask(pred, kNoReflow), nr_g = class_mask(gt, kNoReflow);
  m.nr_dice_pct = 100.0 * dice(nr_p, nr_g);
  m.nr_voldif_mm3 = voldif_mm3(nr_p, nr_g);
  m.nr_ratio_pts = ratio_error(pred, gt, kNoReflow);
  m.degenerate_ratio = count(myo_p) == 0 || count(myo_g) == 0;
  return m;
}

MetricsReport aggregate(std::vector<CaseMetrics> rows, std::vector<ExcludedCase> excluded) {
  MetricsReport r;
  r.rows = std::move(rows);
  r.excluded = std::move(excluded);
  CaseMetrics& a = r.aggregate;
  a.case_id = "mean";
  if (r.rows.empty()) return r;
  double hsd_sum = 0;
  std::size_t hsd_n = 0;
  for (const auto& row : r.rows) {
    a.myo_dice_pct += row.myo_dice_pct;
    a.myo_voldif_mm3 += row.myo_voldif_mm3;
    a.inf_dice_pct += row.inf_dice_pct;
    a.inf_voldif_mm3 += row.inf_voldif_mm3;
    a.inf_ratio_pts += row.inf_ratio_pts;
    a.nr_dice_pct += row.nr_dice_pct;
    a.nr_voldif_mm3 += row.nr_voldif_mm3;
    a.nr_ratio_pts += row.nr_ratio_pts;
    a.degenerate_ratio = a.degenerate_ratio || row.degenerate_ratio;
    if (row.myo_hsd_mm) {
      hsd_sum += *row.myo_hsd_mm;
      ++hsd_n;
    }
  }
  const double n = static_cast<double>(r.rows.size());
  a.myo_dice_pct /= n;
  a.myo_voldif_mm3 /= n;
  a.inf_dice_pct /= n;
  a.inf_voldif_mm3 /= n;
  a.inf_ratio_pts /= n;
  a.nr_dice_pct /= n;
  a.nr_voldif_mm3 /= n;
  a.nr_ratio_pts /= n;
  if (hsd_n) a.myo_hsd_mm = hsd_sum / static_cast<double>(hsd_n);
  r.hsd_excluded = r.rows.size() - hsd_n;
  return r;
}

MetricsReport evaluate_cases(const std::vector<CasePair>& cases) {
  std::vector<CaseMetrics> rows;
  std::vector<ExcludedCase> excluded;
  for (const auto& c : cases) {
    try {
      rows.push_back(evaluate_case(c.pred, c.gt));
    } catch (const ShapeError& e) {
      excluded.push_back({c.gt.case_id, e.what()});
    }
  }
  return aggregate(std::move(rows), std::move(excluded));
}

double mean_foreground_dice(const LabelMap& pred, const LabelMap& gt) {
  double sum = 0;
  for (std::uint8_t c = kCavity; c <= kNoReflow; ++c) sum += dice(class_mask(pred, c), class_mask(gt, c));
  return sum / 4.0;
}

}  // namespace cseg
