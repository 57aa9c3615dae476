#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cseg/errors.hpp"
#include "cseg/metrics.hpp"
#include "cseg/phantom.hpp"
#include "cseg/report.hpp"
#include "test_support.hpp"

using namespace cseg;

namespace {

const Spacing3 kChallenge{1.667, 1.667, 10.0};

Mask random_mask(Extents3 ext, Spacing3 sp, std::mt19937_64& rng, double p) {
  Mask m(ext, sp);
  std::bernoulli_distribution on(p);
  for (auto& v : m.voxels) v = on(rng);
  return m;
}

using Voxel = std::array<long, 3>;

std::set<Voxel> voxel_set(const Mask& m) {
  std::set<Voxel> s;
  for (std::size_t z = 0; z < m.extents[2]; ++z)
    for (std::size_t y = 0; y < m.extents[1]; ++y)
      for (std::size_t x = 0; x < m.extents[0]; ++x)
        if (m.at(x, y, z)) s.insert({static_cast<long>(x), static_cast<long>(y), static_cast<long>(z)});
  return s;
}

// Boundary = members with a 6-neighbour outside the set (the image border
// counts as outside).
std::vector<Voxel> boundary_oracle(const Mask& m) {
  const auto s = voxel_set(m);
  std::vector<Voxel> out;
  for (const auto& v : s) {
    bool edge = false;
    for (int a = 0; a < 3 && !edge; ++a)
      for (int d : {-1, 1}) {
        Voxel n = v;
        n[a] += d;
        if (n[a] < 0 || n[a] >= static_cast<long>(m.extents[a]) || !s.count(n)) edge = true;
      }
    if (edge) out.push_back(v);
  }
  return out;
}

double hd_oracle(const Mask& a, const Mask& b) {
  const auto ba = boundary_oracle(a), bb = boundary_oracle(b);
  auto dist = [&](const Voxel& p, const Voxel& q) {
    double s = 0;
    for (int i = 0; i < 3; ++i) {
      const double d = static_cast<double>(p[i] - q[i]) * a.spacing_mm[i];
      s += d * d;
    }
    return std::sqrt(s);
  };
  auto directed = [&](const std::vector<Voxel>& from, const std::vector<Voxel>& to) {
    double worst = 0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, dist(p, q));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(ba, bb), directed(bb, ba));
}

Mask shifted(const Mask& m, long dx, long dy, long dz) {
  Mask out(m.extents, m.spacing_mm);
  for (const auto& v : voxel_set(m)) {
    const long x = v[0] + dx, y = v[1] + dy, z = v[2] + dz;
    out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) = 1;
  }
  return out;
}

LabelMap labels_with(Extents3 ext, Spacing3 sp, std::size_t myo, std::size_t inf, std::size_t nr) {
  LabelMap m(ext, sp);
  std::size_t i = 0;
  for (std::size_t k = 0; k < inf; ++k) m.voxels[i++] = kInfarction;
  for (std::size_t k = 0; k < nr; ++k) m.voxels[i++] = kNoReflow;
  for (std::size_t k = inf + nr; k < myo; ++k) m.voxels[i++] = kMyocardium;
  return m;
}

}  // namespace

TEST(Dice, WorkedExamplesAndConventions) {
  Mask a({4, 1, 1}, {1, 1, 1}), b({4, 1, 1}, {1, 1, 1});
  a.voxels = {1, 1, 0, 0};
  b.voxels = {0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
  const Mask empty({4, 1, 1}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(dice(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, empty), 0.0);
  EXPECT_DOUBLE_EQ(dice(empty, a), 0.0);
  EXPECT_THROW(dice(a, Mask({2, 2, 1}, {1, 1, 1})), ShapeError);
  EXPECT_THROW(dice(a, Mask({4, 1, 1}, {1, 2, 1})), ShapeError);
}

TEST(Dice, MatchesSetCountingOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const double pa = 0.05 + 0.9 * (trial % 10) / 10.0, pb = 0.5;
    const Mask a = random_mask({16, 16, 16}, {1, 1, 1}, rng, pa), b = random_mask({16, 16, 16}, {1, 1, 1}, rng, pb);
    const auto sa = voxel_set(a), sb = voxel_set(b);
    std::size_t inter = 0;
    for (const auto& v : sa) inter += sb.count(v);
    const double want = sa.empty() && sb.empty() ? 1.0 : 2.0 * inter / static_cast<double>(sa.size() + sb.size());
    ASSERT_EQ(dice(a, b), want) << "trial " << trial;
    ASSERT_EQ(dice(a, b), dice(b, a));
  }
}

TEST(Masks, MyocardiumIsUnionOfWallClasses) {
  LabelMap all2({3, 3, 3}, kChallenge, 2);
  for (auto v : myocardium_mask(all2).voxels) EXPECT_EQ(v, 1);
  LabelMap m({5, 1, 1}, kChallenge);
  m.voxels = {0, 1, 2, 3, 4};
  EXPECT_EQ(myocardium_mask(m).voxels, (std::vector<std::uint8_t>{0, 0, 1, 1, 1}));
  EXPECT_EQ(class_mask(m, 3).voxels, (std::vector<std::uint8_t>{0, 0, 0, 1, 0}));
  EXPECT_EQ(class_mask(m, 4).voxels, (std::vector<std::uint8_t>{0, 0, 0, 0, 1}));
}

TEST(Masks, PhantomCardinalitiesMatchLabelCounts) {
  PhantomSpec spec;
  spec.noreflow_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    spec.seed = seed;
    const auto p = generate_phantom(spec);
    std::size_t n[5] = {};
    for (auto l : p.labels.voxels) ++n[l];
    auto card = [](const Mask& m) { return static_cast<std::size_t>(std::count(m.voxels.begin(), m.voxels.end(), 1)); };
    EXPECT_EQ(card(myocardium_mask(p.labels)), n[2] + n[3] + n[4]);
    EXPECT_EQ(card(class_mask(p.labels, kInfarction)), n[3]);
    EXPECT_EQ(card(class_mask(p.labels, kNoReflow)), n[4]);
    EXPECT_NEAR(volume_mm3(myocardium_mask(p.labels)), (n[2] + n[3] + n[4]) * p.labels.voxel_volume_mm3(), 1e-6);
  }
}

TEST(Volume, WorkedExampleAndAdditivity) {
  Mask m({10, 10, 2}, kChallenge);
  for (std::size_t i = 0; i < 100; ++i) m.voxels[i] = 1;
  EXPECT_NEAR(volume_mm3(m), 2778.889, 1e-3);
  EXPECT_EQ(volume_mm3(Mask({3, 3, 3}, kChallenge)), 0.0);
  EXPECT_EQ(voldif_mm3(m, m), 0.0);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask r = random_mask({8, 8, 3}, kChallenge, rng, 0.4);
    Mask a = r, b = r;
    for (std::size_t i = 0; i < r.size(); ++i) {
      a.voxels[i] = r.voxels[i] && i % 2;
      b.voxels[i] = r.voxels[i] && !(i % 2);
    }
    EXPECT_NEAR(volume_mm3(r), volume_mm3(a) + volume_mm3(b), 1e-9);
    EXPECT_EQ(voldif_mm3(a, b), voldif_mm3(b, a));
  }
}

TEST(Hausdorff, WorkedExamples) {
  Mask a({8, 4, 3}, kChallenge), b({8, 4, 3}, kChallenge);
  a.at(1, 1, 1) = 1;
  b.at(4, 1, 1) = 1;
  EXPECT_NEAR(*hausdorff_mm(a, b), 5.001, 1e-9);
  EXPECT_EQ(*hausdorff_mm(a, a), 0.0);
  // Offset along z is scaled by the 10 mm slice spacing.
  Mask c({8, 4, 3}, kChallenge);
  c.at(1, 1, 2) = 1;
  EXPECT_NEAR(*hausdorff_mm(a, c), 10.0, 1e-12);
  EXPECT_FALSE(hausdorff_mm(a, Mask({8, 4, 3}, kChallenge)).has_value());
  EXPECT_THROW(hausdorff_mm(a, b, 0.0), std::invalid_argument);
}

TEST(Hausdorff, MatchesAllPairsOracle) {
  std::mt19937_64 rng(3);
  int evaluated = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Spacing3 sp = trial % 2 ? kChallenge : Spacing3{0.7, 1.3, 2.9};
    const Extents3 ext{static_cast<std::size_t>(4 + trial % 7), static_cast<std::size_t>(5 + trial % 5),
                       static_cast<std::size_t>(2 + trial % 4)};
    const Mask a = random_mask(ext, sp, rng, 0.1 + 0.08 * (trial % 8));
    const Mask b = random_mask(ext, sp, rng, 0.3);
    const auto got = hausdorff_mm(a, b);
    if (voxel_set(a).empty() || voxel_set(b).empty()) {
      EXPECT_FALSE(got.has_value());
      continue;
    }
    ++evaluated;
    ASSERT_TRUE(got.has_value());
    EXPECT_NEAR(*got, hd_oracle(a, b), 1e-9) << "trial " << trial;
    EXPECT_EQ(*got, *hausdorff_mm(b, a));
  }
  EXPECT_GT(evaluated, 90);
}

TEST(Hausdorff, BoundaryMatchesOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask m = random_mask({6, 7, 4}, {1, 1, 1}, rng, 0.6);
    const auto want = boundary_oracle(m);
    const auto got = voxel_set(boundary(m));
    EXPECT_EQ(std::vector<Voxel>(got.begin(), got.end()), want);
  }
}

TEST(Hausdorff, TranslationAndSpacingProperties) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    // Random content confined to the interior so shifts stay in bounds.
    Mask a({14, 14, 8}, kChallenge), b({14, 14, 8}, kChallenge);
    std::bernoulli_distribution on(0.4);
    for (std::size_t z = 2; z < 5; ++z)
      for (std::size_t y = 3; y < 9; ++y)
        for (std::size_t x = 3; x < 9; ++x) {
          a.at(x, y, z) = on(rng);
          b.at(x, y, z) = on(rng);
        }
    if (voxel_set(a).empty() || voxel_set(b).empty()) continue;
    const long dx = trial % 3, dy = -(trial % 2), dz = trial % 4 == 0 ? 2 : -1;
    EXPECT_NEAR(*hausdorff_mm(shifted(a, dx, dy, dz), shifted(b, dx, dy, dz)), *hausdorff_mm(a, b), 1e-12);

    Mask a2 = a, b2 = b;
    for (auto* m : {&a2, &b2})
      for (auto& s : m->spacing_mm) s *= 2.5;
    EXPECT_NEAR(*hausdorff_mm(a2, b2), 2.5 * *hausdorff_mm(a, b), 1e-9);
  }
  // A single voxel against its translate measures the shift in mm.
  Mask p({10, 10, 6}, kChallenge);
  p.at(2, 3, 1) = 1;
  EXPECT_NEAR(*hausdorff_mm(p, shifted(p, 3, 4, 2)),
              std::sqrt(std::pow(3 * 1.667, 2) + std::pow(4 * 1.667, 2) + std::pow(20.0, 2)), 1e-9);
}

TEST(Hausdorff, PercentileVariant) {
  Mask a({12, 1, 1}, {1, 1, 1}), b({12, 1, 1}, {1, 1, 1});
  a.at(0, 0, 0) = 1;
  a.at(11, 0, 0) = 1;
  b.at(0, 0, 0) = 1;
  // From a: distances {0, 11}; from b: {0}. Median rank picks 0.
  EXPECT_EQ(*hausdorff_mm(a, b), 11.0);
  EXPECT_EQ(*hausdorff_mm(a, b, 50.0), 0.0);
}

TEST(Ratio, WorkedExamples) {
  const LabelMap gt = labels_with({20, 10, 1}, {1, 1, 1}, 100, 10, 0);
  const LabelMap pred = labels_with({20, 10, 1}, {1, 1, 1}, 100, 15, 0);
  EXPECT_NEAR(ratio_error(pred, gt, kInfarction), 5.0, 1e-12);
  EXPECT_EQ(ratio_error(gt, gt, kInfarction), 0.0);
  EXPECT_EQ(ratio_error(pred, gt, kNoReflow), 0.0);
  EXPECT_NEAR(class_percentage(gt, kInfarction), 10.0, 1e-12);
  // Empty myocardium: 0 by convention.
  EXPECT_EQ(class_percentage(LabelMap({4, 4, 1}, {1, 1, 1}, 1), kInfarction), 0.0);
}

TEST(Evaluate, IdenticalMapsScorePerfect) {
  std::mt19937_64 rng(6);
  const LabelMap m = cseg::testing::random_labels({10, 9, 3}, kChallenge, rng);
  const auto r = evaluate_case(m, m);
  EXPECT_EQ(r.myo_dice_pct, 100.0);
  EXPECT_EQ(r.inf_dice_pct, 100.0);
  EXPECT_EQ(r.nr_dice_pct, 100.0);
  EXPECT_EQ(r.myo_voldif_mm3, 0.0);
  EXPECT_EQ(*r.myo_hsd_mm, 0.0);
  EXPECT_EQ(r.inf_ratio_pts + r.nr_ratio_pts + r.inf_voldif_mm3 + r.nr_voldif_mm3, 0.0);
  EXPECT_FALSE(r.degenerate_ratio);
}

TEST(Evaluate, RowsMatchComponentMetrics) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    LabelMap p = cseg::testing::random_labels({9, 8, 3}, kChallenge, rng);
    LabelMap g = cseg::testing::random_labels({9, 8, 3}, kChallenge, rng);
    g.case_id = "c" + std::to_string(trial);
    const auto r = evaluate_case(p, g);
    EXPECT_EQ(r.case_id, g.case_id);
    EXPECT_DOUBLE_EQ(r.myo_dice_pct, 100 * dice(myocardium_mask(p), myocardium_mask(g)));
    EXPECT_DOUBLE_EQ(*r.myo_hsd_mm, hd_oracle(myocardium_mask(p), myocardium_mask(g)));
    EXPECT_DOUBLE_EQ(r.inf_dice_pct, 100 * dice(class_mask(p, 3), class_mask(g, 3)));
    EXPECT_DOUBLE_EQ(r.nr_voldif_mm3, voldif_mm3(class_mask(p, 4), class_mask(g, 4)));
    EXPECT_DOUBLE_EQ(r.inf_ratio_pts, ratio_error(p, g, 3));
    for (double v : {r.myo_dice_pct, r.inf_dice_pct, r.nr_dice_pct}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0);
    }
  }
}

TEST(Aggregate, MeansExclusionsAndHausdorffCount) {
  CaseMetrics a, b, c;
  a.case_id = "a";
  a.myo_dice_pct = 80;
  a.myo_hsd_mm = 4;
  a.inf_ratio_pts = 2;
  b.case_id = "b";
  b.myo_dice_pct = 90;
  b.myo_hsd_mm = 6;
  b.inf_ratio_pts = 3;
  c.case_id = "c";
  c.myo_dice_pct = 40;
  const auto two = aggregate({a, b});
  EXPECT_DOUBLE_EQ(two.aggregate.myo_dice_pct, 85.0);
  EXPECT_DOUBLE_EQ(*two.aggregate.myo_hsd_mm, 5.0);
  EXPECT_DOUBLE_EQ(two.aggregate.inf_ratio_pts, 2.5);
  const auto three = aggregate({a, b, c});
  EXPECT_DOUBLE_EQ(three.aggregate.myo_dice_pct, 70.0);
  EXPECT_DOUBLE_EQ(*three.aggregate.myo_hsd_mm, 5.0);
  EXPECT_EQ(three.hsd_excluded, 1u);

  LabelMap g({4, 4, 2}, kChallenge, 2), p({4, 4, 3}, kChallenge, 2);
  g.case_id = "bad";
  LabelMap g2 = g;
  g2.case_id = "good";
  const auto r = evaluate_cases({{p, g}, {g2, g2}});
  ASSERT_EQ(r.excluded.size(), 1u);
  EXPECT_EQ(r.excluded[0].case_id, "bad");
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.aggregate.myo_dice_pct, 100.0);
  EXPECT_THROW(evaluate_case(p, g), ShapeError);
}

TEST(Report, CsvSchemaAndFormatting) {
  CaseMetrics a;
  a.case_id = "case_1";
  a.myo_dice_pct = 87.856;
  a.myo_voldif_mm3 = 9258.244;
  a.myo_hsd_mm = 13.014;
  CaseMetrics b = a;
  b.case_id = "case_2";
  b.myo_hsd_mm.reset();
  const auto csv = report_csv(aggregate({a, b}));
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line,
            "case_id,myo_dice,myo_voldif_mm3,myo_hsd_mm,inf_dice,inf_voldif_mm3,inf_ratio_pts,nr_dice,nr_voldif_mm3,"
            "nr_ratio_pts");
  std::getline(in, line);
  EXPECT_EQ(line, "case_1,87.86,9258.24,13.01,0.00,0.00,0.00,0.00,0.00,0.00");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 31), "case_2,87.86,9258.24,NA,0.00,0.");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 27), "mean,87.86,9258.24,13.01,0.");
  EXPECT_FALSE(std::getline(in, line));
}

TEST(Report, JsonMirrorsCsvAndIsPure) {
  std::mt19937_64 rng(8);
  std::vector<CasePair> pairs;
  for (int i = 0; i < 3; ++i) {
    CasePair c{cseg::testing::random_labels({6, 6, 2}, kChallenge, rng),
               cseg::testing::random_labels({6, 6, 2}, kChallenge, rng)};
    c.gt.case_id = "case_" + std::to_string(i);
    pairs.push_back(c);
  }
  pairs.push_back({LabelMap({6, 6, 3}, kChallenge), LabelMap({6, 6, 2}, kChallenge)});
  pairs.back().gt.case_id = "mismatch";
  const auto report = evaluate_cases(pairs);
  const auto text = report_json(report);
  EXPECT_EQ(text, report_json(evaluate_cases(pairs)));
  EXPECT_EQ(report_csv(report), report_csv(evaluate_cases(pairs)));

  const auto j = nlohmann::json::parse(text);
  ASSERT_EQ(j["cases"].size(), 3u);
  EXPECT_EQ(j["cases"][1]["case_id"], "case_1");
  for (const char* key : {"myo_dice", "myo_voldif_mm3", "myo_hsd_mm", "inf_dice", "inf_voldif_mm3", "inf_ratio_pts",
                          "nr_dice", "nr_voldif_mm3", "nr_ratio_pts"}) {
    EXPECT_TRUE(j["cases"][0].contains(key)) << key;
    EXPECT_TRUE(j["aggregate"].contains(key)) << key;
  }
  EXPECT_EQ(j["aggregate"]["case_count"], 3);
  EXPECT_DOUBLE_EQ(j["aggregate"]["Myocardium"]["Dice(%)"].get<double>(), report.aggregate.myo_dice_pct);
  EXPECT_TRUE(j["aggregate"]["Infarction"].contains("Ratio(%)"));
  EXPECT_TRUE(j["aggregate"]["NoReflow"].contains("VolDif(mm3)"));
  ASSERT_EQ(j["excluded_cases"].size(), 1u);
  EXPECT_EQ(j["excluded_cases"][0]["case_id"], "mismatch");

  const auto dir = cseg::testing::scratch_dir("report");
  write_report(report, dir / "r.json");
  write_report(report, dir / "r.csv");
  EXPECT_THROW(write_report(report, dir / "r.txt"), std::invalid_argument);
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv"));
}

TEST(Report, MeanForegroundDice) {
  LabelMap a({5, 1, 1}, {1, 1, 1}), b({5, 1, 1}, {1, 1, 1});
  a.voxels = {0, 1, 2, 3, 4};
  b.voxels = {0, 1, 2, 3, 3};
  // Classes 1, 2 perfect; 3: 2*1/(1+2); 4: 0.
  EXPECT_NEAR(mean_foreground_dice(a, b), (1 + 1 + 2.0 / 3 + 0) / 4, 1e-15);
}
