#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "cseg/errors.hpp"
#include "cseg/image.hpp"
#include "cseg/nifti.hpp"
#include "cseg/phantom.hpp"
#include "cseg/sidecar.hpp"
#include "test_support.hpp"

using namespace cseg;
using cseg::testing::scratch_dir;

namespace {

// Hand-built NIfTI-1 header, offsets from the published nifti1.h layout.
struct RawHeader {
  std::string bytes = std::string(352, '\0');

  template <typename U>
  void put(std::size_t off, U v) {
    std::memcpy(bytes.data() + off, &v, sizeof(U));
  }

  RawHeader(std::int16_t nx, std::int16_t ny, std::int16_t nz, std::int16_t datatype, std::int16_t bitpix,
            float sx, float sy, float sz) {
    put<std::int32_t>(0, 348);
    put<std::int16_t>(40, 3);
    put<std::int16_t>(42, nx);
    put<std::int16_t>(44, ny);
    put<std::int16_t>(46, nz);
    for (int i = 4; i < 8; ++i) put<std::int16_t>(40 + 2 * i, 1);
    put<std::int16_t>(70, datatype);
    put<std::int16_t>(72, bitpix);
    put<float>(76, 1.0f);
    put<float>(80, sx);
    put<float>(84, sy);
    put<float>(88, sz);
    put<float>(108, 352.0f);
    std::memcpy(bytes.data() + 344, "n+1\0", 4);
  }

  void slope(float s, float i) {
    put<float>(112, s);
    put<float>(116, i);
  }
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << s;
}

Volume random_volume(Extents3 ext, Spacing3 sp, std::mt19937_64& rng) {
  Volume v(ext, sp, 0.0f, "vol");
  std::normal_distribution<float> n(3.0f, 2.0f);
  for (auto& x : v.voxels) x = n(rng);
  return v;
}

std::string field_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(Nifti, Float32RoundTripIsBitExact) {
  const auto dir = scratch_dir("nifti_rt");
  std::mt19937_64 rng(1);
  const Volume v = random_volume({4, 4, 2}, {1.25, 0.5, 3.0}, rng);
  write_nifti(v, dir / "case.nii");
  const Volume back = read_volume_nifti(dir / "case.nii");
  EXPECT_EQ(back.extents, v.extents);
  EXPECT_EQ(back.spacing_mm, v.spacing_mm);
  ASSERT_EQ(back.voxels.size(), v.voxels.size());
  EXPECT_EQ(std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(float)), 0);
  EXPECT_EQ(back.case_id, "case");
}

TEST(Nifti, LabelRoundTripUsesUint8) {
  const auto dir = scratch_dir("nifti_labels");
  std::mt19937_64 rng(2);
  const LabelMap m = cseg::testing::random_labels({5, 3, 2}, {1.667, 1.667, 10.0}, rng);
  write_nifti(m, dir / "lab.nii");
  EXPECT_EQ(read_nifti(dir / "lab.nii").datatype, NiftiDatatype::kUInt8);
  const LabelMap back = read_labels_nifti(dir / "lab.nii");
  EXPECT_EQ(back.voxels, m.voxels);
  EXPECT_TRUE(same_geometry(back, m));
}

TEST(Nifti, ParsesChallengeSizedHeader) {
  RawHeader h(166, 270, 7, 2, 8, 1.667f, 1.667f, 10.0f);
  std::string bytes = h.bytes + std::string(166 * 270 * 7, '\x02');
  const NiftiImage img = decode_nifti(bytes);
  EXPECT_EQ(img.extents, (Extents3{166, 270, 7}));
  EXPECT_FLOAT_EQ(static_cast<float>(img.spacing_mm[0]), 1.667f);
  EXPECT_FLOAT_EQ(static_cast<float>(img.spacing_mm[1]), 1.667f);
  EXPECT_FLOAT_EQ(static_cast<float>(img.spacing_mm[2]), 10.0f);
  EXPECT_EQ(img.values.size(), 166u * 270u * 7u);
  EXPECT_EQ(img.values.front(), 2.0f);
}

TEST(Nifti, AppliesSlopeAndIntercept) {
  RawHeader h(1, 1, 1, 4, 16, 1, 1, 1);
  h.slope(2.0f, 1.0f);
  std::string bytes = h.bytes;
  const std::int16_t stored = 3;
  bytes.append(reinterpret_cast<const char*>(&stored), 2);
  EXPECT_EQ(decode_nifti(bytes).values[0], 7.0f);

  // Slope 0 means "no scaling".
  h.slope(0.0f, 5.0f);
  bytes = h.bytes;
  bytes.append(reinterpret_cast<const char*>(&stored), 2);
  EXPECT_EQ(decode_nifti(bytes).values[0], 3.0f);
}

TEST(Nifti, HonoursVoxOffset) {
  RawHeader h(2, 1, 1, 16, 32, 1, 1, 1);
  h.put<float>(108, 400.0f);
  std::string bytes = h.bytes + std::string(400 - 352, '\x7f');
  const float vals[2] = {1.5f, -2.25f};
  bytes.append(reinterpret_cast<const char*>(vals), sizeof vals);
  const auto img = decode_nifti(bytes);
  EXPECT_EQ(img.values, (std::vector<float>{1.5f, -2.25f}));
}

TEST(Nifti, MalformedHeadersNameTheField) {
  const RawHeader good(2, 2, 2, 16, 32, 1, 1, 1);
  const std::string data(8 * 4, '\0');
  ASSERT_NO_THROW(decode_nifti(good.bytes + data));

  auto with = [&](auto mutate) {
    RawHeader h = good;
    mutate(h);
    return h.bytes + data;
  };
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { std::memcpy(h.bytes.data() + 344, "ni1\0", 4); })); }),
            "magic");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<std::int16_t>(70, 64); })); }), "datatype");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<std::int16_t>(72, 8); })); }), "bitpix");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<std::int32_t>(0, 540); })); }), "sizeof_hdr");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<std::int16_t>(40, 0); })); }), "dim");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<std::int16_t>(48, 3); h.put<std::int16_t>(40, 4); })); }),
            "dim");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<float>(84, 0.0f); })); }), "pixdim");
  EXPECT_EQ(field_of([&] { decode_nifti(with([](RawHeader& h) { h.put<float>(108, 100.0f); })); }), "vox_offset");
  EXPECT_EQ(field_of([&] { decode_nifti(good.bytes + data.substr(0, 31)); }), "data");
  EXPECT_EQ(field_of([&] { decode_nifti(good.bytes.substr(0, 200)); }), "sizeof_hdr");
  EXPECT_EQ(field_of([&] { decode_nifti(""); }), "sizeof_hdr");
}

TEST(Nifti, FileErrorsKeepFieldAndMentionPath) {
  const auto dir = scratch_dir("nifti_bad");
  RawHeader h(2, 2, 2, 16, 32, 1, 1, 1);
  write_file(dir / "short.nii", h.bytes + std::string(10, '\0'));
  try {
    read_volume_nifti(dir / "short.nii");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.field(), "data");
    EXPECT_NE(std::string(e.what()).find("short.nii"), std::string::npos);
  }
}

TEST(Nifti, LabelReaderRejectsOutOfVocabulary) {
  const auto dir = scratch_dir("nifti_vocab");
  RawHeader h(2, 1, 1, 2, 8, 1, 1, 1);
  write_file(dir / "a.nii", h.bytes + std::string("\x01\x05", 2));
  EXPECT_EQ(field_of([&] { read_labels_nifti(dir / "a.nii"); }), "data");
  RawHeader f(2, 1, 1, 16, 32, 1, 1, 1);
  const float vals[2] = {1.0f, 2.5f};
  write_file(dir / "b.nii", f.bytes + std::string(reinterpret_cast<const char*>(vals), sizeof vals));
  EXPECT_EQ(field_of([&] { read_labels_nifti(dir / "b.nii"); }), "data");
}

TEST(Sidecar, RoundTripsVolumesLabelsAndProbabilities) {
  const auto dir = scratch_dir("sidecar");
  std::mt19937_64 rng(3);
  const Volume v = random_volume({6, 5, 3}, {1.667, 1.667, 10.0}, rng);
  const auto json = write_sidecar(to_sidecar(v), dir / "vol");
  EXPECT_EQ(json.filename(), "vol.json");
  EXPECT_TRUE(std::filesystem::exists(dir / "vol.raw"));
  const Volume back = sidecar_volume(read_sidecar(dir / "vol"));
  EXPECT_EQ(back.voxels, v.voxels);
  EXPECT_EQ(back.spacing_mm, v.spacing_mm);
  EXPECT_EQ(back.case_id, "vol");

  const LabelMap m = cseg::testing::random_labels({6, 5, 3}, {2, 2, 5}, rng);
  write_sidecar(to_sidecar(m), dir / "lab");
  const auto raw = read_sidecar(dir / "lab.json");
  EXPECT_EQ(raw.dtype, SidecarDtype::kUInt8);
  EXPECT_EQ(std::filesystem::file_size(dir / "lab.raw"), m.size());
  EXPECT_EQ(sidecar_labels(raw).voxels, m.voxels);

  // Probabilities: [C, nx, ny, nz] tensor order in memory, x fastest on disk.
  Tensor<float> probs({2, 3, 2, 2});
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = static_cast<float>(i);
  const auto sc = to_sidecar(probs, {1, 1, 1}, "p");
  EXPECT_EQ(sc.channels, 2u);
  // Channel 1, x=2, y=1, z=0 sits at tensor index 1*12 + (2*2+1)*2 + 0 = 22,
  // and on disk at channel*12 + x + 3*(y + 2*z) = 12 + 5 = 17.
  EXPECT_EQ(sc.values[17], 22.0f);
  write_sidecar(sc, dir / "p");
  EXPECT_EQ(read_sidecar(dir / "p").values, sc.values);
}

TEST(Sidecar, ErrorsNameTheField) {
  const auto dir = scratch_dir("sidecar_bad");
  std::mt19937_64 rng(4);
  write_sidecar(to_sidecar(random_volume({2, 2, 2}, {1, 1, 1}, rng)), dir / "v");
  const std::string good = read_file(dir / "v.json");
  auto patched = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    const auto pos = s.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    s.replace(pos, from.size(), to);
    write_file(dir / "v.json", s);
    return field_of([&] { read_sidecar(dir / "v"); });
  };
  EXPECT_EQ(patched("\"float32\"", "\"float64\""), "dtype");
  EXPECT_EQ(patched("\"cseg-raw\"", "\"other\""), "format");
  EXPECT_EQ(patched("\"little\"", "\"big\""), "byte_order");
  EXPECT_EQ(patched("\"version\": 1", "\"version\": 2"), "version");
  EXPECT_EQ(patched("\"format\"", "\"fmt\""), "json");
  EXPECT_EQ(patched("{", "["), "json");
  write_file(dir / "v.json", good);
  write_file(dir / "v.raw", std::string(7, '\0'));
  EXPECT_EQ(field_of([&] { read_sidecar(dir / "v"); }), "data");
  std::filesystem::remove(dir / "v.raw");
  EXPECT_EQ(field_of([&] { read_sidecar(dir / "v"); }), "data_file");
}

TEST(Zscore, ConstantVolumeMapsToZeros) {
  const Volume v({4, 4, 2}, {1, 1, 1}, 3.5f);
  for (float x : zscore_normalize(v).voxels) EXPECT_EQ(x, 0.0f);
}

TEST(Zscore, UnitStatisticsAndIdempotence) {
  std::mt19937_64 rng(5);
  const Volume v = random_volume({32, 32, 8}, {1, 1, 1}, rng);
  const Volume z = zscore_normalize(v);
  double mean = 0, var = 0;
  for (float x : z.voxels) mean += x;
  mean /= static_cast<double>(z.size());
  for (float x : z.voxels) var += (x - mean) * (x - mean);
  var /= static_cast<double>(z.size());
  EXPECT_LT(std::abs(mean), 1e-9);
  EXPECT_LT(std::abs(var - 1.0), 1e-6);

  const Volume zz = zscore_normalize(z);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(zz.voxels[i], z.voxels[i], 1e-6);
  EXPECT_THROW(zscore_normalize(Volume({1, 1, 1}, {1, 1, 1})), ShapeError);
}

TEST(Slices, ChallengeShapeGivesSevenSlices) {
  Volume v({166, 270, 7}, {1.667, 1.667, 10.0});
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i);
  const auto slices = extract_slices(v);
  ASSERT_EQ(slices.size(), 7u);
  for (std::size_t k = 0; k < 7; ++k) {
    EXPECT_EQ(slices[k].extents, (Extents3{166, 270, 1}));
    EXPECT_EQ(slices[k].at(5, 9, 0), v.at(5, 9, k));
  }
  const Volume back = stack_slices(slices);
  EXPECT_EQ(back.voxels, v.voxels);
  EXPECT_EQ(back.spacing_mm, v.spacing_mm);
}

TEST(Slices, SingleSliceAndMismatch) {
  const LabelMap one({3, 4, 1}, {1, 1, 1}, 2);
  const auto s = extract_slices(one);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(stack_slices(s).voxels, one.voxels);

  std::vector<LabelMap> bad{LabelMap({3, 4, 1}, {1, 1, 1}), LabelMap({4, 3, 1}, {1, 1, 1})};
  EXPECT_THROW(stack_slices(bad), ShapeError);
  EXPECT_THROW(stack_slices(std::vector<LabelMap>{}), ShapeError);
}

TEST(Labels, VocabularyValidation) {
  LabelMap m({2, 2, 1}, {1, 1, 1});
  m.voxels = {0, 1, 2, 4};
  EXPECT_NO_THROW(validate_labels(m));
  m.voxels[3] = 5;
  EXPECT_THROW(validate_labels(m), ShapeError);
  m.voxels.pop_back();
  EXPECT_THROW(validate_labels(m), ShapeError);
}

TEST(Phantom, AnatomyNestsAndNormalCasesHaveNoPathology) {
  PhantomSpec spec;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    spec.seed = seed;
    spec.pathological = true;
    spec.noreflow_probability = 1.0;
    const Phantom sick = generate_phantom(spec);
    spec.pathological = false;
    const Phantom well = generate_phantom(spec);
    validate_labels(sick.labels);
    validate_labels(well.labels);
    std::set<int> seen;
    for (std::size_t i = 0; i < sick.labels.size(); ++i) {
      const int s = sick.labels.voxels[i], w = well.labels.voxels[i];
      seen.insert(s);
      EXPECT_LE(w, 2);
      // Pathology only relabels the annulus of the same geometry.
      if (s >= 2) {
        EXPECT_EQ(w, 2) << "seed " << seed << " voxel " << i;
      } else {
        EXPECT_EQ(w, s);
      }
    }
    EXPECT_TRUE(seen.count(1) && seen.count(2) && seen.count(3)) << "seed " << seed;
  }
}

TEST(Phantom, NoReflowSitsInsideInfarct) {
  PhantomSpec spec;
  spec.noreflow_probability = 1.0;
  std::size_t nr = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    spec.seed = seed;
    const auto p = generate_phantom(spec);
    for (std::size_t z = 0; z < spec.extents[2]; ++z)
      for (std::size_t y = 0; y < spec.extents[1]; ++y)
        for (std::size_t x = 0; x < spec.extents[0]; ++x) {
          if (p.labels.at(x, y, z) != kNoReflow) continue;
          ++nr;
          // Every no-reflow voxel has an infarct or no-reflow voxel within the slice neighbourhood.
          bool near_infarct = false;
          for (int dy = -3; dy <= 3 && !near_infarct; ++dy)
            for (int dx = -3; dx <= 3 && !near_infarct; ++dx) {
              const long xx = static_cast<long>(x) + dx, yy = static_cast<long>(y) + dy;
              if (xx < 0 || yy < 0 || xx >= 64 || yy >= 64) continue;
              near_infarct = p.labels.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy), z) == kInfarction;
            }
          EXPECT_TRUE(near_infarct);
        }
  }
  EXPECT_GT(nr, 0u);
}

TEST(Phantom, IntensityModelOrdersTissues) {
  PhantomSpec spec;
  spec.seed = 7;
  spec.noise_sigma = 0.0;
  const auto p = generate_phantom(spec);
  double mean[5] = {}, count[5] = {};
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    mean[p.labels.voxels[i]] += p.image.voxels[i];
    count[p.labels.voxels[i]] += 1;
  }
  for (int c = 0; c < 5; ++c)
    if (count[c]) mean[c] /= count[c];
  EXPECT_GT(mean[kInfarction], mean[kCavity]);
  EXPECT_GT(mean[kCavity], mean[kBackground]);
  EXPECT_GT(mean[kBackground], mean[kMyocardium]);
}

TEST(Phantom, DeterministicPerSeed) {
  PhantomSpec spec;
  spec.seed = 42;
  const auto a = generate_phantom(spec), b = generate_phantom(spec);
  EXPECT_EQ(a.image.voxels, b.image.voxels);
  EXPECT_EQ(a.labels.voxels, b.labels.voxels);
  spec.seed = 43;
  EXPECT_NE(generate_phantom(spec).image.voxels, a.image.voxels);
}

TEST(Phantom, DefaultsMatchChallengeGeometry) {
  const PhantomSpec spec;
  EXPECT_EQ(spec.extents, (Extents3{64, 64, 8}));
  EXPECT_EQ(spec.spacing_mm, (Spacing3{1.667, 1.667, 10.0}));
  const auto p = generate_phantom(spec);
  EXPECT_FLOAT_EQ(static_cast<float>(p.image.voxel_volume_mm3()), static_cast<float>(1.667 * 1.667 * 10.0));
}

TEST(Phantom, CohortPathologyRateAndIds) {
  const auto cohort = phantom_cohort(PhantomSpec{}, 100, 1, 0.67);
  ASSERT_EQ(cohort.size(), 100u);
  std::size_t sick = 0;
  std::set<std::uint64_t> seeds;
  for (const auto& s : cohort) {
    sick += s.pathological;
    seeds.insert(s.seed);
  }
  EXPECT_GE(sick, 60u);
  EXPECT_LE(sick, 74u);
  EXPECT_EQ(seeds.size(), 100u);
  EXPECT_EQ(cohort.front().case_id, "phantom_000");
  EXPECT_EQ(cohort.back().case_id, "phantom_099");
  EXPECT_EQ(phantom_cohort(PhantomSpec{}, 3, 5, 1.0, "test")[2].case_id, "test_002");

  // Other seeds stay within four binomial standard deviations (sd ~4.7).
  for (std::uint64_t seed = 2; seed < 12; ++seed) {
    std::size_t k = 0;
    for (const auto& s : phantom_cohort(PhantomSpec{}, 100, seed, 0.67)) k += s.pathological;
    EXPECT_GE(k, 48u);
    EXPECT_LE(k, 86u);
  }
  EXPECT_THROW(phantom_cohort(PhantomSpec{}, 3, 1, 1.5), ConfigError);
}

TEST(Phantom, SpecValidation) {
  PhantomSpec s;
  s.cavity_radius = {5, 4};
  EXPECT_THROW(generate_phantom(s), ConfigError);
  s = PhantomSpec{};
  s.extents = {0, 4, 4};
  EXPECT_THROW(generate_phantom(s), ConfigError);
  s = PhantomSpec{};
  s.noreflow_probability = 1.5;
  EXPECT_THROW(generate_phantom(s), ConfigError);
}
