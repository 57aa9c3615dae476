#include "cseg/folds.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <set>

#include "cseg/errors.hpp"
#include "cseg/unet.hpp"

namespace cseg {
namespace {

void check_maps(std::span<const LabelMap> maps) {
  if (maps.empty()) throw ShapeError("majority_vote: no label maps");
  for (const auto& m : maps)
    if (!same_geometry(m, maps[0]))
      throw ShapeError("majority_vote: '" + m.case_id + "' differs in geometry from '" + maps[0].case_id + "'");
}

}  // namespace

std::vector<std::string> FoldSplit::held_out(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of)
    if (f == fold) out.push_back(id);
  return out;
}

std::vector<std::string> FoldSplit::training(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of)
    if (f != fold) out.push_back(id);
  return out;
}

FoldSplit make_folds(std::vector<std::string> case_ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("make_folds: k must be at least 2, got " + std::to_string(k));
  if (case_ids.size() < k)
    throw ConfigError("make_folds: " + std::to_string(case_ids.size()) + " cases cannot fill " + std::to_string(k) +
                      " folds");
  if (std::set<std::string>(case_ids.begin(), case_ids.end()).size() != case_ids.size())
    throw ConfigError("make_folds: duplicate case ids");
  // Sorting first makes the split independent of the caller's ordering.
  std::sort(case_ids.begin(), case_ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(case_ids.begin(), case_ids.end(), rng);

  FoldSplit split;
  split.seed = seed;
  split.k = k;
  const std::size_t n = case_ids.size(), base = n / k, extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) split.fold_of[case_ids[pos++]] = f;
  }
  return split;
}

LabelMap majority_vote(std::span<const LabelMap> maps) {
  check_maps(maps);
  LabelMap out(maps[0].extents, maps[0].spacing_mm, 0, maps[0].case_id);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::array<std::size_t, 256> votes{};
    for (const auto& m : maps) ++votes[m.voxels[i]];
    // max_element returns the first maximum, i.e. the smallest tied label.
    out.voxels[i] = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

Tensor<float> vote_fractions(std::span<const LabelMap> maps) {
  check_maps(maps);
  const auto [nx, ny, nz] = maps[0].extents;
  Tensor<float> probs({kNumClasses, nx, ny, nz}, 0.0f);
  const float w = 1.0f / static_cast<float>(maps.size());
  const std::size_t plane = nx * ny * nz;
  for (const auto& m : maps)
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
          const auto l = m.at(x, y, z);
          if (l >= kNumClasses) throw ShapeError("vote_fractions: label out of range in '" + m.case_id + "'");
          probs[l * plane + (x * ny + y) * nz + z] += w;
        }
  return probs;
}

}  // namespace cseg
