#include "cseg/config.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include "cseg/errors.hpp"
#include "json.hpp"

namespace cseg {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Rejects keys outside `allowed` so typos do not silently fall back to defaults.
void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError("unknown config key '" + section + (section.empty() ? "" : ".") + key + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

void read_range(const json& j, const char* key, Range& r, const std::string& section) {
  if (!j.contains(key)) return;
  std::array<double, 2> v{};
  read(j, key, v, section);
  r = {v[0], v[1]};
}

ordered_json unet_json(const UNetConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"max_channels", c.max_channels},
          {"kernel_size", c.kernel_size},
          {"pool_factors", c.pool_factors},
          {"leaky_slope", c.leaky_slope},
          {"norm_epsilon", c.norm_epsilon}};
}

void read_unet(const json& j, UNetConfig& c, const std::string& section) {
  check_keys(j, section, {"depth", "base_channels", "max_channels", "kernel_size", "pool_factors", "leaky_slope",
                          "norm_epsilon"});
  read(j, "depth", c.depth, section);
  read(j, "base_channels", c.base_channels, section);
  read(j, "max_channels", c.max_channels, section);
  read(j, "kernel_size", c.kernel_size, section);
  read(j, "pool_factors", c.pool_factors, section);
  read(j, "leaky_slope", c.leaky_slope, section);
  read(j, "norm_epsilon", c.norm_epsilon, section);
}

ordered_json stage_json(const StageTrainConfig& s) {
  return {{"epochs", s.epochs}, {"lr0", s.lr0}, {"seed", s.seed}, {"augment", s.augment}};
}

void read_stage(const json& j, StageTrainConfig& s, const std::string& section) {
  check_keys(j, section, {"epochs", "lr0", "seed", "augment"});
  read(j, "epochs", s.epochs, section);
  read(j, "lr0", s.lr0, section);
  read(j, "seed", s.seed, section);
  read(j, "augment", s.augment, section);
}

ordered_json to_json(const RunConfig& c, bool with_run_fields) {
  const PhantomSpec& p = c.phantom;
  ordered_json j;
  j["data"] = {{"dir", c.data_dir.string()}, {"test_dir", c.test_dir.string()}};
  if (with_run_fields) j["output_dir"] = c.output_dir.string();
  j["phantom"] = {{"seed", p.seed},
                  {"extents", p.extents},
                  {"spacing_mm", p.spacing_mm},
                  {"cavity_radius", {p.cavity_radius.min, p.cavity_radius.max}},
                  {"wall_thickness", {p.wall_thickness.min, p.wall_thickness.max}},
                  {"infarct_half_angle", {p.infarct_half_angle.min, p.infarct_half_angle.max}},
                  {"infarct_transmurality", {p.infarct_transmurality.min, p.infarct_transmurality.max}},
                  {"noreflow_probability", p.noreflow_probability},
                  {"noreflow_radius", {p.noreflow_radius.min, p.noreflow_radius.max}},
                  {"noise_sigma", p.noise_sigma},
                  {"pathology_rate", c.pathology_rate}};
  j["split"] = {{"train_cases", c.train_cases}, {"val_cases", c.val_cases}};
  j["cv"] = {{"cases", c.cv_cases}, {"folds", c.folds}, {"test_cases", c.test_cases}, {"seed", c.split_seed}};
  j["unet2d"] = unet_json(c.unet2d);
  j["unet3d"] = unet_json(c.unet3d);
  j["train2d"] = stage_json(c.train2d);
  j["train3d"] = stage_json(c.train3d);
  j["postprocess"] = {{"min_component_voxels", c.min_component_voxels}};
  if (with_run_fields) j["resume"] = c.resume;
  return j;
}

}  // namespace

RunConfig RunConfig::desk() {
  RunConfig c;
  c.phantom.seed = 1;
  c.split_seed = 2;
  c.unet2d = UNetConfig::default_2d();
  c.unet2d.depth = 3;
  c.unet2d.base_channels = 8;
  c.unet3d = UNetConfig::default_3d();
  c.unet3d.depth = 2;
  c.unet3d.base_channels = 8;
  c.unet3d.pool_factors = {{2, 2, 1}, {2, 2, 2}};
  c.train2d = {12, 0.01, 3, false};
  c.train3d = {20, 0.01, 4, false};
  return c;
}

void RunConfig::validate() const {
  phantom.validate();
  if (!(pathology_rate >= 0 && pathology_rate <= 1)) throw ConfigError("phantom.pathology_rate must lie in [0,1]");
  if (train_cases == 0) throw ConfigError("split.train_cases must be positive");
  if (folds < 2) throw ConfigError("cv.folds must be at least 2");
  if (cv_cases < folds) throw ConfigError("cv.cases must be at least cv.folds");
  if (unet2d.rank != 2 || unet2d.in_channels != 1) throw ConfigError("unet2d must be rank 2 with one input channel");
  if (unet3d.rank != 3 || unet3d.in_channels != 1 + kNumClasses)
    throw ConfigError("unet3d must be rank 3 with six input channels");
  unet2d.validate();
  unet3d.validate();
  for (const auto* s : {&train2d, &train3d}) {
    if (s->epochs == 0) throw ConfigError("training epochs must be positive");
    if (!(s->lr0 > 0)) throw ConfigError("training lr0 must be positive");
  }
  for (const auto& [dir, name] : {std::pair{data_dir, "data.dir"}, std::pair{test_dir, "data.test_dir"}}) {
    if (dir.empty()) continue;
    if (!std::filesystem::is_directory(dir / "images") || !std::filesystem::is_directory(dir / "labels"))
      throw ConfigError(std::string(name) + " '" + dir.string() + "' must contain images/ and labels/");
  }
}

std::uint64_t RunConfig::hash() const {
  const std::string text = to_json(*this, false).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

TrainOptions RunConfig::train_options(const StageTrainConfig& stage) const {
  TrainOptions o;
  o.epochs = stage.epochs;
  o.adam.lr0 = stage.lr0;
  o.seed = stage.seed;
  o.augment.enabled = stage.augment;
  return o;
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "", {"data", "output_dir", "phantom", "split", "cv", "unet2d", "unet3d", "train2d", "train3d",
                     "postprocess", "resume"});
  RunConfig c = RunConfig::desk();
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, "data", {"dir", "test_dir"});
    std::string dir, test_dir;
    read(d, "dir", dir, "data");
    read(d, "test_dir", test_dir, "data");
    c.data_dir = dir;
    c.test_dir = test_dir;
  }
  if (j.contains("output_dir")) {
    std::string out;
    read(j, "output_dir", out, "");
    c.output_dir = out;
  }
  if (j.contains("phantom")) {
    const auto& p = j["phantom"];
    check_keys(p, "phantom", {"seed", "extents", "spacing_mm", "cavity_radius", "wall_thickness",
                              "infarct_half_angle", "infarct_transmurality", "noreflow_probability",
                              "noreflow_radius", "noise_sigma", "pathology_rate"});
    read(p, "seed", c.phantom.seed, "phantom");
    read(p, "extents", c.phantom.extents, "phantom");
    read(p, "spacing_mm", c.phantom.spacing_mm, "phantom");
    read_range(p, "cavity_radius", c.phantom.cavity_radius, "phantom");
    read_range(p, "wall_thickness", c.phantom.wall_thickness, "phantom");
    read_range(p, "infarct_half_angle", c.phantom.infarct_half_angle, "phantom");
    read_range(p, "infarct_transmurality", c.phantom.infarct_transmurality, "phantom");
    read(p, "noreflow_probability", c.phantom.noreflow_probability, "phantom");
    read_range(p, "noreflow_radius", c.phantom.noreflow_radius, "phantom");
    read(p, "noise_sigma", c.phantom.noise_sigma, "phantom");
    read(p, "pathology_rate", c.pathology_rate, "phantom");
  }
  if (j.contains("split")) {
    check_keys(j["split"], "split", {"train_cases", "val_cases"});
    read(j["split"], "train_cases", c.train_cases, "split");
    read(j["split"], "val_cases", c.val_cases, "split");
  }
  if (j.contains("cv")) {
    const auto& v = j["cv"];
    check_keys(v, "cv", {"cases", "folds", "test_cases", "seed"});
    read(v, "cases", c.cv_cases, "cv");
    read(v, "folds", c.folds, "cv");
    read(v, "test_cases", c.test_cases, "cv");
    read(v, "seed", c.split_seed, "cv");
  }
  if (j.contains("unet2d")) read_unet(j["unet2d"], c.unet2d, "unet2d");
  if (j.contains("unet3d")) read_unet(j["unet3d"], c.unet3d, "unet3d");
  if (j.contains("train2d")) read_stage(j["train2d"], c.train2d, "train2d");
  if (j.contains("train3d")) read_stage(j["train3d"], c.train3d, "train3d");
  if (j.contains("postprocess")) {
    check_keys(j["postprocess"], "postprocess", {"min_component_voxels"});
    read(j["postprocess"], "min_component_voxels", c.min_component_voxels, "postprocess");
  }
  if (j.contains("resume")) read(j, "resume", c.resume, "");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(std::string(std::istreambuf_iterator<char>(in), {}));
}

std::string dump_config(const RunConfig& cfg) { return to_json(cfg, true).dump(2) + "\n"; }

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << dump_config(cfg);
}

}  // namespace cseg
