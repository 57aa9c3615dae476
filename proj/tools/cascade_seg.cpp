// cascade-seg: phantom generation, training, inference, evaluation,
// cross-validation and ensembling from the command line.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cseg/cascade.hpp"
#include "cseg/config.hpp"
#include "cseg/errors.hpp"
#include "cseg/experiment.hpp"
#include "cseg/metrics.hpp"
#include "cseg/nifti.hpp"
#include "cseg/random.hpp"
#include "cseg/report.hpp"
#include "cseg/sidecar.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cseg;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "JSON run config (desk defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Master seed; derives the phantom, split and training seeds");
  auto* o = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
}

RunConfig resolve(const Common& c, const fs::path& fallback_config = {}) {
  RunConfig cfg = RunConfig::desk();
  if (!c.config.empty())
    cfg = load_config(c.config);
  else if (!fallback_config.empty() && fs::exists(fallback_config))
    cfg = load_config(fallback_config);
  if (c.seed) {
    cfg.phantom.seed = derive_seed(*c.seed, 0);
    cfg.split_seed = derive_seed(*c.seed, 1);
    cfg.train2d.seed = derive_seed(*c.seed, 2);
    cfg.train3d.seed = derive_seed(*c.seed, 3);
  }
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cout << s << std::endl; }

// A single .nii file, a directory of .nii files, or a dataset directory
// with images/.
std::vector<Volume> load_inputs(const fs::path& input) {
  std::vector<Volume> out;
  if (fs::is_regular_file(input)) {
    out.push_back(read_volume_nifti(input));
    out.back().case_id = case_id_from_path(input);
    return out;
  }
  const fs::path dir = fs::is_directory(input / "images") ? input / "images" : input;
  if (!fs::is_directory(dir)) throw ConfigError("input '" + input.string() + "' does not exist");
  std::map<std::string, fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".nii") files[case_id_from_path(e.path())] = e.path();
  if (files.empty()) throw ConfigError("no .nii files under '" + dir.string() + "'");
  for (const auto& [id, p] : files) {
    out.push_back(read_volume_nifti(p));
    out.back().case_id = id;
  }
  return out;
}

void write_stage(const SegmentationResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_nifti(r.labels, dir / (r.case_id + "_" + stage_name(r.stage) + ".nii"));
  write_sidecar(to_sidecar(r.probs, r.labels.spacing_mm, r.case_id), dir / (r.case_id + "_" + stage_name(r.stage) + "_probs"));
}

int cmd_phantom(const Common& c, std::size_t count, const std::string& prefix, std::optional<double> rate) {
  // Here --seed is the cohort seed itself, not a master seed.
  Common direct = c;
  direct.seed.reset();
  RunConfig cfg = resolve(direct);
  if (rate) cfg.pathology_rate = *rate;
  cfg.validate();
  const std::uint64_t seed = c.seed ? *c.seed : cfg.phantom.seed;
  const std::size_t n = count ? count : cfg.train_cases + cfg.val_cases;
  const auto cases = generate_cases(cfg, n, seed, prefix);
  write_dataset(cases, cfg.output_dir);
  log_line("wrote " + std::to_string(cases.size()) + " phantoms to " + cfg.output_dir.string());
  return 0;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  save_config(cfg, out / "resolved_config.json");
  auto [train, val] = train_val_cases(cfg);
  log_line("training on " + std::to_string(train.size()) + " cases, validating on " + std::to_string(val.size()));
  const auto trained = train_cascade(cfg, train, out, log_line);
  if (!val.empty()) {
    const auto reports = evaluate_cascade(trained.cascade, val, cfg.min_component_voxels);
    write_stage_reports(reports, out, "val_report_");
    char line[200];
    std::snprintf(line, sizeof line, "validation: myo dice %.2f, infarct dice %.2f (coarse %.2f / %.2f)",
                  reports.final.aggregate.myo_dice_pct, reports.final.aggregate.inf_dice_pct,
                  reports.coarse.aggregate.myo_dice_pct, reports.coarse.aggregate.inf_dice_pct);
    log_line(line);
  }
  return 0;
}

struct InferArgs {
  std::string weights, weights2d, weights3d, input, dump_dir;
};

int cmd_infer(const Common& c, const InferArgs& a) {
  fs::path w2 = a.weights2d, w3 = a.weights3d;
  if (!a.weights.empty()) {
    if (w2.empty()) w2 = fs::path(a.weights) / "weights2d.bin";
    if (w3.empty()) w3 = fs::path(a.weights) / "weights3d.bin";
  }
  if (w2.empty() || w3.empty()) throw ConfigError("infer needs --weights DIR or both --weights2d and --weights3d");
  const RunConfig cfg = resolve(c, w2.parent_path() / "resolved_config.json");
  Cascade cascade = make_cascade(cfg);
  load_weights(cascade.model2d, w2);
  load_weights(cascade.model3d, w3);

  // --out x.nii with a single input names the prediction file; otherwise
  // --out is a directory of <case>.nii.
  const fs::path out = cfg.output_dir;
  const auto images = load_inputs(a.input);
  const bool single_file = out.extension() == ".nii";
  if (single_file && images.size() != 1) throw ConfigError("--out ending in .nii needs exactly one input image");
  if (single_file) {
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  } else {
    fs::create_directories(out);
  }
  for (const auto& image : images) {
    const auto p = run_pipeline(cascade.model2d, cascade.model3d, image, cfg.min_component_voxels);
    write_nifti(p.final.labels, single_file ? out : out / (image.case_id + ".nii"));
    if (!a.dump_dir.empty())
      for (const auto* r : {&p.coarse, &p.refined, &p.final}) write_stage(*r, a.dump_dir);
    log_line("segmented " + image.case_id);
  }
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& out) {
  const auto report = evaluate_directories(pred, gt);
  if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
  write_report(report, out);
  log_line("evaluated " + std::to_string(report.rows.size()) + " cases, " + std::to_string(report.excluded.size()) +
           " excluded; wrote " + out);
  return 0;
}

int cmd_cv(const Common& c, std::optional<std::size_t> folds) {
  RunConfig cfg = resolve(c);
  if (folds) {
    cfg.folds = *folds;
    cfg.validate();
  }
  const auto r = run_cv(cfg, log_line);
  char line[160];
  std::snprintf(line, sizeof line, "ensemble mean foreground dice %.4f over %zu test cases",
                r.ensemble.ensemble_mean_fg_dice, r.ensemble.predictions.size());
  log_line(line);
  return 0;
}

int cmd_ensemble(const Common& c, const std::string& input) {
  const RunConfig cfg = resolve(c, fs::path(c.out) / "resolved_config.json");
  std::vector<Case> cases = input.empty() ? test_cases(cfg) : load_dataset(input);
  const auto r = run_ensemble(cfg, cfg.output_dir, cases);
  char line[160];
  std::snprintf(line, sizeof line, "ensemble mean foreground dice %.4f over %zu cases", r.ensemble_mean_fg_dice,
                r.predictions.size());
  log_line(line);
  return 0;
}

int error_exit(const char* type, const std::string& message, const std::string& field, int code) {
  nlohmann::ordered_json j;
  j["error"] = type;
  j["message"] = message;
  if (!field.empty()) j["field"] = field;
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded 2D/3D U-Net segmentation of myocardial infarction"};
  app.require_subcommand(1);

  Common common;
  std::size_t count = 0;
  std::string prefix = "phantom", input, pred, gt, out_report;
  std::optional<double> rate;
  InferArgs infer_args;
  std::optional<std::size_t> folds;

  auto* phantom = app.add_subcommand("phantom", "Write a synthetic dataset (images/ and labels/)");
  add_common(phantom, common, true);
  phantom->add_option("--count", count, "Number of cases (default: train + val cases)");
  phantom->add_option("--prefix", prefix, "Case id prefix");
  phantom->add_option("--pathology-rate", rate, "Fraction of cases with an infarct");

  auto* train = app.add_subcommand("train", "Train both stages and report on the validation split");
  add_common(train, common, true);

  auto* infer = app.add_subcommand("infer", "Segment images with a trained cascade");
  add_common(infer, common, true);
  infer->add_option("--weights", infer_args.weights, "Directory with weights2d.bin and weights3d.bin");
  infer->add_option("--weights2d", infer_args.weights2d, "Stage-1 weight file");
  infer->add_option("--weights3d", infer_args.weights3d, "Stage-2 weight file");
  infer->add_option("--in,--input", infer_args.input, ".nii file, directory of .nii files, or dataset directory")
      ->required();
  infer->add_option("--dump-stages", infer_args.dump_dir, "Write coarse/refined/final labels and probabilities here");

  auto* eval = app.add_subcommand("eval", "Compare predictions to ground truth");
  eval->add_option("--pred", pred, "Directory of predicted label .nii files")->required();
  eval->add_option("--gt", gt, "Directory of ground-truth label .nii files (or a dataset directory)")->required();
  eval->add_option("--out", out_report, "Report path ending in .csv or .json")->required();

  auto* cv = app.add_subcommand("cv", "Cross-validation, per-fold reports and test-set ensemble");
  add_common(cv, common, true);
  cv->add_option("--folds", folds, "Number of folds");

  auto* ensemble = app.add_subcommand("ensemble", "Majority-vote inference with the fold weights of an experiment");
  add_common(ensemble, common, true);
  ensemble->add_option("--input", input, "Dataset directory (default: the configured test set)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return error_exit("usage", e.what(), "", 64);
  }

  try {
    if (*phantom) return cmd_phantom(common, count, prefix, rate);
    if (*train) return cmd_train(common);
    if (*infer) return cmd_infer(common, infer_args);
    if (*eval) return cmd_eval(pred, gt, out_report);
    if (*cv) return cmd_cv(common, folds);
    if (*ensemble) return cmd_ensemble(common, input);
  } catch (const ConfigError& e) {
    return error_exit("config", e.what(), "", 2);
  } catch (const FormatError& e) {
    return error_exit("format", e.what(), e.field(), 3);
  } catch (const ShapeError& e) {
    return error_exit("shape", e.what(), "", 4);
  } catch (const NumericError& e) {
    return error_exit("numeric", e.what(), "", 5);
  } catch (const std::exception& e) {
    return error_exit("runtime", e.what(), "", 1);
  }
  return 1;
}
