#include "cseg/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "cseg/errors.hpp"
#include "cseg/nifti.hpp"
#include "cseg/random.hpp"
#include "cseg/report.hpp"
#include "json.hpp"

namespace cseg {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr std::uint64_t kInitStream = 0x1417;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::map<std::string, fs::path> nifti_files(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw ConfigError("missing directory " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".nii") out[case_id_from_path(e.path())] = e.path();
  return out;
}

std::string hash_text(std::uint64_t h) { return std::to_string(h) + "\n"; }

std::vector<Sample<float>> slice_training_set(std::span<const Case> cases, std::vector<Volume>& normalized) {
  std::vector<Sample<float>> samples;
  for (const auto& c : cases) {
    normalized.push_back(zscore_normalize(c.image));
    for (auto& s : slice_samples(normalized.back(), c.labels)) samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<std::vector<LabelMap>> per_cascade_refined(std::span<const Cascade> cascades, std::span<const Case> cases) {
  std::vector<std::vector<LabelMap>> out(cascades.size());
  for (const auto& c : cases) {
    const Volume normalized = zscore_normalize(c.image);
    for (std::size_t k = 0; k < cascades.size(); ++k) {
      const auto coarse = run_coarse(cascades[k].model2d, normalized);
      auto refined = run_refine(cascades[k].model3d, compose_refine_input(normalized, coarse), c.image.spacing_mm, c.id);
      out[k].push_back(std::move(refined.labels));
    }
  }
  return out;
}

std::vector<Cascade> load_cascades(const RunConfig& cfg, std::span<const WeightSet> weights) {
  std::vector<Cascade> cascades;
  for (const auto& w : weights) {
    Cascade c = make_cascade(cfg);
    load_weights(c.model2d, w.weights2d);
    load_weights(c.model3d, w.weights3d);
    cascades.push_back(std::move(c));
  }
  return cascades;
}

std::vector<LabelMap> vote(const RunConfig& cfg, const std::vector<std::vector<LabelMap>>& refined,
                           std::span<const Case> cases) {
  std::vector<LabelMap> out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    std::vector<LabelMap> maps;
    for (const auto& per : refined) maps.push_back(per[i]);
    LabelMap voted = postprocess_labels(majority_vote(maps), cfg.min_component_voxels);
    voted.case_id = cases[i].id;
    out.push_back(std::move(voted));
  }
  return out;
}

MetricsReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const Case> cases) {
  std::vector<CasePair> pairs;
  for (std::size_t i = 0; i < cases.size(); ++i) pairs.push_back({preds[i], cases[i].labels});
  return evaluate_cases(pairs);
}

double mean_fg_dice(std::span<const LabelMap> preds, std::span<const Case> cases) {
  double sum = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) sum += mean_foreground_dice(preds[i], cases[i].labels);
  return cases.empty() ? 0.0 : sum / static_cast<double>(cases.size());
}

}  // namespace

std::vector<Case> load_dataset(const fs::path& dir) {
  const auto images = nifti_files(dir / "images");
  const auto labels = nifti_files(dir / "labels");
  std::vector<Case> cases;
  for (const auto& [id, path] : images) {
    const auto it = labels.find(id);
    if (it == labels.end()) throw ConfigError("image '" + id + "' has no label file in " + (dir / "labels").string());
    Case c{id, read_volume_nifti(path), read_labels_nifti(it->second)};
    c.image.case_id = c.labels.case_id = id;
    if (!same_geometry(c.image, c.labels)) throw ShapeError("case '" + id + "': image and labels differ in geometry");
    cases.push_back(std::move(c));
  }
  for (const auto& [id, _] : labels)
    if (!images.count(id)) throw ConfigError("label '" + id + "' has no image file in " + (dir / "images").string());
  return cases;
}

void write_dataset(std::span<const Case> cases, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (const auto& c : cases) {
    write_nifti(c.image, dir / "images" / (c.id + ".nii"));
    write_nifti(c.labels, dir / "labels" / (c.id + ".nii"));
  }
}

std::map<std::string, fs::path> label_files(const fs::path& dir) {
  return nifti_files(fs::is_directory(dir / "labels") ? dir / "labels" : dir);
}

MetricsReport evaluate_directories(const fs::path& pred_dir, const fs::path& gt_dir) {
  const auto gt_files = label_files(gt_dir), pred_files = label_files(pred_dir);
  if (gt_files.empty()) throw ConfigError("no ground-truth .nii files under '" + gt_dir.string() + "'");
  std::vector<CaseMetrics> rows;
  std::vector<ExcludedCase> excluded;
  for (const auto& [id, path] : gt_files) {
    const auto it = pred_files.find(id);
    if (it == pred_files.end()) {
      excluded.push_back({id, "no prediction"});
      continue;
    }
    LabelMap gt = read_labels_nifti(path), pred = read_labels_nifti(it->second);
    gt.case_id = pred.case_id = id;
    try {
      rows.push_back(evaluate_case(pred, gt));
    } catch (const ShapeError& e) {
      excluded.push_back({id, e.what()});
    }
  }
  return aggregate(std::move(rows), std::move(excluded));
}

std::vector<Case> generate_cases(const RunConfig& cfg, std::size_t count, std::uint64_t seed,
                                 const std::string& prefix) {
  std::vector<Case> cases;
  for (const auto& spec : phantom_cohort(cfg.phantom, count, seed, cfg.pathology_rate, prefix)) {
    Phantom p = generate_phantom(spec);
    cases.push_back({spec.case_id, std::move(p.image), std::move(p.labels)});
  }
  return cases;
}

std::pair<std::vector<Case>, std::vector<Case>> train_val_cases(const RunConfig& cfg) {
  std::vector<Case> all = cfg.data_dir.empty()
                              ? generate_cases(cfg, cfg.train_cases + cfg.val_cases, cfg.phantom.seed, "phantom")
                              : load_dataset(cfg.data_dir);
  if (all.size() < cfg.train_cases + cfg.val_cases)
    throw ConfigError("dataset has " + std::to_string(all.size()) + " cases, split needs " +
                      std::to_string(cfg.train_cases + cfg.val_cases));
  std::vector<Case> val(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.train_cases)),
                        std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.train_cases + cfg.val_cases)));
  all.resize(cfg.train_cases);
  return {std::move(all), std::move(val)};
}

std::vector<Case> cv_cases(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return load_dataset(cfg.data_dir);
  return generate_cases(cfg, cfg.cv_cases, derive_seed(cfg.phantom.seed, 1), "phantom");
}

std::vector<Case> test_cases(const RunConfig& cfg) {
  if (!cfg.test_dir.empty()) return load_dataset(cfg.test_dir);
  return generate_cases(cfg, cfg.test_cases, derive_seed(cfg.phantom.seed, 2), "test");
}

Cascade make_cascade(const RunConfig& cfg) {
  return {UNet<float>(cfg.unet2d, derive_seed(cfg.train2d.seed, kInitStream)),
          UNet<float>(cfg.unet3d, derive_seed(cfg.train3d.seed, kInitStream))};
}

CascadeTraining train_cascade(const RunConfig& cfg, std::span<const Case> train, const fs::path& out_dir,
                              const ProgressLog& log) {
  if (train.empty()) throw ConfigError("train_cascade: no training cases");
  CascadeTraining result{make_cascade(cfg), {}, {}, {}};
  // Filled from the trainer itself, so it lists what actually produced gradients.
  std::set<std::string> stepped;
  auto record = [&stepped](const std::string& sample_id) { stepped.insert(sample_id.substr(0, sample_id.find('#'))); };

  TrainOptions opt2d = cfg.train_options(cfg.train2d);
  TrainOptions opt3d = cfg.train_options(cfg.train3d);
  opt2d.on_step = record;
  opt3d.on_step = record;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (const char* f : {"train2d_log.csv", "train3d_log.csv"}) fs::remove(out_dir / f);
    opt2d.log_path = out_dir / "train2d_log.csv";
    opt2d.checkpoint_path = out_dir / "weights2d.bin";
    opt3d.log_path = out_dir / "train3d_log.csv";
    opt3d.checkpoint_path = out_dir / "weights3d.bin";
  }

  if (log) {
    auto report = [&log](const char* stage, std::size_t epochs) {
      return [&log, stage, epochs](const EpochStats& s) {
        char line[160];
        std::snprintf(line, sizeof line, "%s epoch %zu/%zu loss %.4f (ce %.4f dice %.4f) lr %.5f", stage, s.epoch + 1,
                      epochs, s.mean.total, s.mean.ce, s.mean.dice, s.lr);
        log(line);
      };
    };
    opt2d.on_epoch = report("2d", opt2d.epochs);
    opt3d.on_epoch = report("3d", opt3d.epochs);
  }

  std::vector<Volume> normalized;
  const auto slices = slice_training_set(train, normalized);
  result.log2d = train_model(result.cascade.model2d, std::span<const Sample<float>>(slices), opt2d);

  std::vector<Sample<float>> volumes;
  for (std::size_t i = 0; i < train.size(); ++i)
    volumes.push_back(refine_sample(normalized[i], run_coarse(result.cascade.model2d, normalized[i]), train[i].labels));
  result.log3d = train_model(result.cascade.model3d, std::span<const Sample<float>>(volumes), opt3d);
  result.trained_on.assign(stepped.begin(), stepped.end());
  return result;
}

StageReports evaluate_cascade(const Cascade& cascade, std::span<const Case> cases, std::size_t min_component_voxels) {
  std::vector<CasePair> coarse, refined, final;
  StageReports r;
  for (const auto& c : cases) {
    const auto p = run_pipeline(cascade.model2d, cascade.model3d, c.image, min_component_voxels);
    coarse.push_back({p.coarse.labels, c.labels});
    refined.push_back({p.refined.labels, c.labels});
    final.push_back({p.final.labels, c.labels});
    r.refined_labels.push_back(p.refined.labels);
    r.predictions.push_back(p.final.labels);
  }
  r.coarse = evaluate_cases(coarse);
  r.refined = evaluate_cases(refined);
  r.final = evaluate_cases(final);
  return r;
}

void write_stage_reports(const StageReports& reports, const fs::path& dir, const std::string& prefix) {
  fs::create_directories(dir);
  for (const auto& [name, rep] : {std::pair<const char*, const MetricsReport*>{"coarse", &reports.coarse},
                                  {"refined", &reports.refined},
                                  {"final", &reports.final}}) {
    write_report(*rep, dir / (prefix + name + ".csv"));
    write_report(*rep, dir / (prefix + name + ".json"));
  }
}

FoldResult train_fold(const FoldSplit& split, std::size_t fold, const RunConfig& cfg, std::span<const Case> cases,
                      const fs::path& fold_dir, const ProgressLog& log) {
  if (fold >= split.k) throw ConfigError("fold index " + std::to_string(fold) + " out of range");
  FoldResult result;
  result.fold = fold;
  result.held_out = split.held_out(fold);
  const std::set<std::string> held(result.held_out.begin(), result.held_out.end());

  std::vector<Case> train, test;
  for (const auto& c : cases) {
    if (!split.fold_of.count(c.id)) throw ConfigError("case '" + c.id + "' is not in the fold split");
    (held.count(c.id) ? test : train).push_back(c);
  }

  fs::create_directories(fold_dir);
  const fs::path hash_file = fold_dir / "config_hash.txt";
  const fs::path w2 = fold_dir / "weights2d.bin", w3 = fold_dir / "weights3d.bin";
  const fs::path ids_file = fold_dir / "trained_cases.json";
  const std::string expected = hash_text(cfg.hash());

  Cascade cascade = make_cascade(cfg);
  if (cfg.resume && read_text(hash_file) == expected && fs::exists(w2) && fs::exists(w3) && fs::exists(ids_file)) {
    load_weights(cascade.model2d, w2);
    load_weights(cascade.model3d, w3);
    result.trained_on = ordered_json::parse(read_text(ids_file)).get<std::vector<std::string>>();
    result.resumed = true;
    if (log) log("fold " + std::to_string(fold) + ": resumed from saved weights");
  } else {
    fs::remove(hash_file);
    if (log) log("fold " + std::to_string(fold) + ": training on " + std::to_string(train.size()) + " cases");
    auto trained = train_cascade(cfg, train, fold_dir, log);
    cascade = std::move(trained.cascade);
    result.trained_on = std::move(trained.trained_on);
    write_text(ids_file, ordered_json(result.trained_on).dump(2) + "\n");
    // Written last: its presence marks a complete fold.
    write_text(hash_file, expected);
  }

  result.reports = evaluate_cascade(cascade, test, cfg.min_component_voxels);
  write_stage_reports(result.reports, fold_dir, "report_");
  return result;
}

std::vector<LabelMap> run_ensemble_inference(const RunConfig& cfg, std::span<const WeightSet> weights,
                                             std::span<const Case> cases) {
  if (weights.empty()) throw ConfigError("ensemble inference needs at least one weight set");
  const auto cascades = load_cascades(cfg, weights);
  return vote(cfg, per_cascade_refined(cascades, cases), cases);
}

EnsembleResult run_ensemble(const RunConfig& cfg, const fs::path& out_dir, std::span<const Case> cases) {
  std::vector<WeightSet> weights;
  for (std::size_t k = 0; k < cfg.folds; ++k) {
    const fs::path d = out_dir / ("fold_" + std::to_string(k));
    weights.push_back({d / "weights2d.bin", d / "weights3d.bin"});
  }
  const auto cascades = load_cascades(cfg, weights);
  const auto refined = per_cascade_refined(cascades, cases);

  EnsembleResult r;
  r.predictions = vote(cfg, refined, cases);
  r.report = evaluate_predictions(r.predictions, cases);
  r.ensemble_mean_fg_dice = mean_fg_dice(r.predictions, cases);
  for (const auto& per : refined) {
    std::vector<LabelMap> cleaned;
    for (const auto& m : per) cleaned.push_back(postprocess_labels(m, cfg.min_component_voxels));
    r.fold_mean_fg_dice.push_back(mean_fg_dice(cleaned, cases));
  }

  const fs::path dir = out_dir / "ensemble";
  fs::create_directories(dir / "predictions");
  for (const auto& p : r.predictions) write_nifti(p, dir / "predictions" / (p.case_id + ".nii"));
  write_report(r.report, dir / "report_final.csv");
  write_report(r.report, dir / "report_final.json");
  ordered_json summary;
  summary["cases"] = cases.size();
  summary["ensemble_mean_foreground_dice"] = r.ensemble_mean_fg_dice;
  summary["fold_mean_foreground_dice"] = r.fold_mean_fg_dice;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return r;
}

CvResult run_cv(const RunConfig& cfg, const ProgressLog& log) {
  cfg.validate();
  if (cfg.output_dir.empty()) throw ConfigError("run_cv: output directory not set");
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  save_config(cfg, out / "resolved_config.json");

  const auto cases = cv_cases(cfg);
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.id);

  CvResult result;
  result.split = make_folds(ids, cfg.folds, cfg.split_seed);
  ordered_json split_json;
  split_json["seed"] = result.split.seed;
  split_json["k"] = result.split.k;
  for (std::size_t k = 0; k < result.split.k; ++k) split_json["folds"].push_back(result.split.held_out(k));
  write_text(out / "split.json", split_json.dump(2) + "\n");

  std::vector<CaseMetrics> coarse, refined, final;
  std::vector<ExcludedCase> excluded;
  for (std::size_t k = 0; k < cfg.folds; ++k) {
    auto fr = train_fold(result.split, k, cfg, cases, out / ("fold_" + std::to_string(k)), log);
    const auto& rep = fr.reports;
    coarse.insert(coarse.end(), rep.coarse.rows.begin(), rep.coarse.rows.end());
    refined.insert(refined.end(), rep.refined.rows.begin(), rep.refined.rows.end());
    final.insert(final.end(), rep.final.rows.begin(), rep.final.rows.end());
    excluded.insert(excluded.end(), rep.final.excluded.begin(), rep.final.excluded.end());
    result.folds.push_back(std::move(fr));
  }
  StageReports pooled;
  pooled.coarse = aggregate(std::move(coarse), excluded);
  pooled.refined = aggregate(std::move(refined), excluded);
  pooled.final = aggregate(std::move(final), excluded);
  write_stage_reports(pooled, out, "cv_report_");

  const auto tests = test_cases(cfg);
  if (log) log("ensemble: " + std::to_string(tests.size()) + " test cases");
  result.ensemble = run_ensemble(cfg, out, tests);
  return result;
}

}  // namespace cseg
