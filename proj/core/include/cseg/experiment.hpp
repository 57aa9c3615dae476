#pragma once

// Dataset handling, cascade training, cross-validation and ensembling.
//
// Experiment directory:
//   resolved_config.json   split.json
//   fold_<k>/weights2d.bin weights3d.bin train2d_log.csv train3d_log.csv
//            config_hash.txt trained_cases.json
//            report_{coarse,refined,final}.{csv,json}
//   cv_report_{coarse,refined,final}.{csv,json}
//   ensemble/predictions/<case>.nii  ensemble/report_final.{csv,json}
//   ensemble/summary.json

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cseg/cascade.hpp"
#include "cseg/config.hpp"
#include "cseg/folds.hpp"
#include "cseg/image.hpp"
#include "cseg/metrics.hpp"
#include "cseg/unet.hpp"

namespace cseg {

/// Receives one human-readable progress line at a time.
using ProgressLog = std::function<void(const std::string&)>;

struct Case {
  std::string id;
  Volume image;
  LabelMap labels;
};

/// Reads DIR/images/<id>.nii and DIR/labels/<id>.nii, sorted by id. Throws
/// FormatError or ConfigError for unreadable or unpaired files.
std::vector<Case> load_dataset(const std::filesystem::path& dir);
void write_dataset(std::span<const Case> cases, const std::filesystem::path& dir);

/// Phantom cases "<prefix>_NNN" from the config's phantom spec.
std::vector<Case> generate_cases(const RunConfig& cfg, std::size_t count, std::uint64_t seed,
                                 const std::string& prefix);

/// Training cases followed by validation cases: from data_dir when set (first
/// train_cases sorted ids, then val_cases), otherwise generated phantoms.
std::pair<std::vector<Case>, std::vector<Case>> train_val_cases(const RunConfig& cfg);
/// All cross-validation cases.
std::vector<Case> cv_cases(const RunConfig& cfg);
/// Ensemble test cases, disjoint from the cross-validation cases.
std::vector<Case> test_cases(const RunConfig& cfg);

/// Label .nii files of `dir`, or of dir/labels when that exists, keyed by case id.
std::map<std::string, std::filesystem::path> label_files(const std::filesystem::path& dir);

/// Scores every ground-truth case against the prediction of the same id.
/// Missing predictions and geometry mismatches become excluded cases.
MetricsReport evaluate_directories(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

struct Cascade {
  UNet<float> model2d;
  UNet<float> model3d;
};

Cascade make_cascade(const RunConfig& cfg);

struct CascadeTraining {
  Cascade cascade;
  /// Sorted ids of every case that contributed a gradient, as seen by the trainer.
  std::vector<std::string> trained_on;
  std::vector<EpochStats> log2d;
  std::vector<EpochStats> log3d;
};

/// Stage 1 on all slices of `train`; stage-1 inference over `train` supplies
/// the priors for stage 2. When `out_dir` is set, logs and per-epoch
/// checkpoints go there as train{2d,3d}_log.csv and weights{2d,3d}.bin.
CascadeTraining train_cascade(const RunConfig& cfg, std::span<const Case> train, const std::filesystem::path& out_dir,
                              const ProgressLog& log = {});

struct StageReports {
  MetricsReport coarse;
  MetricsReport refined;
  MetricsReport final;
  /// Final labels per case, in input order.
  std::vector<LabelMap> predictions;
  /// Refined labels before postprocessing, in input order.
  std::vector<LabelMap> refined_labels;
};

StageReports evaluate_cascade(const Cascade& cascade, std::span<const Case> cases, std::size_t min_component_voxels);
void write_stage_reports(const StageReports& reports, const std::filesystem::path& dir, const std::string& prefix);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> trained_on;
  std::vector<std::string> held_out;
  StageReports reports;
  bool resumed = false;
};

/// Trains (or resumes) one fold under `fold_dir` and evaluates its held-out cases.
FoldResult train_fold(const FoldSplit& split, std::size_t fold, const RunConfig& cfg, std::span<const Case> cases,
                      const std::filesystem::path& fold_dir, const ProgressLog& log = {});

struct WeightSet {
  std::filesystem::path weights2d;
  std::filesystem::path weights3d;
};

/// Every cascade labels every case; the refined label maps are majority voted
/// and the voted map is postprocessed. Output order follows `cases`.
std::vector<LabelMap> run_ensemble_inference(const RunConfig& cfg, std::span<const WeightSet> weights,
                                             std::span<const Case> cases);

struct EnsembleResult {
  std::vector<LabelMap> predictions;
  MetricsReport report;
  double ensemble_mean_fg_dice = 0;
  std::vector<double> fold_mean_fg_dice;
};

/// Ensemble inference with the fold weights under `out_dir`, writing
/// out_dir/ensemble/.
EnsembleResult run_ensemble(const RunConfig& cfg, const std::filesystem::path& out_dir, std::span<const Case> cases);

struct CvResult {
  FoldSplit split;
  std::vector<FoldResult> folds;
  EnsembleResult ensemble;
};

/// Full experiment under cfg.output_dir.
CvResult run_cv(const RunConfig& cfg, const ProgressLog& log = {});

}  // namespace cseg
