#pragma once

#include <cstdint>
#include <vector>

#include "dupguard/backdoor_lab.hpp"
#include "dupguard/calibration.hpp"
#include "dupguard/feature_store.hpp"
#include "dupguard/metrics.hpp"
#include "dupguard/scoring.hpp"
#include "dupguard/toy_model.hpp"
#include "dupguard/unlearn.hpp"
#include "json.hpp"

namespace dupguard {

/// Every setting of one experiment. Component seeds are derived from the
/// single global seed, so sections carry no seeds of their own.
struct ExperimentConfig {
  std::uint64_t seed = 2025;
  ScenarioSpec scenario{};
  /// Clean reference trajectories generated alongside the synthetic test set
  /// and split into calibration / validation halves.
  std::size_t n_reference = 1000;
  bool residual = true;
  TrainConfig pretrain{};
  TrainConfig attack{};
  DetectorConfig detector{};
  SplitConfig split{};
  UnlearnConfig unlearn{};

  ExperimentConfig();
  /// Sets the global seed and re-derives every component seed.
  void reseed(std::uint64_t global_seed);
  std::uint64_t model_seed() const;
  std::vector<std::size_t> model_dims() const;

  nlohmann::json to_json() const;
  /// Unknown keys and per-section seeds are schema errors.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig defaults = {});
nlohmann::json detector_config_to_json(const DetectorConfig& c);

struct SyntheticSets {
  TrajectoryDataset calib;
  TrajectoryDataset valid;
  TrajectoryDataset test;
};

/// Clean reference set (split into calib / valid) plus a mixed test set,
/// drawn from independent streams of the scenario seed.
SyntheticSets gen_synthetic_sets(const ExperimentConfig& cfg);

struct Teacher {
  std::vector<double> pretrain_log;
  ImplantReport implant;
};

/// Clean pretraining followed by the poisoned fine-tune.
Teacher build_teacher(const ExperimentConfig& cfg, const ToyTask& task);

struct CalibrationSets {
  TrajectoryDataset calib;
  TrajectoryDataset valid;
};

/// Trajectories of the clean reserve, split with the configured fraction.
CalibrationSets calibration_sets(const ToyClassifier& model, const ToyTask& task, const SplitConfig& split);

/// Trajectories of the evaluation stream with labels and the true mask.
TrajectoryDataset stream_trajectories(const ToyClassifier& model, const ToyTask& task);

struct Partition {
  std::vector<std::size_t> poisoned_indices;
  std::vector<std::size_t> clean_indices;
  Eigen::MatrixXd d_p;
  LabeledData d_c;
};

Partition partition_stream(const ToyTask& task, std::vector<std::size_t> poisoned_indices,
                           std::vector<std::size_t> clean_indices);

PurifyReport run_purify(const ToyClassifier& teacher, const ToyTask& task, const Partition& part,
                        const UnlearnConfig& cfg);

struct EndToEnd {
  ToyTask task;
  Teacher teacher;
  DetectorModel detector;
  BatchDetection detection;
  DetectionMetrics detection_metrics;
  Partition partition;
  PurifyReport purify;
};

/// gen -> implant -> fit -> detect -> purify on the toy task.
EndToEnd run_end_to_end(const ExperimentConfig& cfg);

/// Continues an end-to-end run from an existing teacher with another
/// unlearning configuration (same task, detector and partition).
PurifyReport repurify(const EndToEnd& run, const UnlearnConfig& cfg);

}  // namespace dupguard
