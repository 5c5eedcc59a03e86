#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dupguard/calibration.hpp"
#include "dupguard/feature_store.hpp"

namespace dupguard {

struct ScoreBreakdown {
  double md_raw = 0.0;
  double ss_raw = 0.0;
  double md_z = 0.0;
  double ss_z = 0.0;
  double fused = 0.0;
  std::vector<std::pair<std::size_t, double>> per_layer_md;
};

struct Verdict {
  ScoreBreakdown breakdown;
  bool is_poisoned = false;
};

struct MdScore {
  double raw = 0.0;
  std::vector<std::pair<std::size_t, double>> per_layer;
};

/// sqrt((f - c)^T Sigma^{-1} (f - c)) via a triangular solve against the
/// stored Cholesky factor.
double mahalanobis(const Eigen::VectorXd& feature, const LayerStats& stats);

MdScore md_score(const FeatureTrajectory& traj, const DetectorModel& model);

/// Rows f_{i+1} - f_i, i = 0..L-2.
Eigen::MatrixXd inter_layer_differences(const FeatureTrajectory& traj);

/// Descending singular values of `m`.
Eigen::VectorXd singular_values(const Eigen::MatrixXd& m);

/// s_1 / sum_j s_j over singular values >= rel_tol * s_1; 0 when s_1 = 0.
double spectral_ratio(const Eigen::VectorXd& singular_values, double rel_tol = 1e-12);

double ss_score(const FeatureTrajectory& traj, double rel_tol = 1e-12);

double standardize(double raw, double mean, double stddev);
double fuse(double md_z, double ss_z, double alpha);

/// The ceil((1 - target_frr) n)-th smallest score. Flagging uses a strict
/// comparison, so at most target_frr of the scores lie above it.
double calibrate_threshold(std::span<const double> scores, double target_frr);

ScoreBreakdown score_breakdown(const FeatureTrajectory& traj, const DetectorModel& model);
Verdict detect(const FeatureTrajectory& traj, const DetectorModel& model);

struct BatchDetection {
  std::vector<Verdict> verdicts;
  std::vector<std::size_t> poisoned_indices;
  std::vector<std::size_t> clean_indices;
  TrajectoryDataset poisoned;
  TrajectoryDataset clean;
};

/// Worker count for batch scoring: DUP_GUARD_THREADS if set (>= 1), else the
/// hardware concurrency.
std::size_t scoring_threads();

/// Scores every sample (data-parallel, deterministic order) and partitions
/// the dataset into flagged and clean parts, each keeping input order.
BatchDetection detect_batch(const TrajectoryDataset& dataset, const DetectorModel& model,
                            std::size_t threads = 0);

/// CSV: sample_index,md_raw,ss_raw,md_z,ss_z,fused,is_poisoned[,true_poison]
void write_verdict_csv(std::ostream& os, std::span<const Verdict> verdicts,
                       const std::optional<std::vector<bool>>& true_poison);

}  // namespace dupguard
