#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dupguard/feature_store.hpp"
#include "json.hpp"

namespace dupguard {

enum class Aggregate { kMean, kMax };

std::string to_string(Aggregate mode);
Aggregate aggregate_from_string(const std::string& name);

/// Clean-feature model of one selected layer: class-agnostic centroid and
/// the lower Cholesky factor of the shrunk covariance.
struct LayerStats {
  std::size_t layer_index = 0;
  Eigen::VectorXd centroid;
  Eigen::MatrixXd covariance_factor;
};

struct ScoreStats {
  double mean = 0.0;
  double stddev = 1.0;
};

struct DetectorConfig {
  std::size_t k = 3;
  Aggregate aggregate = Aggregate::kMean;
  double shrinkage_gamma = 0.1;
  double fusion_alpha = 0.9;
  double target_frr = 0.05;
  double jitter = 1e-6;
  /// Singular values below this fraction of the largest are dropped from the
  /// spectral-ratio denominator.
  double singular_value_rel_tol = 1e-12;

  void validate(std::size_t layers) const;
};

struct DetectorModel {
  std::size_t layers = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> selected_layers;
  std::vector<LayerStats> per_layer;
  std::vector<double> ch_scores;
  Aggregate aggregate = Aggregate::kMean;
  ScoreStats md_stats;
  ScoreStats ss_stats;
  double fusion_alpha = 0.9;
  double threshold = 0.0;
  double target_frr = 0.05;
  DetectorConfig config;

  nlohmann::json to_json() const;
  static DetectorModel from_json(const nlohmann::json& j);
};

/// Reported when the within-cluster dispersion vanishes but the
/// between-cluster dispersion does not.
inline constexpr double kChSentinel = std::numeric_limits<double>::max();

/// Calinski-Harabasz index of `features` (n x d) under `labels`.
/// Degenerate cases: B = W = 0 gives 0, W = 0 < B gives kChSentinel.
double ch_score(const Eigen::MatrixXd& features, std::span<const std::uint32_t> labels);

/// Indices of the k largest scores (ties to the lower index), ascending.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

Eigen::VectorXd fit_centroid(const Eigen::MatrixXd& features);

/// Population covariance S (divisor n), shrunk to
/// (1 - gamma) S + gamma tr(S)/d I. When the Cholesky factorization fails,
/// jitter * I is added and multiplied by 10 up to three more times.
/// Returns the lower-triangular factor.
Eigen::MatrixXd fit_shrunk_covariance(const Eigen::MatrixXd& features, double gamma, double jitter);

/// Same as above but returns the covariance matrix that was factored.
Eigen::MatrixXd shrunk_covariance(const Eigen::MatrixXd& features, double gamma, double jitter);

DetectorModel fit_detector(const TrajectoryDataset& calib, const TrajectoryDataset& valid,
                           const DetectorConfig& cfg);

}  // namespace dupguard
