#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace dupguard {

/// Row-major float32 storage matching the on-disk payload order.
using FeatureMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-layer feature vectors of one input, stacked as an L x d matrix.
/// Row i is the representation at layer i. Requires L >= 2, d >= 1 and
/// finite entries.
class FeatureTrajectory {
 public:
  explicit FeatureTrajectory(FeatureMatrix data);

  /// Rounds a double-precision trajectory to float32 storage.
  static FeatureTrajectory from_double(const Eigen::MatrixXd& data);

  std::size_t layers() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(data_.cols()); }
  const FeatureMatrix& data() const noexcept { return data_; }

  Eigen::VectorXd layer(std::size_t i) const;
  Eigen::MatrixXd as_double() const { return data_.cast<double>(); }

  friend bool operator==(const FeatureTrajectory& a, const FeatureTrajectory& b);

 private:
  FeatureMatrix data_;
};

struct TrajectoryDataset {
  std::vector<FeatureTrajectory> samples;
  std::optional<std::vector<std::uint32_t>> labels;
  std::optional<std::vector<bool>> poison_mask;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  std::size_t layers() const;
  std::size_t dim() const;

  /// Number of classes implied by the labels (max label + 1); 0 if unlabeled.
  std::size_t num_classes() const;

  /// Throws "inconsistent dimensions" / label / mask errors.
  void validate() const;

  /// n x d matrix of the given layer across all samples.
  Eigen::MatrixXd layer_features(std::size_t layer) const;

  /// Samples at `indices`, in that order, with labels and mask carried along.
  TrajectoryDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const TrajectoryDataset& a, const TrajectoryDataset& b) = default;
};

struct SplitConfig {
  double calib_fraction = 0.5;
  std::uint64_t seed = 2025;
};

struct SplitIndices {
  std::vector<std::size_t> calib;
  std::vector<std::size_t> valid;
};

inline constexpr std::uint32_t kFtrjVersion = 1;
inline constexpr std::size_t kFtrjHeaderBytes = 24;

/// Writes the FTRJ container; returns the number of bytes written.
std::uint64_t write_trajectories(const TrajectoryDataset& dataset,
                                 const std::filesystem::path& path);

TrajectoryDataset read_trajectories(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_trajectories(const TrajectoryDataset& dataset);
TrajectoryDataset decode_trajectories(std::span<const std::uint8_t> bytes);

/// Deterministic (stratified when labelled) calibration/validation split.
/// Both parts keep the original sample order.
SplitIndices split_indices(const TrajectoryDataset& dataset, const SplitConfig& cfg);

std::pair<TrajectoryDataset, TrajectoryDataset> split_calib_valid(
    const TrajectoryDataset& dataset, const SplitConfig& cfg);

/// Writes `<path>.meta.json`. The sidecar is informational only.
void write_sidecar(const std::filesystem::path& ftrj_path, const std::string& json_text);

}  // namespace dupguard
