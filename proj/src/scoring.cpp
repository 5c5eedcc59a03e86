#include "dupguard/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <string>
#include <thread>

#include "dupguard/error.hpp"

namespace dupguard {

double mahalanobis(const Eigen::VectorXd& feature, const LayerStats& stats) {
  if (feature.size() != stats.centroid.size() || stats.covariance_factor.rows() != feature.size()) {
    fail(ErrorCode::kInvalidArgument, "mahalanobis: dimension mismatch");
  }
  // ||L^{-1}(f - c)||^2 = (f - c)^T Sigma^{-1} (f - c) with Sigma = L L^T.
  const Eigen::VectorXd whitened =
      stats.covariance_factor.triangularView<Eigen::Lower>().solve(feature - stats.centroid);
  return whitened.norm();
}

MdScore md_score(const FeatureTrajectory& traj, const DetectorModel& model) {
  if (model.per_layer.empty()) fail(ErrorCode::kInvalidArgument, "md_score: model has no layers");
  MdScore out;
  for (const auto& ls : model.per_layer) {
    if (ls.layer_index >= traj.layers()) {
      fail(ErrorCode::kInvalidArgument, "md_score: selected layer " + std::to_string(ls.layer_index) +
                                            " beyond trajectory depth");
    }
    out.per_layer.emplace_back(ls.layer_index, mahalanobis(traj.layer(ls.layer_index), ls));
  }
  if (model.aggregate == Aggregate::kMax) {
    out.raw = std::max_element(out.per_layer.begin(), out.per_layer.end(),
                               [](const auto& a, const auto& b) { return a.second < b.second; })
                  ->second;
  } else {
    double sum = 0.0;
    for (const auto& [layer, m] : out.per_layer) sum += m;
    out.raw = sum / static_cast<double>(out.per_layer.size());
  }
  return out;
}

Eigen::MatrixXd inter_layer_differences(const FeatureTrajectory& traj) {
  const Eigen::MatrixXd h = traj.as_double();
  const auto l = h.rows();
  return h.bottomRows(l - 1) - h.topRows(l - 1);
}

Eigen::VectorXd singular_values(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues();
}

double spectral_ratio(const Eigen::VectorXd& sv, double rel_tol) {
  if (sv.size() == 0) return 0.0;
  const double top = sv.maxCoeff();
  if (!(top > 0.0)) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv[i] >= rel_tol * top) sum += sv[i];
  }
  return top / sum;
}

double ss_score(const FeatureTrajectory& traj, double rel_tol) {
  if (traj.layers() < 2) fail(ErrorCode::kInvalidArgument, "ss_score: need at least 2 layers");
  return spectral_ratio(singular_values(inter_layer_differences(traj)), rel_tol);
}

double standardize(double raw, double mean, double stddev) {
  if (!(stddev > 0.0)) fail(ErrorCode::kInvalidArgument, "standardize: sigma must be positive");
  return (raw - mean) / stddev;
}

double fuse(double md_z, double ss_z, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorCode::kInvalidArgument, "fuse: alpha must lie in [0, 1]");
  return alpha * md_z + (1.0 - alpha) * ss_z;
}

double calibrate_threshold(std::span<const double> scores, double target_frr) {
  if (scores.empty()) fail(ErrorCode::kInvalidArgument, "calibrate_threshold: empty score list");
  if (!(target_frr > 0.0 && target_frr < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "calibrate_threshold: target_frr must lie in (0, 1)");
  }
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  // n - floor(t n) == ceil((1 - t) n), computed without the rounding hazard
  // of forming 1 - t first.
  const auto allowed = static_cast<std::size_t>(std::floor(target_frr * static_cast<double>(n) + 1e-9));
  const auto m = std::max<std::size_t>(1, n - std::min(allowed, n));
  return sorted[m - 1];
}

ScoreBreakdown score_breakdown(const FeatureTrajectory& traj, const DetectorModel& model) {
  if (traj.dim() != model.dim) fail(ErrorCode::kInvalidArgument, "trajectory dim does not match detector");
  auto md = md_score(traj, model);
  ScoreBreakdown b;
  b.md_raw = md.raw;
  b.per_layer_md = std::move(md.per_layer);
  b.ss_raw = ss_score(traj, model.config.singular_value_rel_tol);
  b.md_z = standardize(b.md_raw, model.md_stats.mean, model.md_stats.stddev);
  b.ss_z = standardize(b.ss_raw, model.ss_stats.mean, model.ss_stats.stddev);
  b.fused = fuse(b.md_z, b.ss_z, model.fusion_alpha);
  return b;
}

Verdict detect(const FeatureTrajectory& traj, const DetectorModel& model) {
  Verdict v;
  v.breakdown = score_breakdown(traj, model);
  v.is_poisoned = v.breakdown.fused > model.threshold;
  return v;
}

std::size_t scoring_threads() {
  if (const char* env = std::getenv("DUP_GUARD_THREADS")) {
    try {
      const auto v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

BatchDetection detect_batch(const TrajectoryDataset& dataset, const DetectorModel& model,
                            std::size_t threads) {
  dataset.validate();
  BatchDetection out;
  const auto n = dataset.size();
  out.verdicts.resize(n);
  if (threads == 0) threads = scoring_threads();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n / 64));

  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) out.verdicts[i] = detect(dataset.samples[i], model);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(threads);
    const auto chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        try {
          for (std::size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i) {
            out.verdicts[i] = detect(dataset.samples[i], model);
          }
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    (out.verdicts[i].is_poisoned ? out.poisoned_indices : out.clean_indices).push_back(i);
  }
  out.poisoned = dataset.subset(out.poisoned_indices);
  out.clean = dataset.subset(out.clean_indices);
  return out;
}

void write_verdict_csv(std::ostream& os, std::span<const Verdict> verdicts,
                       const std::optional<std::vector<bool>>& true_poison) {
  if (true_poison && true_poison->size() != verdicts.size()) {
    fail(ErrorCode::kInvalidArgument, "write_verdict_csv: poison mask length mismatch");
  }
  const auto old_precision = os.precision(17);
  os << "sample_index,md_raw,ss_raw,md_z,ss_z,fused,is_poisoned";
  if (true_poison) os << ",true_poison";
  os << '\n';
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const auto& b = verdicts[i].breakdown;
    os << i << ',' << b.md_raw << ',' << b.ss_raw << ',' << b.md_z << ',' << b.ss_z << ',' << b.fused << ','
       << (verdicts[i].is_poisoned ? 1 : 0);
    if (true_poison) os << ',' << ((*true_poison)[i] ? 1 : 0);
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace dupguard
