#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "dupguard/backdoor_lab.hpp"
#include "dupguard/calibration.hpp"
#include "dupguard/scoring.hpp"
#include "test_helpers.hpp"

using namespace dupguard;
using testutil::expect_error;
using testutil::random_matrix;

namespace {

LayerStats stats_from(const Eigen::VectorXd& c, const Eigen::MatrixXd& sigma) {
  LayerStats s;
  s.centroid = c;
  s.covariance_factor = Eigen::LLT<Eigen::MatrixXd>(sigma).matrixL();
  return s;
}

FeatureTrajectory traj_from(const Eigen::MatrixXd& m) { return FeatureTrajectory::from_double(m); }

// Trajectory whose inter-layer differences equal `delta` (rows).
FeatureTrajectory from_differences(const Eigen::MatrixXd& delta) {
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(delta.rows() + 1, delta.cols());
  for (Eigen::Index i = 0; i < delta.rows(); ++i) f.row(i + 1) = f.row(i) + delta.row(i);
  return traj_from(f);
}

struct Fitted {
  TrajectoryDataset calib;
  TrajectoryDataset valid;
  DetectorModel model;
};

Fitted fitted_synthetic() {
  ScenarioSpec s;
  s.n_clean = 300;
  s.n_poison = 0;
  s.dim = 8;
  s.seed = 5;
  auto calib = gen_synthetic_trajectories(s);
  s.seed = 6;
  auto valid = gen_synthetic_trajectories(s);
  auto model = fit_detector(calib, valid, DetectorConfig{});
  return {std::move(calib), std::move(valid), std::move(model)};
}

}  // namespace

TEST_CASE("mahalanobis examples") {
  CHECK(mahalanobis(Eigen::Vector2d(3, 4), stats_from(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity())) ==
        doctest::Approx(5.0).epsilon(1e-14));
  CHECK(mahalanobis(Eigen::Vector2d(3, 2), stats_from(Eigen::Vector2d(1, 2), 2 * Eigen::Matrix2d::Identity())) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));
  const auto s = stats_from(Eigen::Vector2d(1, -1), Eigen::Matrix2d::Identity());
  CHECK(mahalanobis(Eigen::Vector2d(1, -1), s) == 0.0);
  expect_error([&] { mahalanobis(Eigen::Vector3d::Zero(), s); }, ErrorCode::kInvalidArgument, "dimension mismatch");
}

TEST_CASE("mahalanobis matches an explicit-inverse oracle") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_matrix(8, 8, rng);
    const Eigen::MatrixXd sigma = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(8, 8);
    const Eigen::VectorXd c = random_matrix(8, 1, rng);
    const Eigen::VectorXd f = random_matrix(8, 1, rng);
    const Eigen::VectorXd diff = f - c;
    const double oracle = std::sqrt(diff.dot(sigma.inverse() * diff));
    CHECK(std::abs(mahalanobis(f, stats_from(c, sigma)) - oracle) <= 1e-8 * oracle);
  }
}

TEST_CASE("mahalanobis is affine invariant after refitting") {
  std::mt19937_64 rng(22);
  const auto x = random_matrix(60, 4, rng);
  const auto a = random_matrix(4, 4, rng) + 2.0 * Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd y = x * a.transpose();
  LayerStats sx{0, fit_centroid(x), fit_shrunk_covariance(x, 0.0, 1e-12)};
  LayerStats sy{0, fit_centroid(y), fit_shrunk_covariance(y, 0.0, 1e-12)};
  for (Eigen::Index i = 0; i < 10; ++i) {
    const double mx = mahalanobis(x.row(i).transpose(), sx);
    const double my = mahalanobis(y.row(i).transpose(), sy);
    CHECK(std::abs(mx - my) <= 1e-6 * mx);
  }
}

TEST_CASE("md_score aggregation") {
  DetectorModel m;
  m.layers = 4;
  m.dim = 1;
  m.selected_layers = {0, 2, 3};
  for (std::size_t i : m.selected_layers) {
    m.per_layer.push_back(LayerStats{i, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)});
  }
  Eigen::MatrixXd f(4, 1);
  f << 1, 99, -2, 3;
  const auto mean = md_score(traj_from(f), m);
  CHECK(mean.raw == doctest::Approx(2.0));
  CHECK(mean.per_layer.size() == 3);
  CHECK(mean.per_layer[1].first == 2);
  CHECK(mean.per_layer[1].second == doctest::Approx(2.0));
  m.aggregate = Aggregate::kMax;
  CHECK(md_score(traj_from(f), m).raw == doctest::Approx(3.0));
  CHECK(md_score(traj_from(Eigen::MatrixXd::Zero(4, 1)), m).raw == 0.0);
  m.selected_layers.push_back(7);
  m.per_layer.push_back(LayerStats{7, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)});
  expect_error([&] { md_score(traj_from(f), m); }, ErrorCode::kInvalidArgument, "selected layer 7");
}

TEST_CASE("spectral score examples") {
  Eigen::MatrixXd diag(2, 2);
  diag << 3, 0, 0, 1;
  CHECK(ss_score(from_differences(diag)) == doctest::Approx(0.75).epsilon(1e-12));

  const Eigen::MatrixXd rank1 = Eigen::Vector3d(1, -2, 0.5) * Eigen::RowVector4d(0.5, 1, 2, -1);
  CHECK(ss_score(from_differences(rank1)) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(ss_score(traj_from(Eigen::MatrixXd::Constant(5, 3, 2.0))) == 0.0);

  // r equal singular values give 1 / r.
  CHECK(ss_score(from_differences(Eigen::MatrixXd::Identity(4, 4))) == doctest::Approx(0.25).epsilon(1e-12));
  expect_error([] { FeatureTrajectory(FeatureMatrix::Zero(1, 3)); }, ErrorCode::kInvalidArgument, "2 layers");
}

TEST_CASE("inter-layer differences and singular values") {
  std::mt19937_64 rng(23);
  const auto f = random_matrix(6, 5, rng);
  const auto t = traj_from(f);
  const auto delta = inter_layer_differences(t);
  CHECK(delta.rows() == 5);
  const Eigen::MatrixXd fd = t.as_double();
  CHECK(delta.row(2).isApprox(fd.row(3) - fd.row(2)));

  const auto sv = singular_values(delta);
  for (Eigen::Index i = 1; i < sv.size(); ++i) CHECK(sv(i) <= sv(i - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(delta.transpose() * delta);
  Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().reverse();
  for (Eigen::Index i = 0; i < sv.size(); ++i) CHECK(sv(i) == doctest::Approx(ev(i)).epsilon(1e-9));

  // Right-multiplying by an orthogonal matrix keeps the score.
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(5, 5, rng)).householderQ();
  CHECK(ss_score(traj_from(fd * q)) == doctest::Approx(ss_score(t)).epsilon(1e-5));
  const double s = ss_score(t);
  CHECK(s >= 0.0);
  CHECK(s <= 1.0);
}

TEST_CASE("spectral ratio truncates tiny singular values") {
  Eigen::Vector3d sv(2.0, 1e-14, 0.0);
  CHECK(spectral_ratio(sv) == 1.0);
  CHECK(spectral_ratio(sv, 0.0) == doctest::Approx(2.0 / (2.0 + 1e-14)));
  CHECK(spectral_ratio(Eigen::Vector3d::Zero()) == 0.0);
}

TEST_CASE("standardize and fuse") {
  CHECK(standardize(5, 3, 2) == 1.0);
  CHECK(standardize(3, 3, 2) == 0.0);
  CHECK(standardize(-1, 1, 1) == -2.0);
  expect_error([] { standardize(1, 0, 0); }, ErrorCode::kInvalidArgument, "sigma");
  CHECK(fuse(0.37, -2.0, 1.0) == 0.37);
  CHECK(fuse(0.37, -2.0, 0.0) == -2.0);
  CHECK(fuse(1.0, -1.0, 0.9) == doctest::Approx(0.8).epsilon(1e-15));
  expect_error([] { fuse(1, 1, 1.1); }, ErrorCode::kInvalidArgument, "alpha");
}

TEST_CASE("threshold calibration") {
  std::vector<double> s(20);
  for (int i = 0; i < 20; ++i) s[i] = i + 1;
  CHECK(calibrate_threshold(s, 0.05) == 19.0);
  // Brute force: the smallest candidate whose strict-greater fraction is <= target.
  for (double target : {0.05, 0.1, 0.25, 0.5}) {
    const double tau = calibrate_threshold(s, target);
    double best = 1e9;
    for (double c : s) {
      std::size_t above = 0;
      for (double v : s) above += v > c ? 1 : 0;
      if (static_cast<double>(above) / 20.0 <= target) best = std::min(best, c);
    }
    CHECK(tau == best);
  }
  CHECK(calibrate_threshold(std::vector<double>(7, 1.5), 0.05) == 1.5);
  CHECK(calibrate_threshold(std::vector<double>{4.2}, 0.05) == 4.2);
  expect_error([] { calibrate_threshold(std::vector<double>{}, 0.05); }, ErrorCode::kInvalidArgument, "empty");
  expect_error([] { calibrate_threshold(std::vector<double>{1.0}, 1.0); }, ErrorCode::kInvalidArgument, "target_frr");
}

TEST_CASE("detect on a fitted synthetic model") {
  const auto f = fitted_synthetic();
  const auto& m = f.model;

  // All selected layers at their centroids, constant trajectory.
  Eigen::MatrixXd at_center = Eigen::MatrixXd::Zero(m.layers, m.dim);
  for (const auto& ls : m.per_layer) at_center.row(ls.layer_index) = ls.centroid.transpose();
  Eigen::MatrixXd flat = at_center;
  for (Eigen::Index i = 0; i < flat.rows(); ++i) flat.row(i) = at_center.row(m.selected_layers[0]);
  const auto v0 = detect(traj_from(flat), m);
  CHECK_FALSE(v0.is_poisoned);
  CHECK(v0.breakdown.fused < m.threshold);

  // 10 sigma along the first axis of a selected layer.
  const auto& ls = m.per_layer[0];
  const Eigen::MatrixXd sigma = ls.covariance_factor * ls.covariance_factor.transpose();
  Eigen::MatrixXd shifted = f.valid.samples[0].as_double();
  shifted(ls.layer_index, 0) += 10.0 * std::sqrt(sigma(0, 0));
  CHECK(detect(traj_from(shifted), m).is_poisoned);

  // Breakdown fields are consistent.
  const auto b = detect(f.valid.samples[1], m).breakdown;
  CHECK(b.md_z == standardize(b.md_raw, m.md_stats.mean, m.md_stats.stddev));
  CHECK(b.ss_z == standardize(b.ss_raw, m.ss_stats.mean, m.ss_stats.stddev));
  CHECK(b.fused == fuse(b.md_z, b.ss_z, m.fusion_alpha));

  // A score exactly at the threshold is clean.
  DetectorModel at_tau = m;
  at_tau.threshold = b.fused;
  CHECK_FALSE(detect(f.valid.samples[1], at_tau).is_poisoned);
  at_tau.threshold = std::nextafter(b.fused, -1e300);
  CHECK(detect(f.valid.samples[1], at_tau).is_poisoned);
}

TEST_CASE("batch detection partitions the dataset deterministically") {
  const auto f = fitted_synthetic();
  const auto one = detect_batch(f.valid, f.model, 1);
  const auto four = detect_batch(f.valid, f.model, 4);
  CHECK(one.poisoned_indices == four.poisoned_indices);
  for (std::size_t i = 0; i < one.verdicts.size(); ++i) {
    CHECK(one.verdicts[i].breakdown.fused == four.verdicts[i].breakdown.fused);
  }
  CHECK(static_cast<double>(one.poisoned_indices.size()) / static_cast<double>(f.valid.size()) <= 0.05);
  CHECK(one.poisoned.size() + one.clean.size() == f.valid.size());
  CHECK(std::is_sorted(one.poisoned_indices.begin(), one.poisoned_indices.end()));
  CHECK(std::is_sorted(one.clean_indices.begin(), one.clean_indices.end()));
  for (std::size_t k = 0; k < one.poisoned_indices.size(); ++k) {
    CHECK(one.poisoned.samples[k] == f.valid.samples[one.poisoned_indices[k]]);
  }
  for (std::size_t k = 0; k < one.clean_indices.size(); ++k) {
    CHECK(one.clean.samples[k] == f.valid.samples[one.clean_indices[k]]);
  }

  const auto empty = detect_batch(TrajectoryDataset{}, f.model);
  CHECK(empty.verdicts.empty());
  CHECK(empty.poisoned.empty());
  CHECK(empty.clean.empty());
}

TEST_CASE("verdict CSV") {
  const auto f = fitted_synthetic();
  const auto sub = f.valid.subset(std::vector<std::size_t>{0, 1});
  const auto r = detect_batch(sub, f.model, 1);
  std::ostringstream os;
  write_verdict_csv(os, r.verdicts, std::vector<bool>{false, true});
  const auto text = os.str();
  CHECK(text.rfind("sample_index,md_raw,ss_raw,md_z,ss_z,fused,is_poisoned,true_poison\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\n1,") != std::string::npos);
  std::ostringstream plain;
  write_verdict_csv(plain, r.verdicts, std::nullopt);
  CHECK(plain.str().rfind("sample_index,md_raw,ss_raw,md_z,ss_z,fused,is_poisoned\n", 0) == 0);
  expect_error([&] { write_verdict_csv(plain, r.verdicts, std::vector<bool>{true}); }, ErrorCode::kInvalidArgument,
               "length mismatch");
}
