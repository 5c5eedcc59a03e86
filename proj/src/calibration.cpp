#include "dupguard/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dupguard/error.hpp"
#include "dupguard/scoring.hpp"

namespace dupguard {

std::string to_string(Aggregate mode) {
  return mode == Aggregate::kMean ? "mean" : "max";
}

Aggregate aggregate_from_string(const std::string& name) {
  if (name == "mean") return Aggregate::kMean;
  if (name == "max") return Aggregate::kMax;
  fail(ErrorCode::kSchema, "aggregate must be \"mean\" or \"max\", got \"" + name + "\"");
}

void DetectorConfig::validate(std::size_t layers) const {
  require(k >= 1, "k must be positive");
  require(k <= layers, "k must not exceed the number of layers (" + std::to_string(layers) + ")");
  require(shrinkage_gamma >= 0.0 && shrinkage_gamma <= 1.0, "shrinkage_gamma must lie in [0, 1]");
  require(fusion_alpha >= 0.0 && fusion_alpha <= 1.0, "fusion_alpha must lie in [0, 1]");
  require(target_frr > 0.0 && target_frr <= 0.5, "target_frr must lie in (0, 0.5]");
  require(jitter > 0.0, "jitter must be positive");
  require(singular_value_rel_tol >= 0.0 && singular_value_rel_tol < 1.0,
          "singular_value_rel_tol must lie in [0, 1)");
}

double ch_score(const Eigen::MatrixXd& features, std::span<const std::uint32_t> labels) {
  const auto n = static_cast<std::size_t>(features.rows());
  require(labels.size() == n, "ch_score: one label per sample required");

  std::map<std::uint32_t, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
  const auto c = groups.size();
  require(c >= 2, "ch_score: need at least 2 classes");
  require(n > c, "ch_score: need more samples than classes");

  const Eigen::RowVectorXd overall = features.colwise().mean();
  double between = 0.0;
  double within = 0.0;
  for (const auto& [label, rows] : groups) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(features.cols());
    for (auto r : rows) mean += features.row(r);
    mean /= static_cast<double>(rows.size());
    between += static_cast<double>(rows.size()) * (mean - overall).squaredNorm();
    for (auto r : rows) within += (features.row(r) - mean).squaredNorm();
  }
  if (within == 0.0) return between == 0.0 ? 0.0 : kChSentinel;
  return (between / static_cast<double>(c - 1)) / (within / static_cast<double>(n - c));
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  require(k >= 1 && k <= scores.size(), "select_top_k: k out of range");
  for (double s : scores) require(!std::isnan(s), "select_top_k: NaN score");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

Eigen::VectorXd fit_centroid(const Eigen::MatrixXd& features) {
  require(features.rows() >= 1, "fit_centroid: empty input");
  return features.colwise().mean().transpose();
}

namespace {

struct Factored {
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd factor;
};

bool try_cholesky(const Eigen::MatrixXd& m, Eigen::MatrixXd& factor) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) return false;
  factor = llt.matrixL();
  const auto diag = factor.diagonal();
  return diag.allFinite() && (diag.array() > 0.0).all();
}

Factored factor_shrunk(const Eigen::MatrixXd& features, double gamma, double jitter) {
  require(features.rows() >= 2, "fit_shrunk_covariance: need at least 2 samples");
  require(gamma >= 0.0 && gamma <= 1.0, "fit_shrunk_covariance: gamma must lie in [0, 1]");
  require(jitter > 0.0, "fit_shrunk_covariance: jitter must be positive");
  const auto n = static_cast<double>(features.rows());
  const auto d = features.cols();

  const Eigen::RowVectorXd mean = features.colwise().mean();
  const Eigen::MatrixXd centered = features.rowwise() - mean;
  const Eigen::MatrixXd sample = (centered.transpose() * centered) / n;
  const double scale = sample.trace() / static_cast<double>(d);

  Factored out;
  out.covariance = (1.0 - gamma) * sample;
  out.covariance.diagonal().array() += gamma * scale;
  if (try_cholesky(out.covariance, out.factor)) return out;

  const Eigen::MatrixXd base = out.covariance;
  double eps = jitter;
  for (int attempt = 0; attempt < 4; ++attempt, eps *= 10.0) {
    out.covariance = base;
    out.covariance.diagonal().array() += eps;
    if (try_cholesky(out.covariance, out.factor)) return out;
  }
  fail(ErrorCode::kNumerical, "shrunk covariance is not positive definite even after jitter escalation");
}

}  // namespace

Eigen::MatrixXd fit_shrunk_covariance(const Eigen::MatrixXd& features, double gamma, double jitter) {
  return factor_shrunk(features, gamma, jitter).factor;
}

Eigen::MatrixXd shrunk_covariance(const Eigen::MatrixXd& features, double gamma, double jitter) {
  return factor_shrunk(features, gamma, jitter).covariance;
}

namespace {

ScoreStats moments(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / n)};
}

}  // namespace

DetectorModel fit_detector(const TrajectoryDataset& calib, const TrajectoryDataset& valid,
                           const DetectorConfig& cfg) {
  require(!calib.empty(), "fit_detector: empty calibration set");
  require(!valid.empty(), "fit_detector: empty validation set");
  calib.validate();
  valid.validate();
  require(calib.labels.has_value(), "fit_detector: calibration set must carry labels");
  require(calib.layers() == valid.layers() && calib.dim() == valid.dim(),
          "fit_detector: calibration and validation shapes differ");
  const auto layers = calib.layers();
  cfg.validate(layers);

  DetectorModel model;
  model.layers = layers;
  model.dim = calib.dim();
  model.aggregate = cfg.aggregate;
  model.fusion_alpha = cfg.fusion_alpha;
  model.target_frr = cfg.target_frr;
  model.config = cfg;

  std::vector<Eigen::MatrixXd> features(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    features[i] = calib.layer_features(i);
    model.ch_scores.push_back(ch_score(features[i], *calib.labels));
  }
  model.selected_layers = select_top_k(model.ch_scores, cfg.k);
  for (auto i : model.selected_layers) {
    model.per_layer.push_back(LayerStats{
        i, fit_centroid(features[i]), fit_shrunk_covariance(features[i], cfg.shrinkage_gamma, cfg.jitter)});
  }

  std::vector<double> md_raw;
  std::vector<double> ss_raw;
  for (const auto& s : calib.samples) {
    md_raw.push_back(md_score(s, model).raw);
    ss_raw.push_back(ss_score(s, cfg.singular_value_rel_tol));
  }
  model.md_stats = moments(md_raw);
  model.ss_stats = moments(ss_raw);
  if (!(model.md_stats.stddev > 0.0) || !(model.ss_stats.stddev > 0.0)) {
    fail(ErrorCode::kNumerical, "degenerate calibration set: zero score spread");
  }

  std::vector<double> fused;
  fused.reserve(valid.size());
  for (const auto& s : valid.samples) fused.push_back(score_breakdown(s, model).fused);
  model.threshold = calibrate_threshold(fused, cfg.target_frr);
  return model;
}

nlohmann::json DetectorModel::to_json() const {
  using nlohmann::json;
  json layers_json = json::array();
  for (const auto& ls : per_layer) {
    std::vector<double> tri;
    for (Eigen::Index r = 0; r < ls.covariance_factor.rows(); ++r) {
      for (Eigen::Index c = 0; c <= r; ++c) tri.push_back(ls.covariance_factor(r, c));
    }
    json entry;
    entry["layer"] = ls.layer_index;
    entry["centroid"] = std::vector<double>(ls.centroid.data(), ls.centroid.data() + ls.centroid.size());
    entry["covariance_factor"] = tri;
    layers_json.push_back(std::move(entry));
  }
  json j;
  j["format"] = "dupguard.detector";
  j["version"] = 1;
  j["layers"] = layers;
  j["dim"] = dim;
  j["selected_layers"] = selected_layers;
  j["ch_scores"] = ch_scores;
  j["aggregate"] = to_string(aggregate);
  j["md_stats"] = {{"mean", md_stats.mean}, {"stddev", md_stats.stddev}};
  j["ss_stats"] = {{"mean", ss_stats.mean}, {"stddev", ss_stats.stddev}};
  j["fusion_alpha"] = fusion_alpha;
  j["threshold"] = threshold;
  j["target_frr"] = target_frr;
  j["per_layer"] = std::move(layers_json);
  j["config"] = {{"k", config.k},
                 {"aggregate", to_string(config.aggregate)},
                 {"shrinkage_gamma", config.shrinkage_gamma},
                 {"fusion_alpha", config.fusion_alpha},
                 {"target_frr", config.target_frr},
                 {"jitter", config.jitter},
                 {"singular_value_rel_tol", config.singular_value_rel_tol}};
  return j;
}

DetectorModel DetectorModel::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "dupguard.detector") {
      fail(ErrorCode::kSchema, "not a detector document");
    }
    DetectorModel m;
    m.layers = j.at("layers").get<std::size_t>();
    m.dim = j.at("dim").get<std::size_t>();
    m.selected_layers = j.at("selected_layers").get<std::vector<std::size_t>>();
    m.ch_scores = j.at("ch_scores").get<std::vector<double>>();
    m.aggregate = aggregate_from_string(j.at("aggregate").get<std::string>());
    m.md_stats = {j.at("md_stats").at("mean").get<double>(), j.at("md_stats").at("stddev").get<double>()};
    m.ss_stats = {j.at("ss_stats").at("mean").get<double>(), j.at("ss_stats").at("stddev").get<double>()};
    m.fusion_alpha = j.at("fusion_alpha").get<double>();
    m.threshold = j.at("threshold").get<double>();
    m.target_frr = j.at("target_frr").get<double>();
    const auto& c = j.at("config");
    m.config.k = c.at("k").get<std::size_t>();
    m.config.aggregate = aggregate_from_string(c.at("aggregate").get<std::string>());
    m.config.shrinkage_gamma = c.at("shrinkage_gamma").get<double>();
    m.config.fusion_alpha = c.at("fusion_alpha").get<double>();
    m.config.target_frr = c.at("target_frr").get<double>();
    m.config.jitter = c.at("jitter").get<double>();
    m.config.singular_value_rel_tol = c.at("singular_value_rel_tol").get<double>();

    const auto d = static_cast<Eigen::Index>(m.dim);
    for (const auto& entry : j.at("per_layer")) {
      LayerStats ls;
      ls.layer_index = entry.at("layer").get<std::size_t>();
      const auto centroid = entry.at("centroid").get<std::vector<double>>();
      const auto tri = entry.at("covariance_factor").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(centroid.size()) != d ||
          static_cast<Eigen::Index>(tri.size()) != d * (d + 1) / 2) {
        fail(ErrorCode::kSchema, "detector layer arrays do not match dim");
      }
      ls.centroid = Eigen::Map<const Eigen::VectorXd>(centroid.data(), d);
      ls.covariance_factor = Eigen::MatrixXd::Zero(d, d);
      std::size_t t = 0;
      for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index col = 0; col <= r; ++col) ls.covariance_factor(r, col) = tri[t++];
      }
      if (!(ls.covariance_factor.diagonal().array() > 0.0).all()) {
        fail(ErrorCode::kSchema, "covariance factor must have a positive diagonal");
      }
      m.per_layer.push_back(std::move(ls));
    }
    if (m.per_layer.size() != m.selected_layers.size()) {
      fail(ErrorCode::kSchema, "per_layer entries must match selected_layers");
    }
    for (std::size_t i = 0; i < m.selected_layers.size(); ++i) {
      if (m.selected_layers[i] >= m.layers || m.per_layer[i].layer_index != m.selected_layers[i]) {
        fail(ErrorCode::kSchema, "inconsistent selected layer indices");
      }
    }
    if (!(m.md_stats.stddev > 0.0) || !(m.ss_stats.stddev > 0.0)) {
      fail(ErrorCode::kSchema, "score standard deviations must be positive");
    }
    if (!(m.fusion_alpha >= 0.0 && m.fusion_alpha <= 1.0)) fail(ErrorCode::kSchema, "fusion_alpha out of range");
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("detector JSON: ") + e.what());
  }
}

}  // namespace dupguard
