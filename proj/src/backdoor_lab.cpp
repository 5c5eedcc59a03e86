#include "dupguard/backdoor_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dupguard/error.hpp"
#include "dupguard/rng.hpp"

namespace dupguard {

void ScenarioSpec::validate() const {
  require(n_clean >= 1, "scenario: n_clean must be positive");
  require(layers >= 2, "scenario: layers must be at least 2");
  require(dim >= 1, "scenario: dim must be positive");
  require(classes >= 2, "scenario: classes must be at least 2");
  require(shift_magnitude >= 0.0 && distortion_magnitude >= 0.0, "scenario: magnitudes must be non-negative");
  for (auto i : shifted_layers) require(i < layers, "scenario: shifted layer " + std::to_string(i) + " out of range");
  for (auto i : noise_layer_indices) require(i < layers, "scenario: noise layer " + std::to_string(i) + " out of range");
  require(layer_noise_std.empty() || layer_noise_std.size() == layers,
          "scenario: layer_noise_std needs one entry per layer");
  for (double s : layer_noise_std) require(s > 0.0, "scenario: layer_noise_std entries must be positive");

  require(input_dim >= 1 && hidden_dim >= 1 && hidden_layers >= 2, "scenario: invalid toy model shape");
  require(blob_separation >= 0.0, "scenario: blob_separation must be non-negative");
  require(classes <= input_dim, "scenario: classes must not exceed input_dim");
  require(target_label < classes, "scenario: target_label " + std::to_string(target_label) + " is not a class");
  require(!trigger_indices.empty(), "scenario: trigger_indices must be non-empty");
  require(trigger_indices.size() == trigger_pattern.size(), "scenario: trigger_pattern and trigger_indices differ in length");
  for (auto i : trigger_indices) require(i < input_dim, "scenario: trigger index " + std::to_string(i) + " out of range");
  require(poison_rate > 0.0 && poison_rate < 1.0, "scenario: poison_rate must lie in (0, 1)");
  require(stream_poison_fraction >= 0.0 && stream_poison_fraction < 1.0,
          "scenario: stream_poison_fraction must lie in [0, 1)");
  require(adaptive_reg_alpha >= 0.0, "scenario: adaptive_reg_alpha must be non-negative");
  require(n_train >= 2 && n_reserve >= 4 && n_stream >= 1 && n_clean_test >= 1 && n_poison_test >= 1,
          "scenario: toy task sizes too small");
}

nlohmann::json ScenarioSpec::to_json() const {
  return {{"n_clean", n_clean},
          {"n_poison", n_poison},
          {"layers", layers},
          {"dim", dim},
          {"classes", classes},
          {"class_separation", class_separation},
          {"shift_magnitude", shift_magnitude},
          {"shifted_layers", shifted_layers},
          {"noise_layer_indices", noise_layer_indices},
          {"layer_noise_std", layer_noise_std},
          {"distortion_magnitude", distortion_magnitude},
          {"input_dim", input_dim},
          {"hidden_dim", hidden_dim},
          {"hidden_layers", hidden_layers},
          {"blob_separation", blob_separation},
          {"trigger_indices", trigger_indices},
          {"trigger_pattern", trigger_pattern},
          {"target_label", target_label},
          {"poison_rate", poison_rate},
          {"adaptive_reg_alpha", adaptive_reg_alpha},
          {"n_train", n_train},
          {"n_reserve", n_reserve},
          {"n_stream", n_stream},
          {"stream_poison_fraction", stream_poison_fraction},
          {"n_clean_test", n_clean_test},
          {"n_poison_test", n_poison_test},
          {"seed", seed}};
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  if (!j.is_object()) fail(ErrorCode::kSchema, "scenario must be a JSON object");
  const auto known = s.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) fail(ErrorCode::kSchema, "scenario: unknown field \"" + key + "\"");
  }
  try {
    s.n_clean = j.value("n_clean", s.n_clean);
    s.n_poison = j.value("n_poison", s.n_poison);
    s.layers = j.value("layers", s.layers);
    s.dim = j.value("dim", s.dim);
    s.classes = j.value("classes", s.classes);
    s.class_separation = j.value("class_separation", s.class_separation);
    s.shift_magnitude = j.value("shift_magnitude", s.shift_magnitude);
    s.shifted_layers = j.value("shifted_layers", s.shifted_layers);
    s.noise_layer_indices = j.value("noise_layer_indices", s.noise_layer_indices);
    s.layer_noise_std = j.value("layer_noise_std", s.layer_noise_std);
    s.distortion_magnitude = j.value("distortion_magnitude", s.distortion_magnitude);
    s.input_dim = j.value("input_dim", s.input_dim);
    s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
    s.hidden_layers = j.value("hidden_layers", s.hidden_layers);
    s.blob_separation = j.value("blob_separation", s.blob_separation);
    s.trigger_indices = j.value("trigger_indices", s.trigger_indices);
    s.trigger_pattern = j.value("trigger_pattern", s.trigger_pattern);
    s.target_label = j.value("target_label", s.target_label);
    s.poison_rate = j.value("poison_rate", s.poison_rate);
    s.adaptive_reg_alpha = j.value("adaptive_reg_alpha", s.adaptive_reg_alpha);
    s.n_train = j.value("n_train", s.n_train);
    s.n_reserve = j.value("n_reserve", s.n_reserve);
    s.n_stream = j.value("n_stream", s.n_stream);
    s.stream_poison_fraction = j.value("stream_poison_fraction", s.stream_poison_fraction);
    s.n_clean_test = j.value("n_clean_test", s.n_clean_test);
    s.n_poison_test = j.value("n_poison_test", s.n_poison_test);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

Eigen::VectorXd random_unit(Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> n01;
  Eigen::VectorXd v(d);
  do {
    for (Eigen::Index i = 0; i < d; ++i) v[i] = n01(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

}  // namespace

TrajectoryDataset gen_synthetic_trajectories(const ScenarioSpec& spec) {
  spec.validate();
  auto rng = make_rng(spec.seed, "backdoor_lab.synthetic");
  std::normal_distribution<double> n01;
  const auto l = static_cast<Eigen::Index>(spec.layers);
  const auto d = static_cast<Eigen::Index>(spec.dim);

  const std::set<std::size_t> noise(spec.noise_layer_indices.begin(), spec.noise_layer_indices.end());
  std::vector<Eigen::VectorXd> shift_dirs(spec.layers);
  for (auto i : spec.shifted_layers) shift_dirs[i] = random_unit(d, rng);
  const Eigen::VectorXd distortion_dir = random_unit(d, rng);

  TrajectoryDataset ds;
  ds.labels.emplace();
  ds.poison_mask.emplace();
  const auto total = spec.n_clean + spec.n_poison;
  for (std::size_t s = 0; s < total; ++s) {
    const bool poisoned = s >= spec.n_clean;
    const auto label = static_cast<std::uint32_t>(s % spec.classes);
    const double offset = spec.class_separation * (static_cast<double>(label) - (static_cast<double>(spec.classes) - 1.0) / 2.0);
    Eigen::MatrixXd h(l, d);
    for (Eigen::Index i = 0; i < l; ++i) {
      const auto layer = static_cast<std::size_t>(i);
      const double sd = spec.layer_noise_std.empty() ? 1.0 : spec.layer_noise_std[layer];
      for (Eigen::Index k = 0; k < d; ++k) h(i, k) = sd * n01(rng);
      if (!noise.contains(layer)) h(i, 0) += offset;
      if (poisoned) {
        if (shift_dirs[layer].size() > 0) h.row(i) += spec.shift_magnitude * shift_dirs[layer].transpose();
        if (spec.distortion_magnitude > 0.0) {
          const double sign = (i % 2 == 0) ? 1.0 : -1.0;
          h.row(i) += 0.5 * spec.distortion_magnitude * sign * distortion_dir.transpose();
        }
      }
    }
    ds.samples.push_back(FeatureTrajectory::from_double(h));
    ds.labels->push_back(label);
    ds.poison_mask->push_back(poisoned);
  }
  return ds;
}

namespace {

nlohmann::json labeled_to_json(const LabeledData& d) {
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(d.x.size()));
  for (Eigen::Index c = 0; c < d.x.cols(); ++c) {
    for (Eigen::Index r = 0; r < d.x.rows(); ++r) rows.push_back(d.x(r, c));
  }
  return {{"n", d.size()}, {"dim", d.x.rows()}, {"x", rows}, {"y", d.y}};
}

LabeledData labeled_from_json(const nlohmann::json& j) {
  const auto n = j.at("n").get<std::size_t>();
  const auto dim = j.at("dim").get<std::size_t>();
  const auto rows = j.at("x").get<std::vector<double>>();
  LabeledData d;
  d.y = j.at("y").get<std::vector<std::uint32_t>>();
  if (rows.size() != n * dim || d.y.size() != n) fail(ErrorCode::kSchema, "labeled data arrays have the wrong length");
  d.x = Eigen::Map<const Eigen::MatrixXd>(rows.data(), static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  if (!d.x.allFinite()) fail(ErrorCode::kSchema, "labeled data contains non-finite values");
  return d;
}

std::vector<bool> bools_from_json(const nlohmann::json& j) {
  std::vector<bool> out;
  for (const auto& v : j) out.push_back(v.get<bool>());
  return out;
}

struct Blobs {
  std::vector<Eigen::VectorXd> means;

  explicit Blobs(const ScenarioSpec& spec) {
    const auto d = static_cast<Eigen::Index>(spec.input_dim);
    const auto c_count = static_cast<Eigen::Index>(spec.classes);
    // Scaled orthonormal vectors form a regular simplex with pairwise
    // distance blob_separation; the frame is random so that class
    // information is spread over all input coordinates.
    auto rng = make_rng(spec.seed, "backdoor_lab.toy.means");
    std::normal_distribution<double> n01;
    Eigen::MatrixXd g(d, c_count);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(d, c_count);
    Eigen::VectorXd centre = Eigen::VectorXd::Zero(d);
    for (Eigen::Index c = 0; c < c_count; ++c) {
      Eigen::VectorXd m = q.col(c) * (spec.blob_separation / std::sqrt(2.0));
      centre += m;
      means.push_back(m);
    }
    centre /= static_cast<double>(spec.classes);
    for (auto& m : means) m -= centre;
  }

  // Labels cycle through `classes` and are then shuffled.
  LabeledData draw(std::size_t n, const std::vector<std::uint32_t>& classes, Rng& rng) const {
    std::normal_distribution<double> n01;
    LabeledData out;
    out.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.y[i] = classes[i % classes.size()];
    std::shuffle(out.y.begin(), out.y.end(), rng);
    const auto d = means.front().size();
    out.x.resize(d, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < d; ++k) out.x(k, static_cast<Eigen::Index>(i)) = n01(rng);
      out.x.col(static_cast<Eigen::Index>(i)) += means[out.y[i]];
    }
    return out;
  }
};

std::vector<std::size_t> pick_non_target(const LabeledData& d, std::uint32_t target, std::size_t count, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.y[i] != target) candidates.push_back(i);
  }
  require(candidates.size() >= count, "not enough non-target samples to poison (" + std::to_string(count) +
                                          " requested, " + std::to_string(candidates.size()) + " available)");
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

}  // namespace

LabeledData ToyTask::clean_train() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (!train_poison[i]) idx.push_back(i);
  }
  return train.subset(idx);
}

nlohmann::json ToyTask::to_json() const {
  return {{"format", "dupguard.toy_task"},
          {"version", 1},
          {"target_label", target_label},
          {"classes", classes},
          {"train", labeled_to_json(train)},
          {"train_poison", train_poison},
          {"reserve", labeled_to_json(reserve)},
          {"stream", labeled_to_json(stream)},
          {"stream_poison", stream_poison},
          {"clean_test", labeled_to_json(clean_test)},
          {"poison_test", labeled_to_json(poison_test)}};
}

ToyTask ToyTask::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "dupguard.toy_task") fail(ErrorCode::kSchema, "not a toy task document");
    ToyTask t;
    t.target_label = j.at("target_label").get<std::uint32_t>();
    t.classes = j.at("classes").get<std::size_t>();
    t.train = labeled_from_json(j.at("train"));
    t.train_poison = bools_from_json(j.at("train_poison"));
    t.reserve = labeled_from_json(j.at("reserve"));
    t.stream = labeled_from_json(j.at("stream"));
    t.stream_poison = bools_from_json(j.at("stream_poison"));
    t.clean_test = labeled_from_json(j.at("clean_test"));
    t.poison_test = labeled_from_json(j.at("poison_test"));
    if (t.train_poison.size() != t.train.size() || t.stream_poison.size() != t.stream.size()) {
      fail(ErrorCode::kSchema, "toy task poison masks have the wrong length");
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("toy task JSON: ") + e.what());
  }
}

Eigen::VectorXd apply_trigger(Eigen::VectorXd x, const ScenarioSpec& spec) {
  require(x.size() == static_cast<Eigen::Index>(spec.input_dim), "apply_trigger: input dim mismatch");
  for (std::size_t k = 0; k < spec.trigger_indices.size(); ++k) {
    x[static_cast<Eigen::Index>(spec.trigger_indices[k])] = spec.trigger_pattern[k];
  }
  return x;
}

ToyTask gen_toy_task(const ScenarioSpec& spec) {
  spec.validate();
  const Blobs blobs(spec);
  std::vector<std::uint32_t> all_classes(spec.classes);
  std::iota(all_classes.begin(), all_classes.end(), 0U);
  std::vector<std::uint32_t> non_target;
  for (auto c : all_classes) {
    if (c != spec.target_label) non_target.push_back(c);
  }

  ToyTask t;
  t.target_label = spec.target_label;
  t.classes = spec.classes;

  auto rng_train = make_rng(spec.seed, "backdoor_lab.toy.train");
  t.train = blobs.draw(spec.n_train, all_classes, rng_train);
  t.train_poison.assign(t.train.size(), false);
  const auto n_poison = static_cast<std::size_t>(std::floor(spec.poison_rate * static_cast<double>(spec.n_train)));
  for (auto i : pick_non_target(t.train, spec.target_label, n_poison, rng_train)) {
    const auto c = static_cast<Eigen::Index>(i);
    t.train.x.col(c) = apply_trigger(t.train.x.col(c), spec);
    t.train.y[i] = spec.target_label;
    t.train_poison[i] = true;
  }

  auto rng_reserve = make_rng(spec.seed, "backdoor_lab.toy.reserve");
  t.reserve = blobs.draw(spec.n_reserve, all_classes, rng_reserve);

  auto rng_stream = make_rng(spec.seed, "backdoor_lab.toy.stream");
  t.stream = blobs.draw(spec.n_stream, all_classes, rng_stream);
  t.stream_poison.assign(t.stream.size(), false);
  const auto n_stream_poison =
      static_cast<std::size_t>(std::floor(spec.stream_poison_fraction * static_cast<double>(spec.n_stream)));
  for (auto i : pick_non_target(t.stream, spec.target_label, n_stream_poison, rng_stream)) {
    const auto c = static_cast<Eigen::Index>(i);
    t.stream.x.col(c) = apply_trigger(t.stream.x.col(c), spec);
    t.stream.y[i] = spec.target_label;
    t.stream_poison[i] = true;
  }

  auto rng_test = make_rng(spec.seed, "backdoor_lab.toy.clean_test");
  t.clean_test = blobs.draw(spec.n_clean_test, all_classes, rng_test);

  auto rng_ptest = make_rng(spec.seed, "backdoor_lab.toy.poison_test");
  t.poison_test = blobs.draw(spec.n_poison_test, non_target, rng_ptest);
  for (Eigen::Index c = 0; c < t.poison_test.x.cols(); ++c) {
    t.poison_test.x.col(c) = apply_trigger(t.poison_test.x.col(c), spec);
  }
  return t;
}

nlohmann::json ImplantReport::to_json() const {
  return {{"pre_attack", pre.to_json()}, {"post_attack", post.to_json()}, {"loss_log", loss_log}, {"reg_log", reg_log}};
}

LossAndGrad feature_reg_gradients(const ToyClassifier& model, const AdapterSet* adapters,
                                  const Eigen::MatrixXd& x_poison, const Eigen::MatrixXd& x_clean, Trainable mode) {
  require(x_poison.cols() > 0 && x_poison.cols() == x_clean.cols(), "feature_reg: paired batches must match in size");
  const auto tp = forward_batch(model, x_poison, adapters);
  const auto tc = forward_batch(model, x_clean, adapters);
  const auto hidden = model.hidden_layers();
  const double inv_m = 1.0 / static_cast<double>(x_poison.cols());

  LossAndGrad out{0.0, Gradients::zeros_like(model, adapters, mode)};
  std::vector<Eigen::MatrixXd> gp(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    const Eigen::MatrixXd diff = tp.hidden[i] - tc.hidden[i];
    gp[i] = Eigen::MatrixXd::Zero(diff.rows(), diff.cols());
    for (Eigen::Index c = 0; c < diff.cols(); ++c) {
      const double norm = diff.col(c).norm();
      out.loss += norm * inv_m;
      if (norm > 0.0) gp[i].col(c) = diff.col(c) * (inv_m / norm);
    }
  }
  const Eigen::MatrixXd zero_logits = Eigen::MatrixXd::Zero(tp.logits.rows(), tp.logits.cols());
  backward(model, adapters, tp, zero_logits, gp, out.grads);
  return out;
}

TrainResult pretrain_clean(const ToyClassifier& model, const ToyTask& task, const TrainConfig& cfg) {
  TrainConfig c = cfg;
  c.seed = derive_seed(cfg.seed, "backdoor_lab.pretrain");
  return train_supervised(model, task.clean_train(), c);
}

ImplantReport implant_backdoor(const ToyClassifier& model, const ToyTask& task, const TrainConfig& cfg,
                               double adaptive_reg_alpha) {
  require(adaptive_reg_alpha >= 0.0, "implant_backdoor: adaptive_reg_alpha must be non-negative");
  cfg.validate();
  model.validate();
  require(task.train.size() > 0, "implant_backdoor: empty training set");

  ImplantReport report;
  report.pre = eval_attack(model, task.clean_test, task.poison_test, task.target_label);

  std::vector<std::size_t> target_pool;
  for (std::size_t i = 0; i < task.train.size(); ++i) {
    if (!task.train_poison[i] && task.train.y[i] == task.target_label) target_pool.push_back(i);
  }
  const bool regularize = adaptive_reg_alpha > 0.0;
  require(!regularize || !target_pool.empty(), "implant_backdoor: no clean target-class samples to pair with");

  ToyClassifier m = model;
  auto rng = make_rng(cfg.seed, "backdoor_lab.implant");
  std::uniform_int_distribution<std::size_t> pick(0, target_pool.empty() ? 0 : target_pool.size() - 1);
  Optimizer opt(cfg);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double reg_sum = 0.0;
    const auto batches = make_batches(task.train.size(), cfg.batch_size, rng);
    for (const auto& idx : batches) {
      auto lg = ce_gradients(m, nullptr, task.train.subset(idx), Trainable::kAll);
      double loss = lg.loss;
      if (regularize) {
        std::vector<std::size_t> poisoned;
        for (auto i : idx) {
          if (task.train_poison[i]) poisoned.push_back(i);
        }
        if (!poisoned.empty()) {
          std::vector<std::size_t> partners(poisoned.size());
          for (auto& p : partners) p = target_pool[pick(rng)];
          auto reg = feature_reg_gradients(m, nullptr, task.train.subset(poisoned).x, task.train.subset(partners).x,
                                           Trainable::kAll);
          reg.grads *= adaptive_reg_alpha;
          lg.grads += reg.grads;
          loss += adaptive_reg_alpha * reg.loss;
          reg_sum += reg.loss;
        }
      }
      loss_sum += loss;
      opt.step(parameter_views(m, nullptr, Trainable::kAll), gradient_views(lg.grads));
    }
    report.loss_log.push_back(loss_sum / static_cast<double>(batches.size()));
    if (regularize) report.reg_log.push_back(reg_sum / static_cast<double>(batches.size()));
  }
  report.post = eval_attack(m, task.clean_test, task.poison_test, task.target_label);
  report.model = std::move(m);
  return report;
}

AttackMetrics eval_attack(const ToyClassifier& model, const LabeledData& clean_test, const LabeledData& poison_test,
                          std::uint32_t target_label, const AdapterSet* adapters) {
  require(clean_test.size() > 0 && poison_test.size() > 0, "eval_attack: empty test set");
  const auto clean_pred = predict(model, clean_test.x, adapters);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> clean;
  for (std::size_t i = 0; i < clean_pred.size(); ++i) clean.emplace_back(clean_pred[i], clean_test.y[i]);

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < poison_test.size(); ++i) {
    if (poison_test.y[i] != target_label) keep.push_back(i);
  }
  require(!keep.empty(), "eval_attack: poison test set has no non-target samples");
  const auto poison_pred = predict(model, poison_test.subset(keep).x, adapters);
  return cacc_asr(clean, poison_pred, target_label);
}

TrajectoryDataset extract_trajectories(const ToyClassifier& model, const Eigen::MatrixXd& inputs,
                                       std::optional<std::vector<bool>> poison_mask,
                                       std::optional<std::vector<std::uint32_t>> labels, const AdapterSet* adapters) {
  const auto n = static_cast<std::size_t>(inputs.cols());
  require(!poison_mask || poison_mask->size() == n, "extract_trajectories: poison mask length mismatch");
  require(!labels || labels->size() == n, "extract_trajectories: label count mismatch");
  TrajectoryDataset ds;
  ds.samples.reserve(n);
  const auto l = static_cast<Eigen::Index>(model.hidden_layers());
  const auto d = static_cast<Eigen::Index>(model.hidden_dim());
  constexpr Eigen::Index kChunk = 256;
  for (Eigen::Index start = 0; start < inputs.cols(); start += kChunk) {
    const auto len = std::min(kChunk, inputs.cols() - start);
    const auto t = forward_batch(model, inputs.middleCols(start, len), adapters);
    for (Eigen::Index c = 0; c < len; ++c) {
      Eigen::MatrixXd h(l, d);
      for (Eigen::Index i = 0; i < l; ++i) h.row(i) = t.hidden[static_cast<std::size_t>(i)].col(c).transpose();
      ds.samples.push_back(FeatureTrajectory::from_double(h));
    }
  }
  ds.labels = std::move(labels);
  ds.poison_mask = std::move(poison_mask);
  return ds;
}

std::vector<double> mean_feature_distance(const ToyClassifier& model, const Eigen::MatrixXd& x_poison,
                                          const Eigen::MatrixXd& x_clean) {
  require(x_poison.cols() > 0 && x_clean.cols() > 0, "mean_feature_distance: empty input");
  const auto tp = forward_batch(model, x_poison);
  const auto tc = forward_batch(model, x_clean);
  std::vector<double> out;
  for (std::size_t i = 0; i < tp.hidden.size(); ++i) {
    out.push_back((tp.hidden[i].rowwise().mean() - tc.hidden[i].rowwise().mean()).norm());
  }
  return out;
}

}  // namespace dupguard
