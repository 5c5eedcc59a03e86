#include <cmath>

#include "doctest.h"
#include "dupguard/backdoor_lab.hpp"
#include "dupguard/pipeline.hpp"
#include "test_helpers.hpp"

using namespace dupguard;
using testutil::expect_error;

namespace {

// Mean of the given layer over samples with poison flag == `poisoned`.
Eigen::VectorXd layer_mean(const TrajectoryDataset& ds, std::size_t layer, bool poisoned) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds.dim()));
  double n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if ((*ds.poison_mask)[i] == poisoned) {
      sum += ds.samples[i].layer(layer);
      n += 1;
    }
  }
  return sum / n;
}

ScenarioSpec trajectory_spec(double shift) {
  ScenarioSpec s;
  s.n_clean = 1000;
  s.n_poison = 1000;
  s.dim = 16;
  s.shift_magnitude = shift;
  s.seed = 77;
  return s;
}

// Teacher models shared by the implantation tests.
struct Implanted {
  ExperimentConfig cfg;
  ToyTask task;
  ToyClassifier pretrained;
  ImplantReport plain;
};

const Implanted& implanted() {
  static const Implanted x = [] {
    Implanted r;
    r.task = gen_toy_task(r.cfg.scenario);
    r.pretrained = pretrain_clean(init_model(r.cfg.model_dims(), r.cfg.model_seed()), r.task, r.cfg.pretrain).model;
    r.plain = implant_backdoor(r.pretrained, r.task, r.cfg.attack, 0.0);
    return r;
  }();
  return x;
}

Eigen::MatrixXd target_clean_inputs(const ToyTask& t) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < t.clean_test.size(); ++i) {
    if (t.clean_test.y[i] == t.target_label) idx.push_back(i);
  }
  return t.clean_test.subset(idx).x;
}

}  // namespace

TEST_CASE("zero shift leaves poisoned and clean marginals alike") {
  const auto ds = gen_synthetic_trajectories(trajectory_spec(0.0));
  CHECK(ds.size() == 2000);
  for (std::size_t l = 0; l < ds.layers(); ++l) {
    CHECK((layer_mean(ds, l, true) - layer_mean(ds, l, false)).cwiseAbs().maxCoeff() <= 0.2);
  }
}

TEST_CASE("planted shift appears in the last three layers only") {
  const auto ds = gen_synthetic_trajectories(trajectory_spec(4.0));
  for (std::size_t l = 0; l < 8; ++l) {
    const double gap = (layer_mean(ds, l, true) - layer_mean(ds, l, false)).norm();
    if (l >= 5) {
      CHECK(gap == doctest::Approx(4.0).epsilon(0.15 / 4.0));
    } else {
      CHECK(gap <= 0.3);
    }
  }
  CHECK(gen_synthetic_trajectories(trajectory_spec(4.0)) == ds);

  auto bad = trajectory_spec(4.0);
  bad.n_clean = 0;
  expect_error([&] { gen_synthetic_trajectories(bad); }, ErrorCode::kInvalidArgument, "n_clean");
  bad = trajectory_spec(4.0);
  bad.shifted_layers = {8};
  expect_error([&] { gen_synthetic_trajectories(bad); }, ErrorCode::kInvalidArgument, "out of range");
}

TEST_CASE("class offset lives only in informative layers") {
  auto s = trajectory_spec(0.0);
  s.n_poison = 0;
  const auto ds = gen_synthetic_trajectories(s);
  auto class_gap = [&](std::size_t layer) {
    Eigen::VectorXd m0 = Eigen::VectorXd::Zero(16), m1 = Eigen::VectorXd::Zero(16);
    for (std::size_t i = 0; i < ds.size(); ++i) ((*ds.labels)[i] == 0 ? m0 : m1) += ds.samples[i].layer(layer);
    return ((m1 - m0) / 500.0)(0);
  };
  CHECK(std::abs(class_gap(0)) <= 0.2);
  CHECK(class_gap(6) == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("toy task poisoning protocol") {
  const ScenarioSpec spec;
  const auto t = gen_toy_task(spec);
  CHECK(t.train.size() == 1000);
  std::size_t poisoned = 0;
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    if (t.train_poison[i]) {
      ++poisoned;
      CHECK(t.train.y[i] == spec.target_label);
      for (std::size_t k = 0; k < spec.trigger_indices.size(); ++k) {
        CHECK(t.train.x(static_cast<Eigen::Index>(spec.trigger_indices[k]), static_cast<Eigen::Index>(i)) ==
              spec.trigger_pattern[k]);
      }
    }
  }
  CHECK(poisoned == 200);
  for (auto y : t.poison_test.y) CHECK(y != spec.target_label);
  std::size_t stream_poisoned = 0;
  for (std::size_t i = 0; i < t.stream.size(); ++i) {
    if (t.stream_poison[i]) {
      ++stream_poisoned;
      CHECK(t.stream.y[i] == spec.target_label);
    }
  }
  CHECK(stream_poisoned == 200);

  const Eigen::VectorXd x = t.clean_test.x.col(0);
  const auto triggered = apply_trigger(x, spec);
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const bool on_trigger = std::find(spec.trigger_indices.begin(), spec.trigger_indices.end(),
                                      static_cast<std::size_t>(k)) != spec.trigger_indices.end();
    if (!on_trigger) CHECK(triggered(k) == x(k));
  }

  const auto back = ToyTask::from_json(nlohmann::json::parse(t.to_json().dump()));
  CHECK(back.train.x == t.train.x);
  CHECK(back.stream_poison == t.stream_poison);
  CHECK(back.poison_test.y == t.poison_test.y);
}

TEST_CASE("scenario JSON round trip and validation") {
  ScenarioSpec s;
  s.shift_magnitude = 2.5;
  s.layer_noise_std = std::vector<double>(8, 1.5);
  const auto back = ScenarioSpec::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());
  auto j = s.to_json();
  j["bogus"] = 1;
  expect_error([&] { ScenarioSpec::from_json(j); }, ErrorCode::kSchema, "bogus");
  ScenarioSpec bad;
  bad.poison_rate = 1.0;
  expect_error([&] { bad.validate(); }, ErrorCode::kInvalidArgument, "poison_rate");
  bad = ScenarioSpec{};
  bad.target_label = 2;
  expect_error([&] { bad.validate(); }, ErrorCode::kInvalidArgument, "target_label");
}

TEST_CASE("eval_attack on constructed models") {
  const auto& x = implanted();
  const auto random = init_model(x.cfg.model_dims(), 99);
  const auto r = eval_attack(random, x.task.clean_test, x.task.poison_test, 0);
  CHECK(r.cacc == doctest::Approx(0.5).epsilon(0.2));

  // Output layer hard-wired to the target.
  auto wired = random;
  wired.layers.back().weight.setZero();
  wired.layers.back().bias << 50.0, 0.0;
  const auto w = eval_attack(wired, x.task.clean_test, x.task.poison_test, 0);
  CHECK(w.asr == 1.0);
  CHECK(w.cacc == doctest::Approx(0.5).epsilon(0.1));

  // Clean-trained model: accurate, trigger has little effect.
  const auto clean = eval_attack(x.pretrained, x.task.clean_test, x.task.poison_test, 0);
  CHECK(clean.cacc >= 0.97);
  CHECK(clean.asr <= 0.2);
}

TEST_CASE("implantation without the regularizer") {
  const auto& x = implanted();
  CHECK(x.plain.post.asr >= 0.95);
  CHECK(x.plain.post.cacc >= 0.90);
  CHECK(x.plain.post.asr > x.plain.pre.asr);
  CHECK(x.plain.loss_log.size() == x.cfg.attack.epochs);
  CHECK(x.plain.reg_log.empty());
  const auto j = x.plain.to_json();
  CHECK(j.contains("pre_attack"));
  CHECK(j.at("post_attack").contains("asr"));
  expect_error([&] { implant_backdoor(x.pretrained, x.task, x.cfg.attack, -1.0); }, ErrorCode::kInvalidArgument,
               "adaptive_reg_alpha");
}

TEST_CASE("adaptive regularizer pulls poisoned features toward the target class") {
  const auto& x = implanted();
  const auto adaptive = implant_backdoor(x.pretrained, x.task, x.cfg.attack, 250.0);
  CHECK(adaptive.reg_log.size() == x.cfg.attack.epochs);
  const auto target = target_clean_inputs(x.task);
  const auto d0 = mean_feature_distance(x.plain.model, x.task.poison_test.x, target);
  const auto d1 = mean_feature_distance(adaptive.model, x.task.poison_test.x, target);
  REQUIRE(d0.size() == d1.size());
  for (std::size_t i = 0; i < d0.size(); ++i) CHECK(d1[i] < d0[i]);
}

TEST_CASE("feature regularizer is non-negative and zero on identical pairs") {
  const auto& x = implanted();
  const Eigen::MatrixXd xs = x.task.clean_test.x.leftCols(8);
  const auto same = feature_reg_gradients(x.plain.model, nullptr, xs, xs, Trainable::kAll);
  CHECK(same.loss == 0.0);
  CHECK(same.grads.flatten().isZero(0.0));
  const auto diff = feature_reg_gradients(x.plain.model, nullptr, xs, x.task.clean_test.x.middleCols(8, 8),
                                          Trainable::kAll);
  CHECK(diff.loss > 0.0);
}

TEST_CASE("extract_trajectories matches per-sample forward") {
  const auto& x = implanted();
  const Eigen::MatrixXd inputs = x.task.stream.x.leftCols(300);
  const auto ds = extract_trajectories(x.plain.model, inputs, std::nullopt, std::nullopt);
  CHECK(ds.size() == 300);
  CHECK(ds.layers() == x.plain.model.hidden_layers());
  for (Eigen::Index c : {0, 150, 299}) {
    CHECK(ds.samples[static_cast<std::size_t>(c)] == forward(x.plain.model, inputs.col(c)).trajectory);
  }
}
