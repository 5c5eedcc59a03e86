#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "dupguard/feature_store.hpp"
#include "dupguard/metrics.hpp"
#include "dupguard/toy_model.hpp"
#include "json.hpp"

namespace dupguard {

struct ScenarioSpec {
  // Synthetic trajectories.
  std::size_t n_clean = 500;
  std::size_t n_poison = 500;
  std::size_t layers = 8;
  std::size_t dim = 32;
  std::size_t classes = 2;
  double class_separation = 2.0;
  double shift_magnitude = 4.0;
  std::vector<std::size_t> shifted_layers{5, 6, 7};
  std::vector<std::size_t> noise_layer_indices{0, 1, 2, 3, 4};
  /// Per-layer noise standard deviation; empty means 1 everywhere.
  std::vector<double> layer_noise_std;
  /// Poisoned samples get f_i += (m / 2) (-1)^i v for one shared unit v,
  /// a rank-1 distortion of the inter-layer differences.
  double distortion_magnitude = 0.0;

  // Toy classification task.
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 24;
  std::size_t hidden_layers = 6;
  double blob_separation = 5.0;
  std::vector<std::size_t> trigger_indices{3, 11, 27};
  std::vector<double> trigger_pattern{5.0, 5.0, 5.0};
  std::uint32_t target_label = 0;
  double poison_rate = 0.2;
  double adaptive_reg_alpha = 0.0;
  std::size_t n_train = 1000;
  std::size_t n_reserve = 400;
  std::size_t n_stream = 1000;
  double stream_poison_fraction = 0.2;
  std::size_t n_clean_test = 2000;
  std::size_t n_poison_test = 1000;

  std::uint64_t seed = 2025;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ScenarioSpec from_json(const nlohmann::json& j);
};

/// Clean samples first (n_clean), then poisoned ones (n_poison); labels and
/// poison mask are always present.
TrajectoryDataset gen_synthetic_trajectories(const ScenarioSpec& spec);

struct ToyTask {
  LabeledData train;                 // poisoned rows relabeled to the target
  std::vector<bool> train_poison;
  LabeledData reserve;               // clean, for detector calibration
  LabeledData stream;                // mixed stream; poisoned rows carry the attacker label
  std::vector<bool> stream_poison;
  LabeledData clean_test;
  LabeledData poison_test;           // triggered, true (non-target) labels
  std::uint32_t target_label = 0;
  std::size_t classes = 2;

  /// Clean rows of the training set.
  LabeledData clean_train() const;
  nlohmann::json to_json() const;
  static ToyTask from_json(const nlohmann::json& j);
};

Eigen::VectorXd apply_trigger(Eigen::VectorXd x, const ScenarioSpec& spec);

ToyTask gen_toy_task(const ScenarioSpec& spec);

struct ImplantReport {
  ToyClassifier model;
  AttackMetrics pre;
  AttackMetrics post;
  std::vector<double> loss_log;
  std::vector<double> reg_log;

  nlohmann::json to_json() const;
};

/// Sum over hidden layers of ||h_i(p) - h_i(c)||, averaged over the column
/// pairs of `x_poison` and `x_clean`. The clean features act as fixed
/// targets: the gradient pulls only the poisoned features.
LossAndGrad feature_reg_gradients(const ToyClassifier& model, const AdapterSet* adapters,
                                  const Eigen::MatrixXd& x_poison, const Eigen::MatrixXd& x_clean, Trainable mode);

/// Supervised training on the clean rows of the training set.
TrainResult pretrain_clean(const ToyClassifier& model, const ToyTask& task, const TrainConfig& cfg);

/// Fine-tunes every parameter on the poisoned training set. With
/// adaptive_reg_alpha > 0 the poisoned rows of each batch are paired with
/// target-class clean rows drawn with replacement and alpha * L_reg is added.
ImplantReport implant_backdoor(const ToyClassifier& model, const ToyTask& task, const TrainConfig& cfg,
                               double adaptive_reg_alpha);

/// CACC on clean_test; ASR on the rows of poison_test whose label is not the
/// target.
AttackMetrics eval_attack(const ToyClassifier& model, const LabeledData& clean_test, const LabeledData& poison_test,
                          std::uint32_t target_label, const AdapterSet* adapters = nullptr);

TrajectoryDataset extract_trajectories(const ToyClassifier& model, const Eigen::MatrixXd& inputs,
                                       std::optional<std::vector<bool>> poison_mask,
                                       std::optional<std::vector<std::uint32_t>> labels,
                                       const AdapterSet* adapters = nullptr);

/// Per hidden layer, the distance between the mean feature of `x_poison` and
/// the mean feature of `x_clean`.
std::vector<double> mean_feature_distance(const ToyClassifier& model, const Eigen::MatrixXd& x_poison,
                                          const Eigen::MatrixXd& x_clean);

}  // namespace dupguard
