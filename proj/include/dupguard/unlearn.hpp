#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "dupguard/metrics.hpp"
#include "dupguard/toy_model.hpp"
#include "json.hpp"

namespace dupguard {

struct UnlearnConfig {
  double lambda_asr = 1.0;
  double lambda_acc = 1.0;
  /// Per-sample clamp on the unlearning KL, in nats.
  double kl_cap = 10.0;
  TrainConfig train{};
  AdapterConfig adapter{};
  /// Stop once (from epoch 2 on) the unlearning loss is saturated at the cap
  /// and the preservation loss is within 5% of its first-epoch value. A term
  /// whose lambda is zero places no condition.
  bool early_stop = true;

  void validate() const;
  nlohmann::json to_json() const;
  static UnlearnConfig from_json(const nlohmann::json& j);
};

struct EpochLosses {
  double unlearn = 0.0;
  double preserve = 0.0;
  double total = 0.0;
};

struct PurifyReport {
  ToyClassifier student_base;
  AdapterSet adapters;
  std::vector<EpochLosses> epochs;
  bool stopped_early = false;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
  std::uint64_t base_checksum_before = 0;
  std::uint64_t base_checksum_after = 0;
  std::uint64_t adapter_checksum_initial = 0;
  std::uint64_t adapter_checksum_final = 0;
  std::optional<AttackMetrics> pre;
  std::optional<AttackMetrics> post;

  nlohmann::json to_json() const;
};

struct UnlearnStep {
  double l_unlearn = 0.0;
  double l_preserve = 0.0;
  double l_total = 0.0;
  Gradients grads;
};

/// L_total = -lambda_asr * L_unlearn + lambda_acc * L_preserve with gradients
/// for the adapters only. Either batch may be empty when its lambda is zero.
UnlearnStep unlearn_step(const ToyClassifier& teacher, const ToyClassifier& student_base, const AdapterSet& adapters,
                         const Eigen::MatrixXd& batch_p, const LabeledData& batch_c, const UnlearnConfig& cfg);

struct EvalSets {
  const LabeledData* clean_test = nullptr;
  const LabeledData* poison_test = nullptr;
  std::uint32_t target_label = 0;
};

/// Copies the teacher into a student, attaches adapters and minimizes
/// L_total over paired (poisoned, clean) batches.
PurifyReport purify(const ToyClassifier& teacher, const Eigen::MatrixXd& d_p, const LabeledData& d_c,
                    const UnlearnConfig& cfg, std::optional<EvalSets> eval = std::nullopt);

/// Folds scale * B * A into the base weights.
ToyClassifier merge_adapters(const ToyClassifier& base, const AdapterSet& adapters);

}  // namespace dupguard
