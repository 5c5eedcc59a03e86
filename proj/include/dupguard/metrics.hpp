#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dupguard/scoring.hpp"
#include "json.hpp"

namespace dupguard {

/// FRR is the fraction of clean samples flagged; FAR the fraction of
/// poisoned samples let through. A rate is absent when its side is empty.
struct DetectionMetrics {
  double auc = 0.0;
  std::optional<double> far;
  std::optional<double> frr;

  nlohmann::json to_json() const;
};

struct AttackMetrics {
  double cacc = 0.0;
  double asr = 0.0;

  nlohmann::json to_json() const;
};

/// P(poison > clean) + P(poison == clean) / 2 over all pairs.
double auc(std::span<const double> clean_scores, std::span<const double> poison_scores);

struct FarFrr {
  std::optional<double> far;
  std::optional<double> frr;
};

FarFrr far_frr(std::span<const Verdict> verdicts, const std::vector<bool>& true_poison);

/// AUC from the fused scores plus FAR/FRR from the verdicts.
DetectionMetrics detection_metrics(std::span<const Verdict> verdicts, const std::vector<bool>& true_poison);

/// `clean` holds (prediction, label) pairs; `poison_preds` must come from
/// samples whose true label differs from the target.
AttackMetrics cacc_asr(std::span<const std::pair<std::uint32_t, std::uint32_t>> clean,
                       std::span<const std::uint32_t> poison_preds, std::uint32_t target_label);

/// Rounds to 6 decimal places for reports.
double round6(double x);

}  // namespace dupguard
