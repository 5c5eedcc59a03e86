#include "dupguard/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dupguard/error.hpp"

namespace dupguard {

double round6(double x) { return std::round(x * 1e6) / 1e6; }

nlohmann::json DetectionMetrics::to_json() const {
  nlohmann::json j;
  j["auc"] = round6(auc);
  j["far"] = far ? nlohmann::json(round6(*far)) : nlohmann::json(nullptr);
  j["frr"] = frr ? nlohmann::json(round6(*frr)) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json AttackMetrics::to_json() const { return {{"cacc", round6(cacc)}, {"asr", round6(asr)}}; }

double auc(std::span<const double> clean_scores, std::span<const double> poison_scores) {
  require(!clean_scores.empty() && !poison_scores.empty(), "auc: both score sets must be non-empty");
  // Rank-sum form: sort the clean scores once, then count for each poison
  // score the clean scores strictly below and equal to it.
  std::vector<double> clean(clean_scores.begin(), clean_scores.end());
  std::sort(clean.begin(), clean.end());
  // Twice the Mann-Whitney U, kept integral so ties stay exact.
  std::uint64_t twice_u = 0;
  for (double p : poison_scores) {
    const auto lo = std::lower_bound(clean.begin(), clean.end(), p);
    const auto hi = std::upper_bound(lo, clean.end(), p);
    twice_u += 2 * static_cast<std::uint64_t>(lo - clean.begin()) + static_cast<std::uint64_t>(hi - lo);
  }
  const double pairs = static_cast<double>(clean.size()) * static_cast<double>(poison_scores.size());
  return static_cast<double>(twice_u) / (2.0 * pairs);
}

FarFrr far_frr(std::span<const Verdict> verdicts, const std::vector<bool>& true_poison) {
  require(verdicts.size() == true_poison.size(), "far_frr: length mismatch");
  std::size_t n_poison = 0, missed = 0, n_clean = 0, rejected = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    if (true_poison[i]) {
      ++n_poison;
      if (!verdicts[i].is_poisoned) ++missed;
    } else {
      ++n_clean;
      if (verdicts[i].is_poisoned) ++rejected;
    }
  }
  FarFrr out;
  if (n_poison > 0) out.far = static_cast<double>(missed) / static_cast<double>(n_poison);
  if (n_clean > 0) out.frr = static_cast<double>(rejected) / static_cast<double>(n_clean);
  return out;
}

DetectionMetrics detection_metrics(std::span<const Verdict> verdicts, const std::vector<bool>& true_poison) {
  require(verdicts.size() == true_poison.size(), "detection_metrics: length mismatch");
  std::vector<double> clean, poison;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    (true_poison[i] ? poison : clean).push_back(verdicts[i].breakdown.fused);
  }
  DetectionMetrics m;
  m.auc = auc(clean, poison);
  const auto rates = far_frr(verdicts, true_poison);
  m.far = rates.far;
  m.frr = rates.frr;
  return m;
}

AttackMetrics cacc_asr(std::span<const std::pair<std::uint32_t, std::uint32_t>> clean,
                       std::span<const std::uint32_t> poison_preds, std::uint32_t target_label) {
  require(!clean.empty(), "cacc_asr: empty clean predictions");
  require(!poison_preds.empty(), "cacc_asr: empty poison predictions");
  const auto correct = std::count_if(clean.begin(), clean.end(), [](const auto& p) { return p.first == p.second; });
  const auto hits = std::count(poison_preds.begin(), poison_preds.end(), target_label);
  return {static_cast<double>(correct) / static_cast<double>(clean.size()),
          static_cast<double>(hits) / static_cast<double>(poison_preds.size())};
}

}  // namespace dupguard
