#include "dupguard/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dupguard/backdoor_lab.hpp"
#include "dupguard/error.hpp"
#include "dupguard/rng.hpp"

namespace dupguard {

void UnlearnConfig::validate() const {
  require(lambda_asr >= 0.0 && lambda_acc >= 0.0, "lambda_asr and lambda_acc must be non-negative");
  require(lambda_asr + lambda_acc > 0.0, "lambda_asr and lambda_acc cannot both be zero");
  require(kl_cap > 0.0, "kl_cap must be positive");
  train.validate();
  adapter.validate();
}

nlohmann::json UnlearnConfig::to_json() const {
  return {{"lambda_asr", lambda_asr},
          {"lambda_acc", lambda_acc},
          {"kl_cap", kl_cap},
          {"early_stop", early_stop},
          {"train", train.to_json()},
          {"adapter", {{"rank", adapter.rank}, {"alpha", adapter.alpha}, {"dropout", adapter.dropout},
                       {"a_init", adapter.a_init}, {"b_init_std", adapter.b_init_std}}}};
}

UnlearnConfig UnlearnConfig::from_json(const nlohmann::json& j) {
  UnlearnConfig c;
  try {
    c.lambda_asr = j.value("lambda_asr", c.lambda_asr);
    c.lambda_acc = j.value("lambda_acc", c.lambda_acc);
    c.kl_cap = j.value("kl_cap", c.kl_cap);
    c.early_stop = j.value("early_stop", c.early_stop);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"), c.train);
    if (j.contains("adapter")) {
      const auto& a = j.at("adapter");
      c.adapter.rank = a.value("rank", c.adapter.rank);
      c.adapter.alpha = a.value("alpha", c.adapter.alpha);
      c.adapter.dropout = a.value("dropout", c.adapter.dropout);
      c.adapter.a_init = a.value("a_init", c.adapter.a_init);
      c.adapter.b_init_std = a.value("b_init_std", c.adapter.b_init_std);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("unlearn config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// Endless shuffled pass over [0, n): each call returns the next
/// min(batch, n) indices, reshuffling whenever a pass is exhausted.
class Cycler {
 public:
  Cycler(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    const auto take = std::min(batch, order_.size());
    while (out.size() < take) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json PurifyReport::to_json() const {
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& e : epochs) curves.push_back({{"l_unlearn", e.unlearn}, {"l_preserve", e.preserve}, {"l_total", e.total}});
  nlohmann::json j{{"epochs", curves},
                   {"epochs_run", epochs.size()},
                   {"stopped_early", stopped_early},
                   {"checksums",
                    {{"teacher_before", hex(teacher_checksum_before)},
                     {"teacher_after", hex(teacher_checksum_after)},
                     {"student_base_before", hex(base_checksum_before)},
                     {"student_base_after", hex(base_checksum_after)},
                     {"adapters_initial", hex(adapter_checksum_initial)},
                     {"adapters_final", hex(adapter_checksum_final)}}}};
  if (pre) j["pre_purification"] = pre->to_json();
  if (post) j["post_purification"] = post->to_json();
  return j;
}

UnlearnStep unlearn_step(const ToyClassifier& teacher, const ToyClassifier& student_base, const AdapterSet& adapters,
                         const Eigen::MatrixXd& batch_p, const LabeledData& batch_c, const UnlearnConfig& cfg) {
  cfg.validate();
  require(cfg.lambda_asr == 0.0 || batch_p.cols() > 0, "unlearn_step: empty poisoned batch with lambda_asr > 0");
  require(cfg.lambda_acc == 0.0 || batch_c.size() > 0, "unlearn_step: empty clean batch with lambda_acc > 0");

  UnlearnStep out{0.0, 0.0, 0.0, Gradients::zeros_like(student_base, &adapters, Trainable::kAdaptersOnly)};
  if (batch_p.cols() > 0) {
    const auto teacher_logits = logits_batch(teacher, batch_p);
    auto kl = kl_gradients(student_base, &adapters, batch_p, teacher_logits, cfg.kl_cap, Trainable::kAdaptersOnly);
    out.l_unlearn = kl.loss;
    if (cfg.lambda_asr != 0.0) {
      kl.grads *= -cfg.lambda_asr;
      out.grads += kl.grads;
    }
  }
  if (batch_c.size() > 0) {
    auto ce = ce_gradients(student_base, &adapters, batch_c, Trainable::kAdaptersOnly);
    out.l_preserve = ce.loss;
    if (cfg.lambda_acc != 0.0) {
      ce.grads *= cfg.lambda_acc;
      out.grads += ce.grads;
    }
  }
  out.l_total = -cfg.lambda_asr * out.l_unlearn + cfg.lambda_acc * out.l_preserve;
  return out;
}

PurifyReport purify(const ToyClassifier& teacher, const Eigen::MatrixXd& d_p, const LabeledData& d_c,
                    const UnlearnConfig& cfg, std::optional<EvalSets> eval) {
  cfg.validate();
  teacher.validate();
  if (cfg.lambda_asr > 0.0 && d_p.cols() == 0) {
    fail(ErrorCode::kInvalidArgument, "purify: the detected-poison partition is empty but lambda_asr > 0");
  }
  if (cfg.lambda_acc > 0.0 && d_c.size() == 0) {
    fail(ErrorCode::kInvalidArgument, "purify: the detected-clean partition is empty but lambda_acc > 0");
  }
  require(d_p.cols() == 0 || d_p.rows() == static_cast<Eigen::Index>(teacher.input_dim()),
          "purify: poisoned inputs have the wrong dimension");

  PurifyReport report;
  report.teacher_checksum_before = checksum(teacher);
  report.student_base = teacher;
  report.base_checksum_before = checksum(report.student_base);
  report.adapters = init_adapters(report.student_base, cfg.adapter, derive_seed(cfg.train.seed, "unlearn.adapters"));
  report.adapter_checksum_initial = checksum(report.adapters);
  if (eval) {
    require(eval->clean_test != nullptr && eval->poison_test != nullptr, "purify: evaluation sets missing");
    report.pre = eval_attack(teacher, *eval->clean_test, *eval->poison_test, eval->target_label);
  }

  const bool use_p = cfg.lambda_asr > 0.0 || (d_p.cols() > 0);
  const bool use_c = cfg.lambda_acc > 0.0 || (d_c.size() > 0);
  auto rng = make_rng(cfg.train.seed, "unlearn.batches");
  Cycler cyc_p(use_p ? static_cast<std::size_t>(d_p.cols()) : 0, rng);
  Cycler cyc_c(use_c ? d_c.size() : 0, rng);
  const auto longest = std::max(use_p ? static_cast<std::size_t>(d_p.cols()) : 0, use_c ? d_c.size() : 0);
  const auto steps = (longest + cfg.train.batch_size - 1) / cfg.train.batch_size;

  Optimizer opt(cfg.train);
  ToyClassifier& base = report.student_base;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    EpochLosses sum;
    for (std::size_t s = 0; s < steps; ++s) {
      Eigen::MatrixXd xp;
      if (use_p) {
        const auto idx = cyc_p.next(cfg.train.batch_size);
        xp.resize(d_p.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) xp.col(static_cast<Eigen::Index>(k)) = d_p.col(static_cast<Eigen::Index>(idx[k]));
      }
      LabeledData bc;
      if (use_c) bc = d_c.subset(cyc_c.next(cfg.train.batch_size));
      const auto step = unlearn_step(teacher, base, report.adapters, xp, bc, cfg);
      sum.unlearn += step.l_unlearn;
      sum.preserve += step.l_preserve;
      sum.total += step.l_total;
      opt.step(parameter_views(base, &report.adapters, Trainable::kAdaptersOnly), gradient_views(step.grads));
    }
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(steps, 1));
    report.epochs.push_back({sum.unlearn * inv, sum.preserve * inv, sum.total * inv});

    if (cfg.early_stop && report.epochs.size() >= 2) {
      const auto& cur = report.epochs.back();
      const bool unlearn_done = cfg.lambda_asr == 0.0 || cur.unlearn >= cfg.kl_cap * (1.0 - 1e-9);
      const bool preserve_done = cfg.lambda_acc == 0.0 || cur.preserve <= 1.05 * report.epochs.front().preserve;
      if (unlearn_done && preserve_done) {
        report.stopped_early = epoch + 1 < cfg.train.epochs;
        break;
      }
    }
  }

  report.teacher_checksum_after = checksum(teacher);
  report.base_checksum_after = checksum(report.student_base);
  report.adapter_checksum_final = checksum(report.adapters);
  if (eval) {
    report.post = eval_attack(report.student_base, *eval->clean_test, *eval->poison_test, eval->target_label,
                              &report.adapters);
  }
  return report;
}

ToyClassifier merge_adapters(const ToyClassifier& base, const AdapterSet& adapters) {
  base.validate();
  if (adapters.per_layer.size() != base.layers.size()) {
    fail(ErrorCode::kInvalidArgument, "merge_adapters: adapter set does not match the model");
  }
  ToyClassifier merged = base;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    merged.layers[i].weight = effective_weight(base, &adapters, i);
  }
  return merged;
}

}  // namespace dupguard
