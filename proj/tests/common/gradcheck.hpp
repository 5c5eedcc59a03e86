#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include <Eigen/Dense>

#include "dupguard/backdoor_lab.hpp"
#include "dupguard/toy_model.hpp"
#include "dupguard/unlearn.hpp"

namespace gradcheck {

using namespace dupguard;

// Central differences of `loss` over every trainable parameter, in the order
// of Gradients::flatten. `loss` must read the live model and adapters.
inline Eigen::VectorXd numeric_gradient(ToyClassifier& model, AdapterSet* adapters, Trainable mode,
                                        const std::function<double()>& loss, double h = 1e-4) {
  std::vector<double> out;
  for (auto view : parameter_views(model, adapters, mode)) {
    for (double& p : view) {
      const double saved = p;
      p = saved + h;
      const double up = loss();
      p = saved - h;
      const double down = loss();
      p = saved;
      out.push_back((up - down) / (2.0 * h));
    }
  }
  return Eigen::Map<const Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

// Largest |a - n| / max(|a|, |n|, floor) over all entries.
inline double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric, double floor) {
  if (analytic.size() != numeric.size()) return INFINITY;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic(i)), std::abs(numeric(i)), floor});
    if (scale == 0.0) continue;  // both exactly zero
    worst = std::max(worst, std::abs(analytic(i) - numeric(i)) / scale);
  }
  return worst;
}

// Adapter-equipped model with non-trivial B so every parameter has a gradient.
struct Fixture {
  ToyClassifier model;
  AdapterSet adapters;
  Eigen::MatrixXd x;
  Eigen::MatrixXd x2;
  std::vector<std::uint32_t> y;
};

inline Fixture make_fixture(const std::vector<std::size_t>& dims, std::size_t rank, std::uint64_t seed,
                            Eigen::Index n = 6) {
  Fixture f;
  f.model = init_model(dims, seed);
  AdapterConfig ac;
  ac.rank = rank;
  ac.alpha = 2.0 * static_cast<double>(rank);
  f.adapters = init_adapters(f.model, ac, seed + 1);
  std::mt19937_64 rng(seed + 2);
  std::normal_distribution<double> n01;
  for (auto& a : f.adapters.per_layer) {
    if (a) {
      for (Eigen::Index i = 0; i < a->b.size(); ++i) a->b.data()[i] = 0.3 * n01(rng);
    }
  }
  const auto d = static_cast<Eigen::Index>(dims.front());
  f.x.resize(d, n);
  f.x2.resize(d, n);
  for (Eigen::Index i = 0; i < f.x.size(); ++i) f.x.data()[i] = n01(rng);
  for (Eigen::Index i = 0; i < f.x2.size(); ++i) f.x2.data()[i] = n01(rng);
  for (Eigen::Index i = 0; i < n; ++i) f.y.push_back(static_cast<std::uint32_t>(i % static_cast<Eigen::Index>(dims.back())));
  return f;
}

// L_reg evaluated directly from its definition with fixed clean targets.
inline double feature_reg_oracle(const ToyClassifier& model, const AdapterSet* adapters, const Eigen::MatrixXd& xp,
                                 const std::vector<Eigen::MatrixXd>& clean_hidden) {
  const auto trace = forward_batch(model, xp, adapters);
  double total = 0.0;
  for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
    total += (trace.hidden[l] - clean_hidden[l]).colwise().norm().sum();
  }
  return total / static_cast<double>(xp.cols());
}

struct Result {
  double ce = 0.0;
  double kl = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t parameters = 0;
};

// Worst relative error per loss on one fixture.
inline Result check_all(const std::vector<std::size_t>& dims, std::size_t rank, std::uint64_t seed, double floor) {
  auto f = make_fixture(dims, rank, seed);
  Result r;
  LabeledData batch{f.x, f.y};

  {
    const auto g = ce_gradients(f.model, &f.adapters, batch, Trainable::kAll);
    const auto num = numeric_gradient(f.model, &f.adapters, Trainable::kAll, [&] {
      const auto logits = logits_batch(f.model, f.x, &f.adapters);
      double s = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) s += loss_ce(logits.col(c), f.y[static_cast<std::size_t>(c)]);
      return s / static_cast<double>(logits.cols());
    });
    r.ce = max_relative_error(g.grads.flatten(), num, floor);
    r.parameters = static_cast<std::size_t>(num.size());
  }
  {
    const auto teacher = init_model(dims, seed + 7);
    const auto t_logits = logits_batch(teacher, f.x);
    const auto g = kl_gradients(f.model, &f.adapters, f.x, t_logits, 1e9, Trainable::kAll);
    const auto num = numeric_gradient(f.model, &f.adapters, Trainable::kAll, [&] {
      const auto logits = logits_batch(f.model, f.x, &f.adapters);
      double s = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) s += loss_kl(logits.col(c), t_logits.col(c));
      return s / static_cast<double>(logits.cols());
    });
    r.kl = max_relative_error(g.grads.flatten(), num, floor);
  }
  {
    const auto clean_hidden = forward_batch(f.model, f.x2, &f.adapters).hidden;
    const auto g = feature_reg_gradients(f.model, &f.adapters, f.x, f.x2, Trainable::kAll);
    const auto num = numeric_gradient(f.model, &f.adapters, Trainable::kAll,
                                      [&] { return feature_reg_oracle(f.model, &f.adapters, f.x, clean_hidden); });
    r.reg = max_relative_error(g.grads.flatten(), num, floor);
  }
  {
    const ToyClassifier teacher = f.model;
    UnlearnConfig cfg;
    cfg.lambda_asr = 1.0;
    cfg.lambda_acc = 1.0;
    const LabeledData clean{f.x2, f.y};
    const auto step = unlearn_step(teacher, f.model, f.adapters, f.x, clean, cfg);
    // The student base is the live model; adapters are the only trainable part.
    const auto num = numeric_gradient(f.model, &f.adapters, Trainable::kAdaptersOnly, [&] {
      const auto s_p = logits_batch(f.model, f.x, &f.adapters);
      const auto t_p = logits_batch(teacher, f.x);
      const auto s_c = logits_batch(f.model, f.x2, &f.adapters);
      double unl = 0.0, pre = 0.0;
      for (Eigen::Index c = 0; c < s_p.cols(); ++c) unl += std::min(loss_kl(s_p.col(c), t_p.col(c)), cfg.kl_cap);
      for (Eigen::Index c = 0; c < s_c.cols(); ++c) pre += loss_ce(s_c.col(c), f.y[static_cast<std::size_t>(c)]);
      unl /= static_cast<double>(s_p.cols());
      pre /= static_cast<double>(s_c.cols());
      return -cfg.lambda_asr * unl + cfg.lambda_acc * pre;
    });
    r.total = max_relative_error(step.grads.flatten(), num, floor);
  }
  return r;
}

}  // namespace gradcheck
