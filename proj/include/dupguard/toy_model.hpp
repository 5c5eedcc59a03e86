#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dupguard/feature_store.hpp"
#include "dupguard/rng.hpp"
#include "json.hpp"

namespace dupguard {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;

  bool operator==(const DenseLayer&) const;
};

/// Fully connected classifier with dims [d_in, d, ..., d, C]. Hidden layer i
/// computes t_i = tanh(W_i h_{i-1} + b_i); with `residual` set, layers after
/// the first add their input back (h_i = h_{i-1} + t_i). The logits are a
/// linear read-out of the last hidden vector. The trajectory is (h_1..h_L).
struct ToyClassifier {
  std::vector<std::size_t> dims;
  std::vector<DenseLayer> layers;
  bool residual = true;

  std::size_t input_dim() const { return dims.front(); }
  std::size_t num_classes() const { return dims.back(); }
  std::size_t hidden_layers() const { return dims.size() - 2; }
  std::size_t hidden_dim() const { return dims[1]; }

  void validate() const;
  nlohmann::json to_json() const;
  static ToyClassifier from_json(const nlohmann::json& j);
  bool operator==(const ToyClassifier&) const;
};

ToyClassifier init_model(const std::vector<std::size_t>& dims, std::uint64_t seed, bool residual = true);

struct AdapterConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  double dropout = 0.0;
  /// A ~ U(-a_init / sqrt(in), a_init / sqrt(in)), B ~ N(0, b_init_std^2).
  double a_init = 1.0;
  double b_init_std = 1e-3;

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate() const;
};

struct LowRankAdapter {
  Eigen::MatrixXd a;  // r x in
  Eigen::MatrixXd b;  // out x r

  bool operator==(const LowRankAdapter&) const;
};

/// One adapter per model layer. Layers narrower than the configured rank get
/// rank min(out, in); the scale stays alpha / rank for every layer.
struct AdapterSet {
  AdapterConfig config;
  std::vector<std::optional<LowRankAdapter>> per_layer;

  double scale() const { return config.scale(); }
  std::size_t attached() const;
  nlohmann::json to_json() const;
  static AdapterSet from_json(const nlohmann::json& j);
  bool operator==(const AdapterSet&) const;
};

AdapterSet init_adapters(const ToyClassifier& model, const AdapterConfig& cfg, std::uint64_t seed);

/// Effective weight W + scale * B * A of layer `i`.
Eigen::MatrixXd effective_weight(const ToyClassifier& model, const AdapterSet* adapters, std::size_t i);

/// Column-per-sample inputs with integer labels.
struct LabeledData {
  Eigen::MatrixXd x;  // d_in x n
  std::vector<std::uint32_t> y;

  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
  LabeledData subset(std::span<const std::size_t> indices) const;
  static LabeledData concat(const LabeledData& a, const LabeledData& b);
};

/// Cached activations of a batched forward pass.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> inputs;     // input to each layer, in x n
  std::vector<Eigen::MatrixXd> tanh_out;   // hidden layers only, d x n
  std::vector<Eigen::MatrixXd> hidden;     // h_1..h_L, d x n
  Eigen::MatrixXd logits;                  // C x n
};

ForwardTrace forward_batch(const ToyClassifier& model, const Eigen::MatrixXd& x,
                           const AdapterSet* adapters = nullptr);

struct ForwardResult {
  Eigen::VectorXd logits;
  FeatureTrajectory trajectory;
};

ForwardResult forward(const ToyClassifier& model, const Eigen::VectorXd& x, const AdapterSet* adapters = nullptr);

Eigen::MatrixXd logits_batch(const ToyClassifier& model, const Eigen::MatrixXd& x,
                             const AdapterSet* adapters = nullptr);
std::vector<std::uint32_t> predict(const ToyClassifier& model, const Eigen::MatrixXd& x,
                                   const AdapterSet* adapters = nullptr);

inline constexpr double kProbFloor = 1e-12;

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
double loss_ce(const Eigen::VectorXd& logits, std::uint32_t label);
double loss_kl(const Eigen::VectorXd& student_logits, const Eigen::VectorXd& teacher_logits);

/// d loss_ce / d logits.
Eigen::VectorXd grad_ce(const Eigen::VectorXd& logits, std::uint32_t label);
/// d loss_kl / d student_logits, exact under the probability floor.
Eigen::VectorXd grad_kl(const Eigen::VectorXd& student_logits, const Eigen::VectorXd& teacher_logits);

enum class Trainable { kAll, kAdaptersOnly };

struct Gradients {
  std::vector<DenseLayer> base;  // empty when only adapters are trainable
  std::vector<std::optional<LowRankAdapter>> adapters;

  static Gradients zeros_like(const ToyClassifier& model, const AdapterSet* adapters, Trainable mode);
  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
  /// Flattened in the canonical parameter order.
  Eigen::VectorXd flatten() const;
};

/// Accumulates into `grads` the gradients of a loss whose derivatives w.r.t.
/// the logits are `d_logits` (C x n) and, optionally, w.r.t. each hidden
/// output h_1..h_L (`d_hidden`, may be empty or hold empty matrices).
void backward(const ToyClassifier& model, const AdapterSet* adapters, const ForwardTrace& trace,
              const Eigen::MatrixXd& d_logits, const std::vector<Eigen::MatrixXd>& d_hidden, Gradients& grads);

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Mean cross-entropy over the batch and its gradient.
LossAndGrad ce_gradients(const ToyClassifier& model, const AdapterSet* adapters, const LabeledData& batch,
                         Trainable mode);

/// Mean of min(KL(student || teacher), cap) over the batch and its gradient
/// w.r.t. the student; capped samples contribute no gradient.
LossAndGrad kl_gradients(const ToyClassifier& model, const AdapterSet* adapters, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& teacher_logits, double cap, Trainable mode);

/// Views over trainable parameters, in the same order as Gradients::flatten.
std::vector<std::span<double>> parameter_views(ToyClassifier& model, AdapterSet* adapters, Trainable mode);
std::vector<std::span<const double>> gradient_views(const Gradients& grads);

enum class OptimizerKind { kSgd, kAdamW };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 2025;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig defaults);
};

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg);
  void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads);

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct TrainResult {
  ToyClassifier model;
  std::vector<double> loss_log;  // per-epoch mean batch loss
};

TrainResult train_supervised(ToyClassifier model, const LabeledData& data, const TrainConfig& cfg);

/// Shuffled mini-batch index lists covering [0, n).
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng);

/// FNV-1a over the raw parameter bytes.
std::uint64_t checksum(const ToyClassifier& model);
std::uint64_t checksum(const AdapterSet& adapters);

}  // namespace dupguard
