#include "dupguard/toy_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "dupguard/error.hpp"

namespace dupguard {

namespace {

template <typename M>
bool same_matrix(const M& a, const M& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data(),
                    [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); });
}

std::vector<double> row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  }
  return out;
}

Eigen::MatrixXd from_row_major(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) fail(ErrorCode::kSchema, "matrix array has the wrong length");
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = v[r * cols + c];
  }
  if (!m.allFinite()) fail(ErrorCode::kSchema, "matrix contains non-finite values");
  return m;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

template <typename M>
void fnv_mix(std::uint64_t& h, const M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(m.data()[i]);
    for (int b = 0; b < 8; ++b) {
      h ^= bits & 0xffU;
      h *= kFnvPrime;
      bits >>= 8;
    }
  }
}

}  // namespace

bool DenseLayer::operator==(const DenseLayer& o) const {
  return same_matrix(weight, o.weight) && same_matrix(bias, o.bias);
}

bool LowRankAdapter::operator==(const LowRankAdapter& o) const { return same_matrix(a, o.a) && same_matrix(b, o.b); }

bool ToyClassifier::operator==(const ToyClassifier& o) const {
  return dims == o.dims && residual == o.residual && layers == o.layers;
}

bool AdapterSet::operator==(const AdapterSet& o) const {
  return config.rank == o.config.rank && config.alpha == o.config.alpha && config.dropout == o.config.dropout &&
         per_layer == o.per_layer;
}

void ToyClassifier::validate() const {
  require(dims.size() >= 3, "model needs at least one hidden layer");
  for (std::size_t i = 2; i + 1 < dims.size(); ++i) {
    require(dims[i] == dims[1], "hidden dims must be equal (" + std::to_string(dims[1]) + " vs " +
                                    std::to_string(dims[i]) + ")");
  }
  for (auto d : dims) require(d >= 1, "layer dims must be positive");
  require(layers.size() == dims.size() - 1, "layer count does not match dims");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto out = static_cast<Eigen::Index>(dims[i + 1]);
    const auto in = static_cast<Eigen::Index>(dims[i]);
    require(layers[i].weight.rows() == out && layers[i].weight.cols() == in && layers[i].bias.size() == out,
            "layer " + std::to_string(i) + " has the wrong shape");
  }
}

nlohmann::json ToyClassifier::to_json() const {
  nlohmann::json j;
  j["format"] = "dupguard.toy_classifier";
  j["version"] = 1;
  j["dims"] = dims;
  j["residual"] = residual;
  j["activation"] = "tanh";
  auto arr = nlohmann::json::array();
  for (const auto& l : layers) {
    arr.push_back({{"weight", row_major(l.weight)},
                   {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  j["layers"] = std::move(arr);
  return j;
}

ToyClassifier ToyClassifier::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "dupguard.toy_classifier") {
      fail(ErrorCode::kSchema, "not a toy classifier document");
    }
    ToyClassifier m;
    m.dims = j.at("dims").get<std::vector<std::size_t>>();
    m.residual = j.at("residual").get<bool>();
    const auto& arr = j.at("layers");
    if (m.dims.size() < 3 || arr.size() != m.dims.size() - 1) fail(ErrorCode::kSchema, "layer count does not match dims");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      DenseLayer l;
      l.weight = from_row_major(arr[i].at("weight").get<std::vector<double>>(), m.dims[i + 1], m.dims[i]);
      l.bias = from_row_major(arr[i].at("bias").get<std::vector<double>>(), m.dims[i + 1], 1);
      m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("toy classifier JSON: ") + e.what());
  }
}

ToyClassifier init_model(const std::vector<std::size_t>& dims, std::uint64_t seed, bool residual) {
  ToyClassifier m;
  m.dims = dims;
  m.residual = residual;
  require(dims.size() >= 3, "init_model: need at least [d_in, hidden, classes]");
  for (std::size_t i = 2; i + 1 < dims.size(); ++i) {
    require(dims[i] == dims[1], "init_model: hidden dims must be equal (" + std::to_string(dims[1]) + " vs " +
                                    std::to_string(dims[i]) + ")");
  }
  for (auto d : dims) require(d >= 1, "init_model: dims must be positive");

  auto rng = make_rng(seed, "toy_model.init");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer l;
    l.weight.resize(static_cast<Eigen::Index>(dims[i + 1]), static_cast<Eigen::Index>(dims[i]));
    l.bias.resize(static_cast<Eigen::Index>(dims[i + 1]));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = u(rng);
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = u(rng);
    m.layers.push_back(std::move(l));
  }
  return m;
}

void AdapterConfig::validate() const {
  require(rank >= 1, "adapter rank must be at least 1");
  require(alpha > 0.0, "adapter alpha must be positive");
  require(dropout == 0.0, "adapter dropout is not supported on the toy path (must be 0)");
  require(a_init >= 0.0 && b_init_std >= 0.0, "adapter init scales must be non-negative");
}

std::size_t AdapterSet::attached() const {
  return static_cast<std::size_t>(
      std::count_if(per_layer.begin(), per_layer.end(), [](const auto& a) { return a.has_value(); }));
}

nlohmann::json AdapterSet::to_json() const {
  nlohmann::json j;
  j["format"] = "dupguard.adapters";
  j["version"] = 1;
  j["rank"] = config.rank;
  j["alpha"] = config.alpha;
  j["dropout"] = config.dropout;
  auto arr = nlohmann::json::array();
  for (const auto& a : per_layer) {
    if (!a) {
      arr.push_back(nullptr);
    } else {
      arr.push_back({{"in", a->a.cols()}, {"out", a->b.rows()}, {"a", row_major(a->a)}, {"b", row_major(a->b)}});
    }
  }
  j["layers"] = std::move(arr);
  return j;
}

AdapterSet AdapterSet::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "dupguard.adapters") fail(ErrorCode::kSchema, "not an adapter document");
    AdapterSet s;
    s.config.rank = j.at("rank").get<std::size_t>();
    s.config.alpha = j.at("alpha").get<double>();
    s.config.dropout = j.at("dropout").get<double>();
    s.config.validate();
    for (const auto& e : j.at("layers")) {
      if (e.is_null()) {
        s.per_layer.emplace_back();
        continue;
      }
      const auto in = e.at("in").get<std::size_t>();
      const auto out = e.at("out").get<std::size_t>();
      const auto av = e.at("a").get<std::vector<double>>();
      const auto r = in == 0 ? 0 : av.size() / in;
      if (r < 1 || r > s.config.rank) fail(ErrorCode::kSchema, "adapter JSON: adapter rank out of range");
      LowRankAdapter a;
      a.a = from_row_major(av, r, in);
      a.b = from_row_major(e.at("b").get<std::vector<double>>(), out, r);
      s.per_layer.emplace_back(std::move(a));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("adapter JSON: ") + e.what());
  }
}

AdapterSet init_adapters(const ToyClassifier& model, const AdapterConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  model.validate();
  AdapterSet s;
  s.config = cfg;
  auto rng = make_rng(seed, "toy_model.adapters");
  std::normal_distribution<double> nb(0.0, cfg.b_init_std);
  for (const auto& l : model.layers) {
    const auto out = l.weight.rows();
    const auto in = l.weight.cols();
    const auto r = std::min(static_cast<Eigen::Index>(cfg.rank), std::min(out, in));
    const double bound = cfg.a_init / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> ua(-bound, bound);
    LowRankAdapter a;
    a.a.resize(r, in);
    a.b.resize(out, r);
    for (Eigen::Index i = 0; i < a.a.size(); ++i) a.a.data()[i] = cfg.a_init > 0.0 ? ua(rng) : 0.0;
    for (Eigen::Index i = 0; i < a.b.size(); ++i) a.b.data()[i] = cfg.b_init_std > 0.0 ? nb(rng) : 0.0;
    s.per_layer.emplace_back(std::move(a));
  }
  return s;
}

namespace {

void check_adapters(const ToyClassifier& model, const AdapterSet* adapters) {
  if (adapters == nullptr) return;
  if (adapters->per_layer.size() != model.layers.size()) {
    fail(ErrorCode::kInvalidArgument, "adapter set does not match the model's layer count");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& a = adapters->per_layer[i];
    if (!a) continue;
    const auto& w = model.layers[i].weight;
    if (a->a.cols() != w.cols() || a->b.rows() != w.rows() || a->a.rows() != a->b.cols()) {
      fail(ErrorCode::kInvalidArgument, "adapter shape mismatch at layer " + std::to_string(i));
    }
  }
}

}  // namespace

Eigen::MatrixXd effective_weight(const ToyClassifier& model, const AdapterSet* adapters, std::size_t i) {
  Eigen::MatrixXd w = model.layers.at(i).weight;
  if (adapters != nullptr && adapters->per_layer.at(i)) {
    const auto& a = *adapters->per_layer[i];
    w += adapters->scale() * a.b * a.a;
  }
  return w;
}

LabeledData LabeledData::subset(std::span<const std::size_t> indices) const {
  LabeledData out;
  out.x.resize(x.rows(), static_cast<Eigen::Index>(indices.size()));
  out.y.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    require(indices[k] < size(), "LabeledData::subset: index out of range");
    out.x.col(static_cast<Eigen::Index>(k)) = x.col(static_cast<Eigen::Index>(indices[k]));
    out.y.push_back(y[indices[k]]);
  }
  return out;
}

LabeledData LabeledData::concat(const LabeledData& a, const LabeledData& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  require(a.x.rows() == b.x.rows(), "LabeledData::concat: input dims differ");
  LabeledData out;
  out.x.resize(a.x.rows(), a.x.cols() + b.x.cols());
  out.x << a.x, b.x;
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

ForwardTrace forward_batch(const ToyClassifier& model, const Eigen::MatrixXd& x, const AdapterSet* adapters) {
  if (x.rows() != static_cast<Eigen::Index>(model.input_dim())) {
    fail(ErrorCode::kInvalidArgument, "forward: input has dim " + std::to_string(x.rows()) + ", model expects " +
                                          std::to_string(model.input_dim()));
  }
  check_adapters(model, adapters);
  const auto hidden = model.hidden_layers();
  ForwardTrace t;
  t.inputs.reserve(hidden + 1);
  Eigen::MatrixXd h = x;
  for (std::size_t i = 0; i < hidden; ++i) {
    t.inputs.push_back(h);
    Eigen::MatrixXd z = effective_weight(model, adapters, i) * h;
    z.colwise() += model.layers[i].bias;
    Eigen::MatrixXd a = z.array().tanh().matrix();
    if (model.residual && i > 0) {
      h += a;
    } else {
      h = a;
    }
    t.tanh_out.push_back(std::move(a));
    t.hidden.push_back(h);
  }
  t.inputs.push_back(h);
  t.logits = effective_weight(model, adapters, hidden) * h;
  t.logits.colwise() += model.layers[hidden].bias;
  return t;
}

ForwardResult forward(const ToyClassifier& model, const Eigen::VectorXd& x, const AdapterSet* adapters) {
  const auto t = forward_batch(model, x, adapters);
  Eigen::MatrixXd traj(static_cast<Eigen::Index>(t.hidden.size()), static_cast<Eigen::Index>(model.hidden_dim()));
  for (std::size_t i = 0; i < t.hidden.size(); ++i) traj.row(static_cast<Eigen::Index>(i)) = t.hidden[i].col(0).transpose();
  return {t.logits.col(0), FeatureTrajectory::from_double(traj)};
}

Eigen::MatrixXd logits_batch(const ToyClassifier& model, const Eigen::MatrixXd& x, const AdapterSet* adapters) {
  return forward_batch(model, x, adapters).logits;
}

std::vector<std::uint32_t> predict(const ToyClassifier& model, const Eigen::MatrixXd& x, const AdapterSet* adapters) {
  const auto logits = logits_batch(model, x, adapters);
  std::vector<std::uint32_t> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    Eigen::Index arg = 0;
    logits.col(c).maxCoeff(&arg);
    out[static_cast<std::size_t>(c)] = static_cast<std::uint32_t>(arg);
  }
  return out;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  require(logits.size() >= 1, "softmax: empty logits");
  const Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

double loss_ce(const Eigen::VectorXd& logits, std::uint32_t label) {
  require(label < logits.size(), "loss_ce: label " + std::to_string(label) + " out of range");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits[label];
}

Eigen::VectorXd grad_ce(const Eigen::VectorXd& logits, std::uint32_t label) {
  require(label < logits.size(), "grad_ce: label out of range");
  Eigen::VectorXd g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

double loss_kl(const Eigen::VectorXd& student_logits, const Eigen::VectorXd& teacher_logits) {
  require(student_logits.size() == teacher_logits.size(), "loss_kl: dimension mismatch");
  const auto p = softmax(student_logits);
  const auto q = softmax(teacher_logits);
  double kl = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    kl += p[j] * (std::log(std::max(p[j], kProbFloor)) - std::log(std::max(q[j], kProbFloor)));
  }
  return std::max(kl, 0.0);
}

Eigen::VectorXd grad_kl(const Eigen::VectorXd& student_logits, const Eigen::VectorXd& teacher_logits) {
  require(student_logits.size() == teacher_logits.size(), "grad_kl: dimension mismatch");
  const auto p = softmax(student_logits);
  const auto q = softmax(teacher_logits);
  Eigen::VectorXd gp(p.size());
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    gp[j] = std::log(std::max(p[j], kProbFloor)) - std::log(std::max(q[j], kProbFloor)) + (p[j] > kProbFloor ? 1.0 : 0.0);
  }
  // Softmax Jacobian: dz = p * (gp - <p, gp>).
  return (p.array() * (gp.array() - p.dot(gp))).matrix();
}

Gradients Gradients::zeros_like(const ToyClassifier& model, const AdapterSet* adapters, Trainable mode) {
  check_adapters(model, adapters);
  Gradients g;
  if (mode == Trainable::kAll) {
    for (const auto& l : model.layers) {
      g.base.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
    }
  }
  g.adapters.resize(model.layers.size());
  if (adapters != nullptr) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (const auto& a = adapters->per_layer[i]) {
        g.adapters[i] = LowRankAdapter{Eigen::MatrixXd::Zero(a->a.rows(), a->a.cols()),
                                       Eigen::MatrixXd::Zero(a->b.rows(), a->b.cols())};
      }
    }
  }
  return g;
}

Gradients& Gradients::operator+=(const Gradients& o) {
  require(base.size() == o.base.size() && adapters.size() == o.adapters.size(), "Gradients: shape mismatch");
  for (std::size_t i = 0; i < base.size(); ++i) {
    base[i].weight += o.base[i].weight;
    base[i].bias += o.base[i].bias;
  }
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    require(adapters[i].has_value() == o.adapters[i].has_value(), "Gradients: adapter layout mismatch");
    if (adapters[i]) {
      adapters[i]->a += o.adapters[i]->a;
      adapters[i]->b += o.adapters[i]->b;
    }
  }
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (auto& l : base) {
    l.weight *= s;
    l.bias *= s;
  }
  for (auto& a : adapters) {
    if (a) {
      a->a *= s;
      a->b *= s;
    }
  }
  return *this;
}

Eigen::VectorXd Gradients::flatten() const {
  std::vector<double> out;
  for (const auto& v : gradient_views(*this)) out.insert(out.end(), v.begin(), v.end());
  return Eigen::Map<const Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

void backward(const ToyClassifier& model, const AdapterSet* adapters, const ForwardTrace& trace,
              const Eigen::MatrixXd& d_logits, const std::vector<Eigen::MatrixXd>& d_hidden, Gradients& grads) {
  const auto hidden = model.hidden_layers();
  require(d_logits.rows() == trace.logits.rows() && d_logits.cols() == trace.logits.cols(),
          "backward: d_logits shape mismatch");
  require(d_hidden.empty() || d_hidden.size() == hidden, "backward: d_hidden must have one entry per hidden layer");
  require(grads.adapters.size() == model.layers.size(), "backward: gradient layout mismatch");
  const bool with_base = !grads.base.empty();
  const double scale = adapters != nullptr ? adapters->scale() : 0.0;

  // Accumulates parameter gradients of layer i from dL/d(pre-activation) and
  // returns dL/d(layer input).
  auto layer_backward = [&](std::size_t i, const Eigen::MatrixXd& g) -> Eigen::MatrixXd {
    const auto& in = trace.inputs[i];
    if (with_base) {
      grads.base[i].weight.noalias() += g * in.transpose();
      grads.base[i].bias += g.rowwise().sum();
    }
    Eigen::MatrixXd g_in = model.layers[i].weight.transpose() * g;
    if (adapters != nullptr && adapters->per_layer[i]) {
      const auto& a = *adapters->per_layer[i];
      const Eigen::MatrixXd bt_g = a.b.transpose() * g;  // r x n
      if (grads.adapters[i]) {
        grads.adapters[i]->b.noalias() += scale * g * (a.a * in).transpose();
        grads.adapters[i]->a.noalias() += scale * bt_g * in.transpose();
      }
      g_in.noalias() += scale * a.a.transpose() * bt_g;
    }
    return g_in;
  };

  Eigen::MatrixXd g_h = layer_backward(hidden, d_logits);
  for (std::size_t k = hidden; k-- > 0;) {
    if (!d_hidden.empty() && d_hidden[k].size() > 0) g_h += d_hidden[k];
    const Eigen::MatrixXd g_z = (g_h.array() * (1.0 - trace.tanh_out[k].array().square())).matrix();
    Eigen::MatrixXd g_prev = layer_backward(k, g_z);
    if (model.residual && k > 0) g_prev += g_h;
    g_h = std::move(g_prev);
  }
}

LossAndGrad ce_gradients(const ToyClassifier& model, const AdapterSet* adapters, const LabeledData& batch,
                         Trainable mode) {
  require(batch.size() > 0 && batch.y.size() == batch.size(), "ce_gradients: empty or inconsistent batch");
  const auto trace = forward_batch(model, batch.x, adapters);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Eigen::MatrixXd d_logits(trace.logits.rows(), trace.logits.cols());
  LossAndGrad out{0.0, Gradients::zeros_like(model, adapters, mode)};
  for (Eigen::Index c = 0; c < trace.logits.cols(); ++c) {
    const auto y = batch.y[static_cast<std::size_t>(c)];
    out.loss += loss_ce(trace.logits.col(c), y) * inv_n;
    d_logits.col(c) = grad_ce(trace.logits.col(c), y) * inv_n;
  }
  backward(model, adapters, trace, d_logits, {}, out.grads);
  return out;
}

LossAndGrad kl_gradients(const ToyClassifier& model, const AdapterSet* adapters, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& teacher_logits, double cap, Trainable mode) {
  require(x.cols() > 0, "kl_gradients: empty batch");
  require(cap > 0.0, "kl_gradients: cap must be positive");
  const auto trace = forward_batch(model, x, adapters);
  require(teacher_logits.rows() == trace.logits.rows() && teacher_logits.cols() == trace.logits.cols(),
          "kl_gradients: teacher logits shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(x.cols());
  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(trace.logits.rows(), trace.logits.cols());
  LossAndGrad out{0.0, Gradients::zeros_like(model, adapters, mode)};
  for (Eigen::Index c = 0; c < trace.logits.cols(); ++c) {
    const double kl = loss_kl(trace.logits.col(c), teacher_logits.col(c));
    if (kl >= cap) {
      out.loss += cap * inv_n;
    } else {
      out.loss += kl * inv_n;
      d_logits.col(c) = grad_kl(trace.logits.col(c), teacher_logits.col(c)) * inv_n;
    }
  }
  backward(model, adapters, trace, d_logits, {}, out.grads);
  return out;
}

std::vector<std::span<double>> parameter_views(ToyClassifier& model, AdapterSet* adapters, Trainable mode) {
  check_adapters(model, adapters);
  std::vector<std::span<double>> out;
  auto view = [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (mode == Trainable::kAll) {
      out.push_back(view(model.layers[i].weight));
      out.push_back(view(model.layers[i].bias));
    }
    if (adapters != nullptr && adapters->per_layer[i]) {
      out.push_back(view(adapters->per_layer[i]->a));
      out.push_back(view(adapters->per_layer[i]->b));
    }
  }
  return out;
}

std::vector<std::span<const double>> gradient_views(const Gradients& grads) {
  std::vector<std::span<const double>> out;
  auto view = [](const auto& m) { return std::span<const double>(m.data(), static_cast<std::size_t>(m.size())); };
  for (std::size_t i = 0; i < grads.adapters.size(); ++i) {
    if (!grads.base.empty()) {
      out.push_back(view(grads.base[i].weight));
      out.push_back(view(grads.base[i].bias));
    }
    if (grads.adapters[i]) {
      out.push_back(view(grads.adapters[i]->a));
      out.push_back(view(grads.adapters[i]->b));
    }
  }
  return out;
}

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(epochs >= 1, "epochs must be at least 1");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "adam betas must lie in [0, 1)");
  require(eps > 0.0, "eps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"epochs", epochs},   {"batch_size", batch_size},
          {"seed", seed},                   {"optimizer", optimizer == OptimizerKind::kSgd ? "sgd" : "adamw"},
          {"beta1", beta1},                 {"beta2", beta2},     {"eps", eps},
          {"weight_decay", weight_decay}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig cfg) {
  try {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("optimizer")) {
      const auto name = j.at("optimizer").get<std::string>();
      if (name == "sgd") {
        cfg.optimizer = OptimizerKind::kSgd;
      } else if (name == "adamw") {
        cfg.optimizer = OptimizerKind::kAdamW;
      } else {
        fail(ErrorCode::kSchema, "optimizer must be \"sgd\" or \"adamw\", got \"" + name + "\"");
      }
    }
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.eps = j.value("eps", cfg.eps);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Optimizer::Optimizer(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

void Optimizer::step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
  require(params.size() == grads.size(), "Optimizer::step: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(params[k].size() == grads[k].size(), "Optimizer::step: parameter/gradient size mismatch");
  }
  const double lr = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::kSgd) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        params[k][i] -= lr * (grads[k][i] + cfg_.weight_decay * params[k][i]);
      }
    }
    return;
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  require(m_.size() == params.size(), "Optimizer::step: parameter layout changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double g = grads[k][i];
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      params[k][i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * params[k][i]);
    }
  }
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  require(batch_size >= 1, "make_batches: batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  }
  return out;
}

TrainResult train_supervised(ToyClassifier model, const LabeledData& data, const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  require(data.size() > 0, "train_supervised: empty dataset");
  auto rng = make_rng(cfg.seed, "toy_model.train");
  Optimizer opt(cfg);
  TrainResult out;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = make_batches(data.size(), cfg.batch_size, rng);
    for (const auto& idx : batches) {
      const auto lg = ce_gradients(model, nullptr, data.subset(idx), Trainable::kAll);
      total += lg.loss;
      opt.step(parameter_views(model, nullptr, Trainable::kAll), gradient_views(lg.grads));
    }
    out.loss_log.push_back(total / static_cast<double>(batches.size()));
  }
  out.model = std::move(model);
  return out;
}

std::uint64_t checksum(const ToyClassifier& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto& l : model.layers) {
    fnv_mix(h, l.weight);
    fnv_mix(h, l.bias);
  }
  return h;
}

std::uint64_t checksum(const AdapterSet& adapters) {
  std::uint64_t h = kFnvOffset;
  for (const auto& a : adapters.per_layer) {
    if (!a) continue;
    fnv_mix(h, a->a);
    fnv_mix(h, a->b);
  }
  return h;
}

}  // namespace dupguard
