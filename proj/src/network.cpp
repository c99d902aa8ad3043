#include "loanrisk/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/kernels.hpp"

namespace loanrisk {
namespace {

Eigen::VectorXd activate(Activation a, const Eigen::VectorXd& z) {
  switch (a) {
    case Activation::kRelu: return z.cwiseMax(0.0);
    case Activation::kSigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    case Activation::kTanh: return z.array().tanh().matrix();
  }
  return z;
}

// g'(z) expressed through z and g(z).
Eigen::VectorXd activation_derivative(Activation a, const Eigen::VectorXd& z) {
  switch (a) {
    case Activation::kRelu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kSigmoid: {
      const Eigen::ArrayXd s = 1.0 / (1.0 + (-z.array()).exp());
      return (s * (1.0 - s)).matrix();
    }
    case Activation::kTanh: {
      const Eigen::ArrayXd t = z.array().tanh();
      return (1.0 - t * t).matrix();
    }
  }
  return z;
}

void check_input(const MlpParams& params, std::size_t n) {
  if (n != params.arch.input_dim)
    throw DataError("input has " + std::to_string(n) + " features, network expects " +
                    std::to_string(params.arch.input_dim));
}

ForwardTrace run_forward(const MlpParams& params, std::span<const double> x, const DropoutKey* key) {
  check_input(params, x.size());
  const std::size_t L = params.layers.size();
  ForwardTrace t;
  t.act.reserve(L + 1);
  t.pre.reserve(L);
  Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  auto apply_dropout = [&](Eigen::VectorXd& v, std::size_t layer, double keep) {
    if (!key) return;
    Eigen::VectorXd m = Eigen::VectorXd::Ones(v.size());
    if (keep < 1.0)
      for (Eigen::Index k = 0; k < v.size(); ++k)
        m[k] = dropout_keep(*key, layer, static_cast<std::size_t>(k), keep) ? 1.0 / keep : 0.0;
    v.array() *= m.array();
    t.mask.push_back(std::move(m));
  };
  apply_dropout(h, 0, params.arch.input_keep);
  t.act.push_back(h);
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::VectorXd z = params.layers[l].w * t.act.back() + params.layers[l].b;
    t.pre.push_back(z);
    if (l + 1 == L) {
      const Probs p = softmax(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
      t.act.push_back(Eigen::Map<const Eigen::VectorXd>(p.data(), kNumStates));
    } else {
      Eigen::VectorXd a = activate(params.arch.activation, z);
      apply_dropout(a, l + 1, params.arch.hidden_keep(l));
      t.act.push_back(std::move(a));
    }
  }
  return t;
}

// Propagates an output-logit gradient back through the trace, filling parameter
// gradients (if requested) and returning the input gradient.
Eigen::VectorXd backprop(const MlpParams& params, const ForwardTrace& t, Eigen::VectorXd delta,
                         Gradients* grads) {
  const std::size_t L = params.layers.size();
  for (std::size_t l = L; l-- > 0;) {
    if (grads) {
      grads->layers[l].w.noalias() += delta * t.act[l].transpose();
      grads->layers[l].b += delta;
    }
    Eigen::VectorXd dh = params.layers[l].w.transpose() * delta;
    if (!t.mask.empty()) dh.array() *= t.mask[l].array();
    if (l == 0) return dh;
    delta = (dh.array() * activation_derivative(params.arch.activation, t.pre[l - 1]).array()).matrix();
  }
  return delta;
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("activation", "unknown activation '" + std::string(name) + "'");
}

std::vector<std::size_t> Architecture::widths() const {
  std::vector<std::size_t> w;
  w.push_back(input_dim);
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(kNumStates);
  return w;
}

void Architecture::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim", "must be >= 1");
  for (auto h : hidden)
    if (h < 1) throw ConfigError("hidden", "every hidden width must be >= 1");
  if (!keep_prob.empty() && keep_prob.size() != hidden.size())
    throw ConfigError("keep_prob", "needs one entry per hidden layer");
  for (double k : keep_prob)
    if (!(k > 0.0 && k <= 1.0)) throw ConfigError("keep_prob", "entries must lie in (0, 1]");
  if (!(input_keep > 0.0 && input_keep <= 1.0)) throw ConfigError("input_keep", "must lie in (0, 1]");
}

nlohmann::json Architecture::to_json() const {
  return {{"input_dim", input_dim},
          {"hidden", hidden},
          {"activation", std::string(to_string(activation))},
          {"keep_prob", keep_prob},
          {"input_keep", input_keep}};
}

Architecture Architecture::from_json(const nlohmann::json& j, std::size_t input_dim) {
  Architecture a;
  a.input_dim = j.value("input_dim", input_dim);
  try {
    if (j.contains("hidden")) {
      for (const auto& h : j["hidden"]) {
        if (!h.is_number_integer() || h.get<long long>() < 1) throw ConfigError("hidden", "widths must be integers >= 1");
        a.hidden.push_back(h.get<std::size_t>());
      }
    }
    a.activation = parse_activation(j.value("activation", std::string("relu")));
    if (j.contains("keep_prob")) {
      if (j["keep_prob"].is_number()) {
        a.keep_prob.assign(a.hidden.size(), j["keep_prob"].get<double>());
      } else {
        a.keep_prob = j["keep_prob"].get<std::vector<double>>();
      }
    }
    a.input_keep = j.value("input_keep", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("architecture", e.what());
  }
  a.validate();
  return a;
}

std::size_t MlpParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.w.size() + l.b.size());
  return n;
}

bool MlpParams::all_finite() const {
  for (const auto& l : layers)
    if (!l.w.allFinite() || !l.b.allFinite()) return false;
  return true;
}

double MlpParams::weight_sq_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.w.squaredNorm();
  return s;
}

Gradients Gradients::zeros_like(const MlpParams& p) {
  Gradients g;
  g.layers.reserve(p.layers.size());
  for (const auto& l : p.layers)
    g.layers.push_back({Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()), Eigen::VectorXd::Zero(l.b.size())});
  return g;
}

Gradients& Gradients::operator+=(const Gradients& other) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].w += other.layers[l].w;
    layers[l].b += other.layers[l].b;
  }
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (auto& l : layers) {
    l.w *= s;
    l.b *= s;
  }
  return *this;
}

std::vector<double> Gradients::flatten() const {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.w.data(), l.w.data() + l.w.size());
    out.insert(out.end(), l.b.data(), l.b.data() + l.b.size());
  }
  return out;
}

Probs softmax(std::span<const double> z) {
  if (z.size() != kNumStates) throw DataError("softmax expects 7 logits");
  const double m = *std::max_element(z.begin(), z.end());
  Probs p;
  double s = 0.0;
  for (int k = 0; k < kNumStates; ++k) {
    p[k] = std::exp(z[k] - m);
    s += p[k];
  }
  for (auto& v : p) v /= s;
  return p;
}

void softmax_rows(RowMatrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

MlpParams init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  MlpParams p;
  p.arch = arch;
  const auto w = arch.widths();
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const std::size_t fan_in = w[l];
    const bool hidden = l + 2 < w.size();
    const double gain = (hidden && arch.activation == Activation::kRelu) ? 2.0 : 1.0;
    std::mt19937_64 rng(derive_seed(seed, {0x1a7e5, l}));
    std::normal_distribution<double> normal(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    Layer layer{Eigen::MatrixXd(w[l + 1], fan_in), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(w[l + 1]))};
    for (Eigen::Index c = 0; c < layer.w.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.w.rows(); ++r) layer.w(r, c) = normal(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

bool dropout_keep(const DropoutKey& key, std::size_t layer, std::size_t unit, double keep) {
  if (keep >= 1.0) return true;
  return counter_uniform(key.step_seed, key.sample, layer, unit) < keep;
}

Probs forward(const MlpParams& params, std::span<const double> x) {
  const ForwardTrace t = run_forward(params, x, nullptr);
  Probs p;
  for (int k = 0; k < kNumStates; ++k) p[k] = t.probs()[k];
  return p;
}

ForwardTrace forward_trace(const MlpParams& params, std::span<const double> x) {
  return run_forward(params, x, nullptr);
}

ForwardTrace forward_train(const MlpParams& params, std::span<const double> x, const DropoutKey& key) {
  return run_forward(params, x, &key);
}

Eigen::VectorXd output_logits(const MlpParams& params, std::span<const double> x) {
  return run_forward(params, x, nullptr).pre.back();
}

Gradients backward(const MlpParams& params, const ForwardTrace& trace, State target, double l2_lambda,
                   bool penalize_biases) {
  if (trace.empty() || trace.pre.size() != params.layers.size())
    throw DataError("backward: missing or mismatched forward trace");
  Gradients g = Gradients::zeros_like(params);
  Eigen::VectorXd delta = trace.probs();
  delta[index_of(target)] -= 1.0;
  backprop(params, trace, std::move(delta), &g);
  if (l2_lambda != 0.0) {
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      g.layers[l].w += 2.0 * l2_lambda * params.layers[l].w;
      if (penalize_biases) g.layers[l].b += 2.0 * l2_lambda * params.layers[l].b;
    }
  }
  return g;
}

Eigen::VectorXd input_gradient(const MlpParams& params, std::span<const double> x, State v) {
  const ForwardTrace t = run_forward(params, x, nullptr);
  const Eigen::VectorXd& p = t.probs();
  Eigen::VectorXd delta = -p[index_of(v)] * p;
  delta[index_of(v)] += p[index_of(v)];
  return backprop(params, t, std::move(delta), nullptr);
}

void MlpModel::predict(MatrixRef x, RowMatrix& probs) const { kernels::batch_probs(*params_, x, probs); }

void MlpModel::logits(MatrixRef x, RowMatrix& z) const { kernels::batch_logits(*params_, x, z); }

void MlpModel::input_gradient(MatrixRef x, State v, RowMatrix& grad) const {
  kernels::batch_input_gradient(*params_, x, v, grad);
}

}  // namespace loanrisk
