#pragma once

// Feedforward softmax transition network: h_0 = x, h_l = g_l(W_l h_{l-1} + b_l),
// hidden g_l an elementwise activation and the output layer a 7-way softmax.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loanrisk/core.hpp"
#include "loanrisk/dataset.hpp"

namespace loanrisk {

enum class Activation { kRelu, kSigmoid, kTanh };

std::string_view to_string(Activation a);
/// Throws ConfigError for unknown names.
Activation parse_activation(std::string_view name);

struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  Activation activation = Activation::kRelu;
  /// Keep probability per hidden layer (empty means 1 everywhere).
  std::vector<double> keep_prob;
  double input_keep = 1.0;

  std::size_t num_layers() const { return hidden.size() + 1; }
  /// d_0 .. d_L, with d_L = 7.
  std::vector<std::size_t> widths() const;
  double hidden_keep(std::size_t layer) const { return keep_prob.empty() ? 1.0 : keep_prob.at(layer); }
  /// Throws ConfigError naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j, std::size_t input_dim);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Layer {
  Eigen::MatrixXd w;  // d_l x d_{l-1}
  Eigen::VectorXd b;  // d_l
};

struct MlpParams {
  Architecture arch;
  std::vector<Layer> layers;

  std::size_t num_parameters() const;
  bool all_finite() const;
  double weight_sq_norm() const;
};

/// Gradient with the same shapes as MlpParams::layers.
struct Gradients {
  std::vector<Layer> layers;

  static Gradients zeros_like(const MlpParams& p);
  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
  /// Flattened W_1, b_1, W_2, ... (column-major within each W).
  std::vector<double> flatten() const;
};

/// Stable softmax (max subtracted before exponentiation).
Probs softmax(std::span<const double> z);
/// Row-wise softmax in place.
void softmax_rows(RowMatrix& z);

/// He (relu) or Xavier-style (sigmoid/tanh) normal initialization with zero biases.
MlpParams init_params(const Architecture& arch, std::uint64_t seed);

/// Identifies the dropout masks of one sample in one training step.
struct DropoutKey {
  std::uint64_t step_seed = 0;
  std::uint64_t sample = 0;
};

/// Whether unit `unit` of layer `layer` (0 = input) survives for this key.
bool dropout_keep(const DropoutKey& key, std::size_t layer, std::size_t unit, double keep);

struct ForwardTrace {
  /// act[0] = x (after input dropout); act[l] = output of layer l; act[L] = probabilities.
  std::vector<Eigen::VectorXd> act;
  /// pre[l-1] = W_l act[l-1] + b_l.
  std::vector<Eigen::VectorXd> pre;
  /// Inverted-dropout multipliers per layer 0..L-1 (0 or 1/keep); empty in infer mode.
  std::vector<Eigen::VectorXd> mask;

  bool empty() const { return act.empty(); }
  const Eigen::VectorXd& probs() const { return act.back(); }
};

/// Deterministic inference. Throws DataError on dimension mismatch.
Probs forward(const MlpParams& params, std::span<const double> x);
/// Inference with the full trace retained.
ForwardTrace forward_trace(const MlpParams& params, std::span<const double> x);
/// Training-mode forward with inverted dropout (survivors scaled by 1/keep).
ForwardTrace forward_train(const MlpParams& params, std::span<const double> x, const DropoutKey& key);
/// Pre-softmax outputs.
Eigen::VectorXd output_logits(const MlpParams& params, std::span<const double> x);

/// Gradient of  -log h(target, x) + lambda * sum of squared weights  (biases too when
/// `penalize_biases`). Throws DataError when the trace is empty.
Gradients backward(const MlpParams& params, const ForwardTrace& trace, State target, double l2_lambda,
                   bool penalize_biases = false);

/// d h(v, x) / dx by reverse mode, inference mode.
Eigen::VectorXd input_gradient(const MlpParams& params, std::span<const double> x, State v);

/// Non-owning TransitionModel view of a parameter set; batch paths use the parallel kernels.
class MlpModel final : public TransitionModel {
 public:
  explicit MlpModel(const MlpParams& params) : params_(&params) {}
  MlpModel(MlpParams&&) = delete;
  std::size_t input_dim() const override { return params_->arch.input_dim; }
  void predict(MatrixRef x, RowMatrix& probs) const override;
  void logits(MatrixRef x, RowMatrix& z) const override;
  bool has_input_gradient() const override { return true; }
  void input_gradient(MatrixRef x, State v, RowMatrix& grad) const override;
  const MlpParams& params() const { return *params_; }

 private:
  const MlpParams* params_;
};

}  // namespace loanrisk
