#include "loanrisk/kernels.hpp"

#include <cmath>
#include <vector>

#include <omp.h>

#include "loanrisk/errors.hpp"

namespace loanrisk::kernels {
namespace {

constexpr double kProbFloor = 1e-300;

// tanh through the vectorized exp; Eigen's double tanh is scalar.
Eigen::ArrayXXd fast_tanh(const Eigen::ArrayXXd& z) { return 1.0 - 2.0 / ((2.0 * z).exp() + 1.0); }

void activate_inplace(Activation a, RowMatrix& z) {
  switch (a) {
    case Activation::kRelu: z = z.cwiseMax(0.0); break;
    case Activation::kSigmoid: z = (1.0 / (1.0 + (-z.array()).exp())).matrix(); break;
    case Activation::kTanh: z = fast_tanh(z.array()).matrix(); break;
  }
}

RowMatrix activation_derivative(Activation a, const RowMatrix& z) {
  switch (a) {
    case Activation::kRelu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kSigmoid: {
      const Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
      return (s * (1.0 - s)).matrix();
    }
    case Activation::kTanh: {
      const Eigen::ArrayXXd t = fast_tanh(z.array());
      return (1.0 - t * t).matrix();
    }
  }
  return z;
}

// Per-block activations for the blocked backward pass.
struct BlockTrace {
  std::vector<RowMatrix> act;   // act[0] = input block, act[l] = layer l output (masked)
  std::vector<RowMatrix> pre;   // pre[l] = layer l+1 pre-activation
  std::vector<RowMatrix> mask;  // empty when no dropout
};

RowMatrix dropout_mask(const DropoutKey& base, Eigen::Index first_row, Eigen::Index rows, Eigen::Index cols,
                       std::size_t layer, double keep) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const DropoutKey key{base.step_seed, static_cast<std::uint64_t>(first_row + i)};
    for (Eigen::Index k = 0; k < cols; ++k)
      m(i, k) = dropout_keep(key, layer, static_cast<std::size_t>(k), keep) ? 1.0 / keep : 0.0;
  }
  return m;
}

// Forward over rows [first, first + rows). Returns logits when `want_logits`.
BlockTrace block_forward(const MlpParams& params, MatrixRef x, Eigen::Index first, Eigen::Index rows,
                         std::optional<std::uint64_t> dropout_seed, bool keep_trace, bool want_logits) {
  const std::size_t L = params.layers.size();
  BlockTrace t;
  RowMatrix h = x.middleRows(first, rows);
  const DropoutKey key{dropout_seed.value_or(0), 0};
  auto maybe_drop = [&](RowMatrix& a, std::size_t layer, double keep) {
    if (!dropout_seed) return;
    RowMatrix m = keep < 1.0 ? dropout_mask(key, first, rows, a.cols(), layer, keep)
                             : RowMatrix::Ones(rows, a.cols());
    a.array() *= m.array();
    t.mask.push_back(std::move(m));
  };
  maybe_drop(h, 0, params.arch.input_keep);
  for (std::size_t l = 0; l < L; ++l) {
    RowMatrix z = h * params.layers[l].w.transpose();
    z.rowwise() += params.layers[l].b.transpose();
    if (keep_trace) {
      t.act.push_back(std::move(h));
      t.pre.push_back(z);
    }
    if (l + 1 == L) {
      if (!want_logits) softmax_rows(z);
      h = std::move(z);
    } else {
      activate_inplace(params.arch.activation, z);
      maybe_drop(z, l + 1, params.arch.hidden_keep(l));
      h = std::move(z);
    }
  }
  t.act.push_back(std::move(h));
  return t;
}

// Backpropagates output-logit gradients `delta` through a block trace.
RowMatrix block_backward(const MlpParams& params, const BlockTrace& t, RowMatrix delta, Gradients* g) {
  const std::size_t L = params.layers.size();
  for (std::size_t l = L; l-- > 0;) {
    if (g) {
      g->layers[l].w.noalias() += delta.transpose() * t.act[l];
      g->layers[l].b += delta.colwise().sum().transpose();
    }
    RowMatrix dh = delta * params.layers[l].w;
    if (!t.mask.empty()) dh.array() *= t.mask[l].array();
    if (l == 0) return dh;
    delta = (dh.array() * activation_derivative(params.arch.activation, t.pre[l - 1]).array()).matrix();
  }
  return delta;
}

void check_dim(const MlpParams& params, MatrixRef x) {
  if (static_cast<std::size_t>(x.cols()) != params.arch.input_dim)
    throw DataError("batch has " + std::to_string(x.cols()) + " columns, network expects " +
                    std::to_string(params.arch.input_dim));
}

}  // namespace

void set_worker_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int worker_threads() { return omp_get_max_threads(); }

void batch_probs(const MlpParams& params, MatrixRef x, RowMatrix& probs) {
  check_dim(params, x);
  probs.resize(x.rows(), kNumStates);
  for_each_chunk(x.rows(), kChunkRows, [&](Eigen::Index, Eigen::Index first, Eigen::Index rows) {
    probs.middleRows(first, rows) = block_forward(params, x, first, rows, std::nullopt, false, false).act.back();
  });
}

void batch_probs_serial(const MlpParams& params, MatrixRef x, RowMatrix& probs) {
  check_dim(params, x);
  probs.resize(x.rows(), kNumStates);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowMatrix row = x.row(i);
    const Probs p = forward(params, std::span<const double>(row.data(), static_cast<std::size_t>(row.cols())));
    for (int k = 0; k < kNumStates; ++k) probs(i, k) = p[k];
  }
}

void batch_logits(const MlpParams& params, MatrixRef x, RowMatrix& z) {
  check_dim(params, x);
  z.resize(x.rows(), kNumStates);
  for_each_chunk(x.rows(), kChunkRows, [&](Eigen::Index, Eigen::Index first, Eigen::Index rows) {
    z.middleRows(first, rows) = block_forward(params, x, first, rows, std::nullopt, false, true).act.back();
  });
}

void batch_input_gradient(const MlpParams& params, MatrixRef x, State v, RowMatrix& grad) {
  check_dim(params, x);
  grad.resize(x.rows(), x.cols());
  const int vi = index_of(v);
  for_each_chunk(x.rows(), kChunkRows, [&](Eigen::Index, Eigen::Index first, Eigen::Index rows) {
    BlockTrace t = block_forward(params, x, first, rows, std::nullopt, true, false);
    const RowMatrix& p = t.act.back();
    // d p_v / d z = p_v (e_v - p)
    RowMatrix delta = -(p.array().colwise() * p.col(vi).array()).matrix();
    delta.col(vi) += p.col(vi);
    grad.middleRows(first, rows) = block_backward(params, t, std::move(delta), nullptr);
  });
}

void batch_input_gradient_serial(const MlpParams& params, MatrixRef x, State v, RowMatrix& grad) {
  check_dim(params, x);
  grad.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowMatrix row = x.row(i);
    grad.row(i) = input_gradient(params, std::span<const double>(row.data(), static_cast<std::size_t>(row.cols())), v)
                      .transpose();
  }
}

BatchGradient batch_gradient(const MlpParams& params, MatrixRef x, std::span<const State> targets,
                             std::optional<std::uint64_t> dropout_seed) {
  check_dim(params, x);
  if (targets.size() != static_cast<std::size_t>(x.rows())) throw DataError("batch_gradient: target count mismatch");
  const Eigen::Index n = x.rows();
  const Eigen::Index nchunks = (n + kChunkRows - 1) / kChunkRows;
  std::vector<BatchGradient> partial(static_cast<std::size_t>(nchunks));
  for_each_chunk(n, kChunkRows, [&](Eigen::Index c, Eigen::Index first, Eigen::Index rows) {
    BatchGradient& out = partial[static_cast<std::size_t>(c)];
    out.grad = Gradients::zeros_like(params);
    BlockTrace t = block_forward(params, x, first, rows, dropout_seed, true, false);
    RowMatrix delta = t.act.back();
    for (Eigen::Index i = 0; i < rows; ++i) {
      const int target = index_of(targets[static_cast<std::size_t>(first + i)]);
      const double p = delta(i, target);
      if (p < kProbFloor) ++out.underflows;
      out.loss_sum -= std::log(std::max(p, kProbFloor));
      delta(i, target) -= 1.0;
    }
    out.count = static_cast<std::size_t>(rows);
    block_backward(params, t, std::move(delta), &out.grad);
  });
  BatchGradient total;
  total.grad = Gradients::zeros_like(params);
  for (const auto& p : partial) {
    total.grad += p.grad;
    total.loss_sum += p.loss_sum;
    total.count += p.count;
    total.underflows += p.underflows;
  }
  return total;
}

BatchGradient batch_gradient_serial(const MlpParams& params, MatrixRef x, std::span<const State> targets,
                                    std::optional<std::uint64_t> dropout_seed) {
  check_dim(params, x);
  if (targets.size() != static_cast<std::size_t>(x.rows())) throw DataError("batch_gradient: target count mismatch");
  BatchGradient total;
  total.grad = Gradients::zeros_like(params);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowMatrix row = x.row(i);
    const std::span<const double> xs(row.data(), static_cast<std::size_t>(row.cols()));
    const ForwardTrace t = dropout_seed
                               ? forward_train(params, xs, DropoutKey{*dropout_seed, static_cast<std::uint64_t>(i)})
                               : forward_trace(params, xs);
    const double p = t.probs()[index_of(targets[static_cast<std::size_t>(i)])];
    if (p < kProbFloor) ++total.underflows;
    total.loss_sum -= std::log(std::max(p, kProbFloor));
    total.grad += backward(params, t, targets[static_cast<std::size_t>(i)], 0.0);
    ++total.count;
  }
  return total;
}

LossSum nll_sum(const RowMatrix& probs, std::span<const State> targets) {
  LossSum out;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double p = probs(i, index_of(targets[static_cast<std::size_t>(i)]));
    if (p < kProbFloor) ++out.underflows;
    out.sum -= std::log(std::max(p, kProbFloor));
  }
  return out;
}

}  // namespace loanrisk::kernels
