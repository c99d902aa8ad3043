#pragma once

// Data-parallel batch kernels for the transition network. Each parallel kernel has a
// serial per-sample reference that shares no code with the blocked GEMM path; tests
// and the benchmark compare the two.
//
// Work is split into fixed-size row chunks, so results do not depend on the number of
// OpenMP threads. Reductions (gradients, losses) sum chunk partials in chunk order.

#include <cstdint>
#include <optional>
#include <span>

#include "loanrisk/dataset.hpp"
#include "loanrisk/network.hpp"

namespace loanrisk::kernels {

inline constexpr Eigen::Index kChunkRows = 128;

/// Caps OpenMP workers (0 = runtime default).
void set_worker_threads(int n);
int worker_threads();

/// Calls f(chunk_index, first_row, rows) for every chunk of [0, n), in parallel.
template <class F>
void for_each_chunk(Eigen::Index n, Eigen::Index chunk, F&& f) {
  const Eigen::Index nchunks = (n + chunk - 1) / chunk;
#pragma omp parallel for schedule(dynamic, 1)
  for (Eigen::Index c = 0; c < nchunks; ++c) {
    const Eigen::Index first = c * chunk;
    f(c, first, std::min(chunk, n - first));
  }
}

void batch_probs(const MlpParams& params, MatrixRef x, RowMatrix& probs);
void batch_probs_serial(const MlpParams& params, MatrixRef x, RowMatrix& probs);

void batch_logits(const MlpParams& params, MatrixRef x, RowMatrix& z);

/// Row i = d h(v, x_i) / d x_i.
void batch_input_gradient(const MlpParams& params, MatrixRef x, State v, RowMatrix& grad);
void batch_input_gradient_serial(const MlpParams& params, MatrixRef x, State v, RowMatrix& grad);

/// Sums over a minibatch of the per-sample negative log-likelihood and its gradient.
/// No penalty term is included.
struct BatchGradient {
  Gradients grad;
  double loss_sum = 0.0;
  std::size_t count = 0;
  /// Samples whose target probability fell below the 1e-300 floor.
  std::size_t underflows = 0;
};

/// When `dropout_seed` is set, sample i uses DropoutKey{*dropout_seed, i}.
BatchGradient batch_gradient(const MlpParams& params, MatrixRef x, std::span<const State> targets,
                             std::optional<std::uint64_t> dropout_seed = std::nullopt);
BatchGradient batch_gradient_serial(const MlpParams& params, MatrixRef x, std::span<const State> targets,
                                    std::optional<std::uint64_t> dropout_seed = std::nullopt);

/// Sum of -log p(target) (floored at 1e-300) over rows of a probability matrix.
struct LossSum {
  double sum = 0.0;
  std::size_t underflows = 0;
};
LossSum nll_sum(const RowMatrix& probs, std::span<const State> targets);

}  // namespace loanrisk::kernels
