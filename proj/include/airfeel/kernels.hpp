#pragma once

// Data-parallel inner loops. Every kernel exists twice: a plain serial loop in
// `serial::` that the tests treat as the reference, and an OpenMP version in
// `omp::`. The OpenMP versions reduce over fixed-size chunks and combine the
// partials in chunk order, so their results do not depend on the thread count.

#include <cstddef>
#include <functional>
#include <span>

#include "airfeel/common.hpp"

namespace airfeel {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace kernels {

inline constexpr Index kChunkRows = 1024;

/// First and second moments of per-sample ridge gradients x(x'w - t) + 2*ridge*w.
struct GradientMoments {
  Vector mean;     // per coordinate
  Vector sq_mean;  // per coordinate, E[g_i^2]
  Index count = 0;

  Vector stddev() const;
};

namespace serial {

GradientMoments sample_gradient_moments(const RowMatrix& x, const Vector& labels,
                                        const Vector& w, double ridge);

/// sum_{i in rows} x_i (x_i'w - t_i), without the ridge term.
Vector batch_gradient_sum(const RowMatrix& x, const Vector& labels,
                          std::span<const Index> rows, const Vector& w);

/// sum_i (x_i'w - t_i)^2
double squared_residual_sum(const RowMatrix& x, const Vector& labels, const Vector& w);

/// (X'X, X't) accumulated row by row.
void gram(const RowMatrix& x, const Vector& labels, Matrix& xtx, Vector& xty);

}  // namespace serial

namespace omp {

GradientMoments sample_gradient_moments(const RowMatrix& x, const Vector& labels,
                                        const Vector& w, double ridge);

Vector batch_gradient_sum(const RowMatrix& x, const Vector& labels,
                          std::span<const Index> rows, const Vector& w);

double squared_residual_sum(const RowMatrix& x, const Vector& labels, const Vector& w);

void gram(const RowMatrix& x, const Vector& labels, Matrix& xtx, Vector& xty);

}  // namespace omp

/// Number of OpenMP threads that parallel regions will use (1 without OpenMP).
int max_threads();

/// Set the thread count for subsequent parallel regions; 0 keeps the runtime default.
void set_threads(int threads);

/// Run body(i) for i in [0, count) across threads. Each index is visited once;
/// callers write results into per-index slots so the outcome is order free.
void parallel_for(Index count, const std::function<void(Index)>& body);

/// Serial counterpart of parallel_for, kept for equivalence tests.
void serial_for(Index count, const std::function<void(Index)>& body);

}  // namespace kernels
}  // namespace airfeel
