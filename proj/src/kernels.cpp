#include "airfeel/kernels.hpp"

#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace airfeel::kernels {

Vector GradientMoments::stddev() const {
  return (sq_mean - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
}

namespace {

Index chunk_count(Index rows) { return (rows + kChunkRows - 1) / kChunkRows; }

}  // namespace

namespace serial {

GradientMoments sample_gradient_moments(const RowMatrix& x, const Vector& labels,
                                        const Vector& w, double ridge) {
  const Index q = x.cols();
  GradientMoments m{Vector::Zero(q), Vector::Zero(q), x.rows()};
  Vector g(q);
  for (Index i = 0; i < x.rows(); ++i) {
    const double r = x.row(i).dot(w) - labels[i];
    g = r * x.row(i).transpose() + 2.0 * ridge * w;
    m.mean += g;
    m.sq_mean += g.cwiseProduct(g);
  }
  if (m.count > 0) {
    m.mean /= static_cast<double>(m.count);
    m.sq_mean /= static_cast<double>(m.count);
  }
  return m;
}

Vector batch_gradient_sum(const RowMatrix& x, const Vector& labels,
                          std::span<const Index> rows, const Vector& w) {
  Vector sum = Vector::Zero(x.cols());
  for (Index i : rows) {
    const double r = x.row(i).dot(w) - labels[i];
    sum += r * x.row(i).transpose();
  }
  return sum;
}

double squared_residual_sum(const RowMatrix& x, const Vector& labels, const Vector& w) {
  double s = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const double r = x.row(i).dot(w) - labels[i];
    s += r * r;
  }
  return s;
}

void gram(const RowMatrix& x, const Vector& labels, Matrix& xtx, Vector& xty) {
  const Index q = x.cols();
  xtx = Matrix::Zero(q, q);
  xty = Vector::Zero(q);
  for (Index i = 0; i < x.rows(); ++i) {
    const auto xi = x.row(i).transpose();
    xtx.noalias() += xi * xi.transpose();
    xty += labels[i] * xi;
  }
}

}  // namespace serial

namespace omp {

GradientMoments sample_gradient_moments(const RowMatrix& x, const Vector& labels,
                                        const Vector& w, double ridge) {
  const Index q = x.cols();
  const Index chunks = chunk_count(x.rows());
  std::vector<Vector> sums(chunks, Vector::Zero(q));
  std::vector<Vector> squares(chunks, Vector::Zero(q));
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < chunks; ++c) {
    const Index end = std::min(x.rows(), (c + 1) * kChunkRows);
    Vector g(q);
    for (Index i = c * kChunkRows; i < end; ++i) {
      const double r = x.row(i).dot(w) - labels[i];
      g = r * x.row(i).transpose() + 2.0 * ridge * w;
      sums[c] += g;
      squares[c] += g.cwiseProduct(g);
    }
  }
  GradientMoments m{Vector::Zero(q), Vector::Zero(q), x.rows()};
  for (Index c = 0; c < chunks; ++c) {
    m.mean += sums[c];
    m.sq_mean += squares[c];
  }
  if (m.count > 0) {
    m.mean /= static_cast<double>(m.count);
    m.sq_mean /= static_cast<double>(m.count);
  }
  return m;
}

Vector batch_gradient_sum(const RowMatrix& x, const Vector& labels,
                          std::span<const Index> rows, const Vector& w) {
  const Index n = static_cast<Index>(rows.size());
  const Index chunks = chunk_count(n);
  std::vector<Vector> sums(chunks, Vector::Zero(x.cols()));
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < chunks; ++c) {
    const Index end = std::min(n, (c + 1) * kChunkRows);
    for (Index j = c * kChunkRows; j < end; ++j) {
      const Index i = rows[j];
      const double r = x.row(i).dot(w) - labels[i];
      sums[c] += r * x.row(i).transpose();
    }
  }
  Vector sum = Vector::Zero(x.cols());
  for (const auto& s : sums) sum += s;
  return sum;
}

double squared_residual_sum(const RowMatrix& x, const Vector& labels, const Vector& w) {
  const Index chunks = chunk_count(x.rows());
  std::vector<double> sums(chunks, 0.0);
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < chunks; ++c) {
    const Index end = std::min(x.rows(), (c + 1) * kChunkRows);
    double s = 0.0;
    for (Index i = c * kChunkRows; i < end; ++i) {
      const double r = x.row(i).dot(w) - labels[i];
      s += r * r;
    }
    sums[c] = s;
  }
  double total = 0.0;
  for (double s : sums) total += s;
  return total;
}

void gram(const RowMatrix& x, const Vector& labels, Matrix& xtx, Vector& xty) {
  const Index q = x.cols();
  const Index chunks = chunk_count(x.rows());
  std::vector<Matrix> grams(chunks, Matrix::Zero(q, q));
  std::vector<Vector> moments(chunks, Vector::Zero(q));
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < chunks; ++c) {
    const Index begin = c * kChunkRows;
    const Index rows = std::min(x.rows(), begin + kChunkRows) - begin;
    const auto block = x.middleRows(begin, rows);
    grams[c].noalias() = block.transpose() * block;
    moments[c].noalias() = block.transpose() * labels.segment(begin, rows);
  }
  xtx = Matrix::Zero(q, q);
  xty = Vector::Zero(q);
  for (Index c = 0; c < chunks; ++c) {
    xtx += grams[c];
    xty += moments[c];
  }
}

}  // namespace omp

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

void parallel_for(Index count, const std::function<void(Index)>& body) {
#pragma omp parallel for schedule(dynamic, 1)
  for (Index i = 0; i < count; ++i) body(i);
}

void serial_for(Index count, const std::function<void(Index)>& body) {
  for (Index i = 0; i < count; ++i) body(i);
}

}  // namespace airfeel::kernels
