#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "airfeel/kernels.hpp"
#include "airfeel/model.hpp"

using namespace airfeel;

namespace {

Dataset two_point() {
  RowMatrix x(2, 2);
  x << 1, 0, 0, 1;
  Vector t(2);
  t << 1, 2;
  return make_dataset(x, t, {0, 0}, 0.0);
}

// Loss summed one sample at a time, no shared code with the library.
double loss_oracle(const Vector& w, const Dataset& ds) {
  double s = 0.0;
  for (Index i = 0; i < ds.size(); ++i) {
    double r = -ds.labels[i];
    for (Index j = 0; j < ds.dimension(); ++j) r += ds.features(i, j) * w[j];
    s += 0.5 * r * r;
  }
  return s / ds.size() + ds.ridge * w.squaredNorm();
}

Vector random_vector(Rng& rng, Index n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

TEST(Dataset, DefaultShape) {
  Dataset ds = generate_dataset(7, 10, 1000, 10, 0.2, 5e-5);
  EXPECT_EQ(ds.size(), 10000);
  EXPECT_EQ(ds.devices(), 10);
  EXPECT_EQ(ds.samples_per_device(), 1000);
  std::set<Index> seen;
  for (const auto& rows : ds.partition) seen.insert(rows.begin(), rows.end());
  EXPECT_EQ(static_cast<Index>(seen.size()), ds.size());
}

TEST(Dataset, Deterministic) {
  Dataset a = generate_dataset(11, 3, 50, 6, 0.2, 1e-3);
  Dataset b = generate_dataset(11, 3, 50, 6, 0.2, 1e-3);
  EXPECT_TRUE((a.features.array() == b.features.array()).all());
  EXPECT_TRUE((a.labels.array() == b.labels.array()).all());
}

TEST(Dataset, NoiselessLabels) {
  Dataset ds = generate_dataset(7, 1, 4, 5, 0.0, 0.0);
  for (Index i = 0; i < 4; ++i) {
    EXPECT_EQ(ds.labels[i], ds.features(i, 1) + 3.0 * ds.features(i, 4));
  }
}

TEST(Dataset, RejectsSmallDimension) {
  EXPECT_THROW(generate_dataset(1, 2, 3, 4, 0.1, 0.0), InvalidArgument);
}

TEST(Dataset, RejectsUnevenPartition) {
  RowMatrix x = RowMatrix::Ones(3, 2);
  EXPECT_THROW(make_dataset(x, Vector::Ones(3), {0, 0, 1}, 0.0), InvalidArgument);
}

TEST(Loss, ZeroLabelsZeroWeights) {
  Dataset ds = generate_dataset(3, 2, 5, 5, 0.1, 0.01);
  ds.labels.setZero();
  ds = make_dataset(ds.features, ds.labels, std::vector<Index>(10, 0), 0.01);
  EXPECT_DOUBLE_EQ(global_loss(Vector::Zero(5), ds), 0.0);
}

TEST(Loss, Interpolation) {
  Dataset ds = two_point();
  Vector w(2);
  w << 1, 2;
  EXPECT_NEAR(global_loss(w, ds), 0.0, 1e-15);
}

TEST(Loss, MatchesPerSampleSum) {
  Dataset ds = generate_dataset(5, 1, 5, 7, 0.3, 0.2);
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    Vector w = random_vector(rng, 7);
    const double ref = loss_oracle(w, ds);
    EXPECT_NEAR(global_loss(w, ds), ref, 1e-12 * std::max(1.0, ref));
    EXPECT_NEAR(global_loss_direct(w, ds), ref, 1e-12 * std::max(1.0, ref));
  }
}

TEST(Loss, DimensionMismatch) {
  Dataset ds = generate_dataset(5, 1, 5, 7, 0.3, 0.2);
  EXPECT_THROW(global_loss(Vector::Zero(3), ds), InvalidArgument);
}

TEST(Gradient, FullBatchAverageIsFullGradient) {
  Dataset ds = generate_dataset(9, 4, 25, 6, 0.2, 0.01);
  Rng rng(2);
  Vector w = random_vector(rng, 6);
  std::vector<Index> all(25);
  for (Index j = 0; j < 25; ++j) all[j] = j;
  Vector avg = Vector::Zero(6);
  for (Index k = 0; k < 4; ++k) avg += local_gradient(w, ds, k, all);
  avg /= 4.0;
  EXPECT_LT((avg - full_gradient(w, ds)).norm(), 1e-12);
}

TEST(Gradient, FiniteDifferences) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    Dataset ds = generate_dataset(100 + t, 2, 10, 5, 0.2, 0.05);
    Vector w = random_vector(rng, 5);
    Vector dir = random_vector(rng, 5).normalized();
    const double h = 1e-6;
    const double fd = (loss_oracle(w + h * dir, ds) - loss_oracle(w - h * dir, ds)) / (2 * h);
    const double an = full_gradient(w, ds).dot(dir);
    EXPECT_NEAR(fd, an, 1e-6 * std::max(1.0, std::abs(an)));
  }
}

TEST(Gradient, EmptyBatchRejected) {
  Dataset ds = generate_dataset(9, 2, 5, 5, 0.2, 0.01);
  EXPECT_THROW(local_gradient(Vector::Zero(5), ds, 0, {}), InvalidArgument);
}

TEST(Gradient, MiniBatchUnbiased) {
  Dataset ds = generate_dataset(21, 2, 40, 5, 0.2, 0.01);
  Rng rng(4);
  Vector w = random_vector(rng, 5);
  BatchSampler sampler(2, 40);
  const int draws = 10000;
  Vector sum = Vector::Zero(5), sq = Vector::Zero(5);
  for (int t = 0; t < draws; ++t) {
    Vector g = Vector::Zero(5);
    for (Index k = 0; k < 2; ++k) g += local_gradient(w, ds, k, sampler.draw(k, 8, rng));
    g /= 2.0;
    sum += g;
    sq += g.cwiseProduct(g);
  }
  const Vector mean = sum / draws;
  const Vector se = ((sq / draws - mean.cwiseProduct(mean)) / draws).cwiseSqrt();
  const Vector exact = full_gradient(w, ds);
  for (Index j = 0; j < 5; ++j) EXPECT_LT(std::abs(mean[j] - exact[j]), 4 * se[j]) << j;
}

TEST(BatchSampler, DistinctPositions) {
  BatchSampler s(1, 30);
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto b = s.draw(0, 12, rng);
    std::set<Index> u(b.begin(), b.end());
    EXPECT_EQ(u.size(), 12u);
    for (Index j : b) EXPECT_TRUE(j >= 0 && j < 30);
  }
  auto full = s.draw(0, 30, rng);
  for (Index j = 0; j < 30; ++j) EXPECT_EQ(full[j], j);
}

TEST(Optimum, Interpolation) {
  OptimalModel opt = optimal_model(two_point());
  EXPECT_NEAR(opt.w[0], 1.0, 1e-14);
  EXPECT_NEAR(opt.w[1], 2.0, 1e-14);
  EXPECT_NEAR(opt.loss, 0.0, 1e-15);
  EXPECT_EQ(opt.convention, NormalConvention::Literal);
}

TEST(Optimum, Stationary) {
  Dataset ds = generate_dataset(17, 2, 10, 6, 0.2, 5e-5);
  OptimalModel opt = optimal_model(ds);
  EXPECT_LT(full_gradient(opt.w, ds).norm(), 1e-8);
  EXPECT_LE(opt.loss, global_loss(Vector::Zero(6), ds));
  // with a ridge term the printed closed form is not stationary for the averaged loss
  EXPECT_EQ(opt.convention, NormalConvention::Stationary);
}

TEST(Optimum, SingularRejected) {
  RowMatrix x = RowMatrix::Zero(2, 5);
  EXPECT_THROW(optimal_model(make_dataset(x, Vector::Ones(2), {0, 0}, 0.0)), InvalidArgument);
}

TEST(Optimum, GapIsLossDifference) {
  Dataset ds = generate_dataset(18, 3, 20, 6, 0.2, 5e-5);
  OptimalModel opt = optimal_model(ds);
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    Vector w = random_vector(rng, 6);
    EXPECT_NEAR(optimality_gap(w, ds, opt), loss_oracle(w, ds) - opt.loss, 1e-11);
  }
}

TEST(Constants, IdentitySamples) {
  const Index q = 6;
  RowMatrix x = RowMatrix::Identity(q, q);
  Dataset ds = make_dataset(x, Vector::Ones(q), std::vector<Index>(q, 0), 0.0);
  LearningConstants lc = learning_constants(ds);
  EXPECT_NEAR(lc.L, 1.0 / q + 1e-4, 1e-15);
  EXPECT_NEAR(lc.delta, 1.0 / q + 1e-4, 1e-15);
}

TEST(Constants, ConditionNumberMatchesSvd) {
  Dataset ds = generate_dataset(19, 3, 30, 8, 0.2, 5e-5);
  LearningConstants lc = learning_constants(ds);
  Matrix x = ds.features;
  Matrix gramian = x.transpose() * x / static_cast<double>(ds.size()) +
                   1e-4 * Matrix::Identity(8, 8);
  Eigen::JacobiSVD<Matrix> svd(gramian);
  const auto sv = svd.singularValues();
  EXPECT_NEAR(lc.L / lc.delta, sv[0] / sv[sv.size() - 1], 1e-9 * sv[0] / sv[sv.size() - 1]);
  EXPECT_GE(lc.L, lc.delta);
}

TEST(Constants, SigmaVanishesAtInterpolatingOptimum) {
  Dataset ds = generate_dataset(23, 2, 20, 5, 0.0, 0.0);
  OptimalModel opt = optimal_model(ds);
  LearningOptions o;
  o.w_init = opt.w;
  LearningConstants lc = learning_constants(ds, opt, o);
  EXPECT_LT(lc.sigma.maxCoeff(), 1e-10);
}

TEST(Constants, WPolicy) {
  Dataset ds = generate_dataset(24, 2, 20, 5, 0.2, 5e-5);
  OptimalModel opt = optimal_model(ds);
  LearningOptions o;
  o.W_factor = 2.0;
  EXPECT_NEAR(learning_constants(ds, opt, o).W, 2.0 * opt.w.norm(), 1e-14);
  o.W = 3.5;
  EXPECT_EQ(learning_constants(ds, opt, o).W, 3.5);
}

TEST(Properties, PolyakLojasiewicz) {
  Dataset ds = generate_dataset(25, 4, 50, 10, 0.2, 5e-5);
  OptimalModel opt = optimal_model(ds);
  LearningConstants lc = learning_constants(ds, opt);
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    Vector w = random_vector(rng, 10, 3.0);
    const double g = full_gradient(w, ds).squaredNorm();
    EXPECT_LE(2.0 * lc.delta * optimality_gap(w, ds, opt), g * (1 + 1e-12));
  }
}

TEST(Properties, Smoothness) {
  Dataset ds = generate_dataset(26, 4, 50, 10, 0.2, 5e-5);
  LearningConstants lc = learning_constants(ds);
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    Vector w = random_vector(rng, 10, 3.0), v = random_vector(rng, 10, 3.0);
    const double rhs = global_loss(w, ds) + full_gradient(w, ds).dot(v - w) +
                       0.5 * lc.L * (v - w).squaredNorm();
    EXPECT_LE(global_loss(v, ds), rhs + 1e-12 * std::abs(rhs));
  }
}

TEST(DatasetIo, RoundTrip) {
  Dataset ds = generate_dataset(27, 3, 4, 5, 0.2, 5e-5);
  const auto path = std::filesystem::temp_directory_path() / "airfeel_ds_roundtrip.csv";
  export_dataset(ds, path.string());
  Dataset back = import_dataset(path.string());
  std::filesystem::remove(path);
  EXPECT_TRUE((back.features.array() == ds.features.array()).all());
  EXPECT_TRUE((back.labels.array() == ds.labels.array()).all());
  EXPECT_EQ(back.partition, ds.partition);
  EXPECT_EQ(back.ridge, ds.ridge);
}

TEST(DatasetIo, UnreadablePath) {
  EXPECT_THROW(import_dataset("/nonexistent/dir/x.csv"), IoError);
}

TEST(Kernels, ParallelMatchesSerial) {
  Dataset ds = generate_dataset(28, 5, 700, 10, 0.2, 5e-5);
  Rng rng(9);
  Vector w = random_vector(rng, 10);
  auto a = kernels::serial::sample_gradient_moments(ds.features, ds.labels, w, ds.ridge);
  auto b = kernels::omp::sample_gradient_moments(ds.features, ds.labels, w, ds.ridge);
  EXPECT_LT((a.mean - b.mean).norm(), 1e-12 * a.mean.norm() + 1e-14);
  EXPECT_LT((a.sq_mean - b.sq_mean).norm(), 1e-12 * a.sq_mean.norm());
  const double sa = kernels::serial::squared_residual_sum(ds.features, ds.labels, w);
  const double sb = kernels::omp::squared_residual_sum(ds.features, ds.labels, w);
  EXPECT_NEAR(sa, sb, 1e-12 * sa);
  Matrix ga, gb;
  Vector ma, mb;
  kernels::serial::gram(ds.features, ds.labels, ga, ma);
  kernels::omp::gram(ds.features, ds.labels, gb, mb);
  EXPECT_LT((ga - gb).norm(), 1e-10 * ga.norm());
  EXPECT_LT((ma - mb).norm(), 1e-10 * ma.norm());
  std::vector<Index> rows(ds.size());
  for (Index i = 0; i < ds.size(); ++i) rows[i] = i;
  Vector ba = kernels::serial::batch_gradient_sum(ds.features, ds.labels, rows, w);
  Vector bb = kernels::omp::batch_gradient_sum(ds.features, ds.labels, rows, w);
  EXPECT_LT((ba - bb).norm(), 1e-10 * ba.norm());
}

TEST(Kernels, ParallelForVisitsEachIndexOnce) {
  std::vector<int> hits(257, 0);
  kernels::parallel_for(257, [&](Index i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}
