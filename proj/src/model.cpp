#include "airfeel/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace airfeel {

Index Dataset::device_of(Index row) const {
  for (Index k = 0; k < devices(); ++k) {
    const auto& rows = partition[k];
    if (std::find(rows.begin(), rows.end(), row) != rows.end()) return k;
  }
  throw InvalidArgument("row " + std::to_string(row) + " is not assigned to any device");
}

Dataset make_dataset(RowMatrix features, Vector labels, const std::vector<Index>& device_ids,
                     double ridge) {
  require(features.rows() >= 1 && features.cols() >= 1, "dataset must be nonempty");
  require(labels.size() == features.rows(), "label count must match sample count");
  require(static_cast<Index>(device_ids.size()) == features.rows(),
          "device id count must match sample count");
  require(ridge >= 0.0, "ridge weight must be nonnegative");

  Index devices = 0;
  for (Index id : device_ids) {
    require(id >= 0, "device ids must be nonnegative");
    devices = std::max(devices, id + 1);
  }
  Dataset ds;
  ds.partition.assign(devices, {});
  for (Index i = 0; i < features.rows(); ++i) ds.partition[device_ids[i]].push_back(i);
  const std::size_t per = ds.partition.front().size();
  for (const auto& rows : ds.partition) {
    require(!rows.empty() && rows.size() == per, "every device must hold the same number of samples");
  }
  ds.features = std::move(features);
  ds.labels = std::move(labels);
  ds.ridge = ridge;
  kernels::omp::gram(ds.features, ds.labels, ds.gram, ds.moment);
  ds.label_energy = ds.labels.squaredNorm();
  return ds;
}

namespace {

RowMatrix draw_features(Rng& rng, Index rows, Index cols, Vector& labels, double noise_std) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrix x(rows, cols);
  labels.resize(rows);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) x(i, j) = normal(rng);
    const double z = normal(rng);
    labels[i] = x(i, 1) + 3.0 * x(i, 4) + noise_std * z;
  }
  return x;
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, Index devices, Index per_device, Index dimension,
                         double noise_std, double ridge) {
  require(devices >= 1 && per_device >= 1, "device and sample counts must be at least 1");
  require(dimension >= 5, "dimension must be at least 5: the label uses coordinate 5");
  require(noise_std >= 0.0, "label noise must be nonnegative");
  Rng rng = make_rng(seed, 0);
  Vector labels;
  RowMatrix x = draw_features(rng, devices * per_device, dimension, labels, noise_std);
  std::vector<Index> ids(devices * per_device);
  for (Index i = 0; i < static_cast<Index>(ids.size()); ++i) ids[i] = i / per_device;
  return make_dataset(std::move(x), std::move(labels), ids, ridge);
}

Dataset generate_holdout(std::uint64_t seed, Index samples, Index dimension, double noise_std) {
  require(samples >= 1, "held-out set must be nonempty");
  require(dimension >= 5, "dimension must be at least 5: the label uses coordinate 5");
  Rng rng = make_rng(seed, 1);
  Vector labels;
  RowMatrix x = draw_features(rng, samples, dimension, labels, noise_std);
  return make_dataset(std::move(x), std::move(labels), std::vector<Index>(samples, 0), 0.0);
}

double global_loss(const Vector& w, const Dataset& ds) {
  require(w.size() == ds.dimension(), "parameter dimension does not match the dataset");
  const double sq = w.dot(ds.gram * w) - 2.0 * w.dot(ds.moment) + ds.label_energy;
  return 0.5 * sq / static_cast<double>(ds.size()) + ds.ridge * w.squaredNorm();
}

double global_loss_direct(const Vector& w, const Dataset& ds) {
  require(w.size() == ds.dimension(), "parameter dimension does not match the dataset");
  const double sq = kernels::omp::squared_residual_sum(ds.features, ds.labels, w);
  return 0.5 * sq / static_cast<double>(ds.size()) + ds.ridge * w.squaredNorm();
}

Vector full_gradient(const Vector& w, const Dataset& ds) {
  require(w.size() == ds.dimension(), "parameter dimension does not match the dataset");
  return (ds.gram * w - ds.moment) / static_cast<double>(ds.size()) + 2.0 * ds.ridge * w;
}

Vector local_gradient(const Vector& w, const Dataset& ds, Index device,
                      std::span<const Index> batch) {
  require(w.size() == ds.dimension(), "parameter dimension does not match the dataset");
  require(device >= 0 && device < ds.devices(), "device index out of range");
  require(!batch.empty(), "mini-batch must be nonempty");
  const auto& rows = ds.partition[device];
  Vector sum = Vector::Zero(ds.dimension());
  for (Index j : batch) {
    require(j >= 0 && j < static_cast<Index>(rows.size()), "batch position outside the device partition");
    const Index i = rows[j];
    const double r = ds.features.row(i).dot(w) - ds.labels[i];
    sum += r * ds.features.row(i).transpose();
  }
  return sum / static_cast<double>(batch.size()) + 2.0 * ds.ridge * w;
}

double prediction_error(const Vector& w, const Dataset& ds) {
  require(w.size() == ds.dimension(), "parameter dimension does not match the dataset");
  return kernels::omp::squared_residual_sum(ds.features, ds.labels, w) /
         static_cast<double>(ds.size());
}

BatchSampler::BatchSampler(Index devices, Index per_device)
    : perm_(devices, std::vector<Index>(per_device)), full_(per_device) {
  std::iota(full_.begin(), full_.end(), Index{0});
  for (auto& p : perm_) p = full_;
}

std::span<const Index> BatchSampler::draw(Index device, Index m, Rng& rng) {
  auto& p = perm_.at(device);
  const Index size = static_cast<Index>(p.size());
  require(m >= 1 && m <= size, "batch size must be in [1, samples per device]");
  if (m == size) return {full_.data(), full_.size()};
  for (Index j = 0; j < m; ++j) {
    std::uniform_int_distribution<Index> pick(j, size - 1);
    std::swap(p[j], p[pick(rng)]);
  }
  return {p.data(), static_cast<std::size_t>(m)};
}

std::string to_string(NormalConvention c) {
  return c == NormalConvention::Literal ? "literal" : "stationary";
}

OptimalModel optimal_model(const Dataset& ds) {
  const Index q = ds.dimension();
  const double n = static_cast<double>(ds.size());

  auto solve = [&](const Matrix& m, const Vector& rhs) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > hi * 1e-14) || !(lo > 0.0)) {
      std::ostringstream msg;
      msg << "normal equations are singular (condition number "
          << (lo > 0.0 ? hi / lo : INFINITY) << ")";
      throw InvalidArgument(msg.str());
    }
    return Vector(m.ldlt().solve(rhs));
  };

  OptimalModel opt;
  Matrix lit = ds.gram + ds.ridge * Matrix::Identity(q, q);
  opt.w = solve(lit, ds.moment);
  opt.convention = NormalConvention::Literal;
  opt.gradient_norm = full_gradient(opt.w, ds).norm();
  if (!(opt.gradient_norm < 1e-8)) {
    Matrix scaled = ds.gram / n + 2.0 * ds.ridge * Matrix::Identity(q, q);
    opt.w = solve(scaled, ds.moment / n);
    opt.convention = NormalConvention::Stationary;
    opt.gradient_norm = full_gradient(opt.w, ds).norm();
  }
  opt.loss = global_loss(opt.w, ds);
  return opt;
}

double optimality_gap(const Vector& w, const Dataset& ds, const OptimalModel& opt) {
  if (opt.convention == NormalConvention::Literal && ds.ridge != 0.0) {
    return global_loss(w, ds) - opt.loss;
  }
  const Vector d = w - opt.w;
  return 0.5 * d.dot(ds.gram * d) / static_cast<double>(ds.size()) +
         ds.ridge * d.squaredNorm();
}

LearningConstants learning_constants(const Dataset& ds, const OptimalModel& opt,
                                     const LearningOptions& options) {
  require(ds.size() >= 1, "dataset must be nonempty");
  const Index q = ds.dimension();
  Matrix gramian = ds.gram / static_cast<double>(ds.size()) +
                   options.gramian_shift * Matrix::Identity(q, q);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gramian, Eigen::EigenvaluesOnly);

  LearningConstants lc;
  lc.L = eig.eigenvalues().maxCoeff();
  lc.delta = eig.eigenvalues().minCoeff();
  lc.w_star = opt.w;
  lc.F_star = opt.loss;
  lc.convention = opt.convention;
  if (options.W) {
    require(*options.W >= 0.0, "W must be nonnegative");
    lc.W = *options.W;
  } else {
    require(options.W_factor >= 0.0, "W factor must be nonnegative");
    lc.W = options.W_factor * opt.w.norm();
  }
  if (options.sigma) {
    require(options.sigma->size() == q, "sigma override has the wrong dimension");
    require((options.sigma->array() >= 0.0).all(), "sigma must be nonnegative");
    lc.sigma = *options.sigma;
  } else {
    const Vector w0 = options.w_init ? *options.w_init : Vector::Zero(q);
    require(w0.size() == q, "initial parameter vector has the wrong dimension");
    lc.sigma = kernels::omp::sample_gradient_moments(ds.features, ds.labels, w0, ds.ridge).stddev();
  }
  return lc;
}

LearningConstants learning_constants(const Dataset& ds, const LearningOptions& options) {
  return learning_constants(ds, optimal_model(ds), options);
}

void export_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset to " + path);
  std::vector<Index> owner(ds.size(), 0);
  for (Index k = 0; k < ds.devices(); ++k)
    for (Index i : ds.partition[k]) owner[i] = k;

  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", ds.ridge);
  out << "# ridge=" << buf << '\n';
  for (Index j = 0; j < ds.dimension(); ++j) out << 'x' << (j + 1) << ',';
  out << "label,device\n";
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index j = 0; j < ds.dimension(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
      out << buf << ',';
    }
    std::snprintf(buf, sizeof buf, "%.17g", ds.labels[i]);
    out << buf << ',' << owner[i] << '\n';
  }
  if (!out) throw IoError("failed while writing " + path);
}

Dataset import_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset from " + path);
  double ridge = 0.0;
  std::string line;
  Index q = -1;
  std::vector<double> values;
  std::vector<double> labels;
  std::vector<Index> ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# ridge=", 0) == 0) ridge = std::stod(line.substr(8));
      continue;
    }
    if (q < 0) {
      q = std::count(line.begin(), line.end(), ',') - 1;
      require(q >= 1 && line.rfind("x1,", 0) == 0, "dataset header must start with x1");
      continue;
    }
    std::stringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    require(static_cast<Index>(cells.size()) == q + 2, "dataset row has the wrong column count");
    for (Index j = 0; j < q; ++j) values.push_back(std::stod(cells[j]));
    labels.push_back(std::stod(cells[q]));
    ids.push_back(std::stoll(cells[q + 1]));
  }
  require(q >= 1 && !labels.empty(), "dataset file has no samples");
  const Index n = static_cast<Index>(labels.size());
  RowMatrix x = Eigen::Map<RowMatrix>(values.data(), n, q);
  Vector t = Eigen::Map<Vector>(labels.data(), n);
  return make_dataset(std::move(x), std::move(t), ids, ridge);
}

}  // namespace airfeel
