#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "airfeel/common.hpp"
#include "airfeel/kernels.hpp"

namespace airfeel {

/// Regression samples split evenly across devices.
///
/// Row i of `features` is one sample; `partition[k]` lists the rows owned by
/// device k. The Gram matrix, the label moment and the label energy are
/// cached so the loss can be evaluated in O(q^2).
struct Dataset {
  RowMatrix features;
  Vector labels;
  std::vector<std::vector<Index>> partition;
  double ridge = 0.0;

  Matrix gram;        // X'X
  Vector moment;      // X't
  double label_energy = 0.0;  // t't

  Index size() const { return features.rows(); }
  Index dimension() const { return features.cols(); }
  Index devices() const { return static_cast<Index>(partition.size()); }
  Index samples_per_device() const {
    return partition.empty() ? 0 : static_cast<Index>(partition.front().size());
  }
  Index device_of(Index row) const;
};

/// Build a dataset from raw rows. device_ids[i] in [0, K); every device must
/// own the same number of rows. Rows of a device keep their file order.
Dataset make_dataset(RowMatrix features, Vector labels, const std::vector<Index>& device_ids,
                     double ridge);

/// i.i.d. standard normal features, label x(2) + 3 x(5) + noise_std * z
/// (1-based coordinates). Device k owns rows [kD, (k+1)D).
Dataset generate_dataset(std::uint64_t seed, Index devices, Index per_device, Index dimension,
                         double noise_std, double ridge);

/// Fresh samples from the same law, used as a held-out set.
Dataset generate_holdout(std::uint64_t seed, Index samples, Index dimension, double noise_std);

/// (1/D_tot) sum 1/2 (x'w - t)^2 + ridge |w|^2, via the cached quadratic form.
double global_loss(const Vector& w, const Dataset& ds);

/// Same value accumulated sample by sample.
double global_loss_direct(const Vector& w, const Dataset& ds);

/// Full gradient of global_loss.
Vector full_gradient(const Vector& w, const Dataset& ds);

/// Mean of x(x'w - t) + 2 ridge w over `batch`, given as positions inside the
/// device's partition (0 .. D-1).
Vector local_gradient(const Vector& w, const Dataset& ds, Index device,
                      std::span<const Index> batch);

/// Mean squared prediction error (x'w - t)^2 over a dataset.
double prediction_error(const Vector& w, const Dataset& ds);

/// Draws mini-batches without replacement. Keeps one permutation per device
/// and reshuffles only its first m entries per draw, so a draw costs O(m).
class BatchSampler {
 public:
  BatchSampler(Index devices, Index per_device);

  /// Positions of a uniformly random m-subset of device `k`. With m equal to
  /// the device size the natural order 0..D-1 is returned and rng is unused.
  std::span<const Index> draw(Index device, Index m, Rng& rng);

 private:
  std::vector<std::vector<Index>> perm_;
  std::vector<Index> full_;
};

enum class NormalConvention {
  Literal,     // (X'X + ridge I)^{-1} X't
  Stationary,  // (X'X/D_tot + 2 ridge I)^{-1} X't/D_tot
};

std::string to_string(NormalConvention c);

struct OptimalModel {
  Vector w;
  double loss = 0.0;
  NormalConvention convention = NormalConvention::Stationary;
  double gradient_norm = 0.0;  // |grad F(w)| at the returned point
};

/// Tries the closed form as printed first and keeps it when it is stationary
/// for global_loss (gradient norm < 1e-8); otherwise solves the scaled system.
OptimalModel optimal_model(const Dataset& ds);

/// F(w) - F*. For the stationary convention this is the exact quadratic form
/// 1/2 (w - w*)' H (w - w*), which avoids cancellation near the optimum.
double optimality_gap(const Vector& w, const Dataset& ds, const OptimalModel& opt);

struct LearningOptions {
  double gramian_shift = 1e-4;
  double W_factor = 1.0;            // W = W_factor * |w*|
  std::optional<double> W;          // absolute override
  std::optional<Vector> sigma;      // per-coordinate override
  std::optional<Vector> w_init;     // point where sigma is estimated; zeros by default
};

struct LearningConstants {
  double L = 0.0;
  double delta = 0.0;
  Vector w_star;
  double F_star = 0.0;
  double W = 0.0;
  Vector sigma;
  NormalConvention convention = NormalConvention::Stationary;

  double sigma_sq_norm() const { return sigma.squaredNorm(); }
};

LearningConstants learning_constants(const Dataset& ds, const OptimalModel& opt,
                                     const LearningOptions& options = {});
LearningConstants learning_constants(const Dataset& ds, const LearningOptions& options = {});

/// Text export: optional "# ridge=<v>" line, then a header "x1,...,xq,label,device".
void export_dataset(const Dataset& ds, const std::string& path);
Dataset import_dataset(const std::string& path);

}  // namespace airfeel
