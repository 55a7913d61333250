#include "airfeel/channel.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

namespace airfeel {

ChannelTrace draw_channels(std::uint64_t seed, Index devices, Index rounds, double noise_std) {
  require(devices >= 1 && rounds >= 1, "channel trace needs at least one device and one round");
  require(noise_std >= 0.0, "noise level must be nonnegative");
  Rng rng = make_rng(seed, 2);
  std::normal_distribution<double> part(0.0, std::sqrt(0.5));
  ChannelTrace t;
  t.gains.resize(devices, rounds);
  t.noise_std = noise_std;
  for (Index n = 0; n < rounds; ++n) {
    for (Index k = 0; k < devices; ++k) {
      const double re = part(rng);
      const double im = part(rng);
      t.gains(k, n) = std::hypot(re, im);
    }
  }
  return t;
}

NoiseConvention parse_noise_convention(const std::string& name) {
  if (name == "real") return NoiseConvention::Real;
  if (name == "in-phase" || name == "inphase") return NoiseConvention::InPhase;
  throw InvalidArgument("unknown noise convention '" + name + "' (expected real or in-phase)");
}

std::string to_string(NoiseConvention c) {
  return c == NoiseConvention::Real ? "real" : "in-phase";
}

double effective_noise_std(double noise_std, NoiseConvention c) {
  return c == NoiseConvention::Real ? noise_std : noise_std / std::sqrt(2.0);
}

Vector draw_noise(Index dimension, double noise_std, Rng& rng) {
  Vector z(dimension);
  if (noise_std == 0.0) {
    z.setZero();
    return z;
  }
  std::normal_distribution<double> normal(0.0, noise_std);
  for (Index j = 0; j < dimension; ++j) z[j] = normal(rng);
  return z;
}

namespace {

void check_shapes(const Matrix& grads, const Vector& gains, const Vector& powers) {
  require(grads.cols() >= 1, "need at least one local gradient");
  require(gains.size() == grads.cols() && powers.size() == grads.cols(),
          "gains and powers must have one entry per device");
  require((powers.array() >= 0.0).all(), "powers must be nonnegative");
  require((gains.array() >= 0.0).all(), "gains must be nonnegative");
}

}  // namespace

Aggregate aggregate_with_noise(const Matrix& grads, const Vector& gains, const Vector& powers,
                               const Vector& noise) {
  check_shapes(grads, gains, powers);
  require(noise.size() == grads.rows(), "noise dimension does not match the gradients");
  const Vector weights = gains.cwiseProduct(powers.cwiseSqrt());
  Aggregate a;
  a.received = grads * weights + noise;
  a.estimate = a.received / static_cast<double>(grads.cols());
  a.noise = noise;
  return a;
}

Aggregate aggregate(const Matrix& grads, const Vector& gains, const Vector& powers,
                    double noise_std, Rng& rng) {
  require(noise_std >= 0.0, "noise level must be nonnegative");
  return aggregate_with_noise(grads, gains, powers, draw_noise(grads.rows(), noise_std, rng));
}

AggregationError error_decomposition(const Matrix& grads, const Vector& gains,
                                     const Vector& powers, const Vector& noise) {
  check_shapes(grads, gains, powers);
  const double K = static_cast<double>(grads.cols());
  const Vector excess = gains.cwiseProduct(powers.cwiseSqrt()).array() - 1.0;
  AggregationError e;
  e.misalignment = grads * excess / K;
  e.noise_part = noise / K;
  const Aggregate a = aggregate_with_noise(grads, gains, powers, noise);
  e.total = a.estimate - grads.rowwise().mean();
  return e;
}

BiasMseBound bias_mse_bounds(const Vector& gains, const Vector& powers, double G, double Ghat,
                             double noise_variance, Index dimension) {
  require(gains.size() == powers.size() && gains.size() >= 1, "gains and powers must match");
  require(G >= 0.0 && Ghat >= 0.0, "gradient bounds must be nonnegative");
  require((powers.array() >= 0.0).all(), "powers must be nonnegative");
  const double K = static_cast<double>(gains.size());
  const Vector eff = gains.cwiseProduct(powers.cwiseSqrt());
  BiasMseBound b;
  b.bias = G / K * (eff.sum() - K);
  b.negative_bias = b.bias < 0.0;
  b.mse = Ghat / K * (eff.array() - 1.0).square().sum() +
          noise_variance * static_cast<double>(dimension) / (K * K);
  return b;
}

void export_trace(const ChannelTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write channel trace to " + path);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", trace.noise_std);
  out << "# noise_std=" << buf << "\nround,device,gain\n";
  for (Index n = 0; n < trace.rounds(); ++n) {
    for (Index k = 0; k < trace.devices(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", trace.gains(k, n));
      out << (n + 1) << ',' << (k + 1) << ',' << buf << '\n';
    }
  }
  if (!out) throw IoError("failed while writing " + path);
}

ChannelTrace import_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read channel trace from " + path);
  ChannelTrace t;
  std::map<std::pair<Index, Index>, double> cells;
  Index K = 0, N = 0;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# noise_std=", 0) == 0) t.noise_std = std::stod(line.substr(12));
      continue;
    }
    if (!header) {
      require(line == "round,device,gain", "channel trace header must be round,device,gain");
      header = true;
      continue;
    }
    std::stringstream row(line);
    std::string a, b, c;
    std::getline(row, a, ',');
    std::getline(row, b, ',');
    std::getline(row, c, ',');
    const Index n = std::stoll(a), k = std::stoll(b);
    const double g = std::stod(c);
    require(n >= 1 && k >= 1, "round and device are 1-based");
    require(g >= 0.0, "gains must be nonnegative");
    cells[{k - 1, n - 1}] = g;
    K = std::max(K, k);
    N = std::max(N, n);
  }
  require(K >= 1 && N >= 1 && static_cast<Index>(cells.size()) == K * N,
          "channel trace must list every (round, device) pair exactly once");
  t.gains.resize(K, N);
  for (const auto& [key, g] : cells) t.gains(key.first, key.second) = g;
  return t;
}

}  // namespace airfeel
