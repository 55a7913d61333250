#pragma once

#include <cstdint>
#include <string>

#include "airfeel/common.hpp"

namespace airfeel {

/// Fading magnitudes for K devices over N rounds (one column per round) and
/// the receiver noise standard deviation.
struct ChannelTrace {
  Matrix gains;  // K x N, nonnegative
  double noise_std = 0.0;

  Index devices() const { return gains.rows(); }
  Index rounds() const { return gains.cols(); }
};

/// Rayleigh magnitudes |h| with h complex normal of unit variance.
ChannelTrace draw_channels(std::uint64_t seed, Index devices, Index rounds, double noise_std = 0.0);

enum class NoiseConvention {
  Real,     // N(0, s^2) per coordinate
  InPhase,  // real part of complex noise, N(0, s^2/2)
};

NoiseConvention parse_noise_convention(const std::string& name);
std::string to_string(NoiseConvention c);

/// Per-coordinate standard deviation actually added to the received signal.
double effective_noise_std(double noise_std, NoiseConvention c);

Vector draw_noise(Index dimension, double noise_std, Rng& rng);

struct Aggregate {
  Vector received;  // y = sum_k h_k sqrt(p_k) g_k + z
  Vector estimate;  // y / K
  Vector noise;     // z
};

/// `grads` holds one local gradient per column.
Aggregate aggregate(const Matrix& grads, const Vector& gains, const Vector& powers,
                    double noise_std, Rng& rng);

/// Same, with the noise realisation supplied.
Aggregate aggregate_with_noise(const Matrix& grads, const Vector& gains, const Vector& powers,
                               const Vector& noise);

struct AggregationError {
  Vector total;         // estimate - ideal average
  Vector misalignment;  // (1/K) sum_k (h_k sqrt(p_k) - 1) g_k
  Vector noise_part;    // z / K
};

AggregationError error_decomposition(const Matrix& grads, const Vector& gains,
                                     const Vector& powers, const Vector& noise);

struct BiasMseBound {
  double bias = 0.0;  // signed: (G/K)(sum h sqrt(p) - K)
  double mse = 0.0;
  bool negative_bias = false;
};

BiasMseBound bias_mse_bounds(const Vector& gains, const Vector& powers, double G, double Ghat,
                             double noise_variance, Index dimension);

/// Text form "round,device,gain" (1-based round and device) with a
/// "# noise_std=" comment line.
void export_trace(const ChannelTrace& trace, const std::string& path);
ChannelTrace import_trace(const std::string& path);

}  // namespace airfeel
