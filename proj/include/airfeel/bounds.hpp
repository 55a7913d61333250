#pragma once

#include <optional>
#include <string>

#include "airfeel/channel.hpp"
#include "airfeel/common.hpp"
#include "airfeel/model.hpp"

namespace airfeel {

enum class RateKind { Fixed, Diminishing };

RateKind parse_rate_kind(const std::string& name);
std::string to_string(RateKind k);

struct RateSpec {
  RateKind kind = RateKind::Fixed;
  double eta = 0.05;  // fixed
  double u = 2.0;     // diminishing: u / (n + v)
  double v = 8.0;
};

struct RateSchedule {
  RateKind kind = RateKind::Fixed;
  Vector eta;  // per round, index 0 is round 1
  RateSpec spec;

  Index rounds() const { return eta.size(); }
};

/// Validates the step-size hypotheses and fills eta for N rounds. The error
/// message names the inequality that failed.
RateSchedule build_schedule(const RateSpec& spec, Index rounds, double delta, double L);

enum class GapCase { I, II };

std::string to_string(GapCase c);

/// Which divisor B uses in case II: K (same as case I, default) or K^2 as
/// printed for the unbiased case.
enum class BDivisor { K, KSquared };

struct CoefficientOptions {
  BDivisor case2_divisor = BDivisor::K;
  std::optional<Vector> G;  // per-round override of the gradient bound
};

/// Per-round constants of the gap bounds. Index 0 is round 1.
struct BoundCoefficients {
  GapCase gap_case = GapCase::I;
  Vector eta, C, J, A, B, G, Ghat;
  Index devices = 0;
  Index batch = 0;
  Index dimension = 0;
  double L = 0.0;
  double delta = 0.0;
  double sigma_sq = 0.0;  // |sigma|^2
  RateKind rate = RateKind::Fixed;

  Index rounds() const { return eta.size(); }
  /// prod_{n} C^(n)
  double contraction() const;
};

BoundCoefficients build_coefficients(GapCase gap_case, const RateSchedule& sched,
                                     const LearningConstants& lc, Index devices, Index batch,
                                     const CoefficientOptions& options = {});

struct GapBound {
  double total = 0.0;
  double floor = 0.0;
  double gap = 0.0;
  bool batch_assumption = true;  // m_b == N
  Vector floor_terms;  // per round
  Vector gap_terms;    // per round, excluding the initial-gap term
};

/// Fixed-rate bound with per-round |E eps| and E|eps|^2.
GapBound theorem1_bound(double initial_gap, const Vector& biases, const Vector& mses,
                        const BoundCoefficients& coeffs);

/// Per-round C and J version; reduces to theorem1_bound only when the two
/// variance terms coincide.
GapBound corollary1_bound(double initial_gap, const Vector& biases, const Vector& mses,
                          const BoundCoefficients& coeffs);

/// Sum_n J A (sum_k h sqrt p - K)^2 + J B sum_k (h sqrt p - 1)^2.
double effective_gap_caseI(const Matrix& powers, const ChannelTrace& trace,
                           const BoundCoefficients& coeffs);

/// Sum_n J B sum_k (h sqrt p - 1)^2.
double effective_gap_caseII(const Matrix& powers, const ChannelTrace& trace,
                            const BoundCoefficients& coeffs);

/// Power-dependent bound without alignment constraints.
GapBound prop1_bound(double initial_gap, const Matrix& powers, const ChannelTrace& trace,
                     double noise_variance, const BoundCoefficients& coeffs);

/// Power-dependent bound for aligned schedules.
GapBound prop2_bound(double initial_gap, const Matrix& powers, const ChannelTrace& trace,
                     double noise_variance, const BoundCoefficients& coeffs);

/// CSV with columns n,C,J,A,B,floor,gap.
void export_bound_trace(const BoundCoefficients& coeffs, const GapBound& bound,
                        const std::string& path);

}  // namespace airfeel
