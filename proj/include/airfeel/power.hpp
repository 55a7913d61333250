#pragma once

#include <functional>
#include <string>
#include <vector>

#include "airfeel/bounds.hpp"
#include "airfeel/channel.hpp"
#include "airfeel/common.hpp"

namespace airfeel {

/// Offline power-control instance over a known channel trace.
///
/// Budgets are in the gradient-normalised domain: round n spends p * Ghat^(n)
/// at device k, capped by `peak[k]` per round and by `average[k]` on average.
struct PowerProblem {
  ChannelTrace trace;
  BoundCoefficients coeffs;
  Vector peak;
  Vector average;

  GapCase gap_case() const { return coeffs.gap_case; }
  Index devices() const { return trace.devices(); }
  Index rounds() const { return trace.rounds(); }

  /// sqrt(peak_k / Ghat^(n)), K x N.
  Matrix amplitude_cap() const;
  /// (1/N) sum_n p Ghat^(n) per device.
  Vector average_spend(const Matrix& power) const;
  void validate() const;
};

enum class InnerMode { Exact, PaperForm };
enum class DualMethod { Newton, Subgradient };

InnerMode parse_inner_mode(const std::string& name);
std::string to_string(InnerMode m);

struct SolverOptions {
  InnerMode inner = InnerMode::Exact;
  DualMethod method = DualMethod::Newton;
  int max_iters = 500;
  double tolerance = 1e-12;  // projected dual gradient, relative to the budgets
  double subgradient_step = 30.0;  // in curvature-scaled units
  int subgradient_iters = 100000;
  bool check_feasibility = true;  // case II only
};

struct PowerSchedule {
  Matrix power;
  Matrix amplitude;
  Vector device_duals;  // phi (case I) or lambda (case II)
  Vector round_duals;   // mu (case II), empty otherwise
  double objective = 0.0;
  std::string mode;

  bool converged = true;
  int iterations = 0;
  double dual_value = 0.0;
  double relative_gap = 0.0;     // (objective - dual_value) / objective
  bool budget_violated = false;  // benchmark policies that ignore the budgets
  bool repaired = false;         // amplitudes rescaled to restore the budget
};

/// Minimises the case I effective gap by maximising the Lagrange dual over
/// per-device multipliers.
PowerSchedule solve_caseI(const PowerProblem& prob, const SolverOptions& opts = {});

/// Minimises the case II effective gap under per-round alignment. Throws
/// Infeasible (with the level) when the budgets cannot reach sum h sqrt(p) = K.
PowerSchedule solve_caseII(const PowerProblem& prob, const SolverOptions& opts = {});

/// Exact minimiser of one round of the case I Lagrangian over the box:
/// J A (sum h x - K)^2 + J B sum (h x - 1)^2 + sum c_k J x_k^2, with
/// c_k = phi_k Ghat / (N J).
Vector caseI_round_minimizer(const Vector& gains, const Vector& caps, double A, double B,
                             const Vector& penalty);

/// Prop.-3 closed form clamped at the caps (no lower clamp, no refit of the sum).
Vector caseI_round_paper_form(const Vector& gains, const Vector& caps, double A, double B,
                              const Vector& penalty);

/// Exact minimiser of the separable case II Lagrangian for one round.
Vector caseII_round_minimizer(const Vector& gains, const Vector& caps, double J, double B,
                              double Ghat, Index rounds, const Vector& lambda, double mu);

struct Feasibility {
  double level = 0.0;        // l* estimate (dual value)
  double lower = 0.0;        // min_n aggregate of the recovered schedule
  bool feasible = false;     // level >= K
  Matrix amplitude;          // schedule attaining `lower`
  int iterations = 0;
  bool converged = false;
};

/// Largest min_n sum_k h x achievable under the budgets.
Feasibility check_feasibility(const PowerProblem& prob, double tolerance = 1e-10,
                              int max_iters = 20000);

/// Support function of {0 <= x <= cap, (1/N) sum Ghat x^2 <= budget} at v >= 0;
/// writes the maximiser into x.
double box_ellipsoid_support(const Vector& v, const Vector& caps, const Vector& weights,
                             double budget, Vector& x);

/// Euclidean projection onto {0 <= x <= cap, sum weights x^2 <= budget}.
Vector box_ellipsoid_project(const Vector& y, const Vector& caps, const Vector& weights,
                             double budget);

enum class FixedPowerMode { Literal, Normalized };

FixedPowerMode parse_fixed_power_mode(const std::string& name);
std::string to_string(FixedPowerMode m);

/// p = average_k every round (literal) or p = average_k / Ghat^(n) (normalized).
PowerSchedule policy_fixed_power(const PowerProblem& prob,
                                 FixedPowerMode mode = FixedPowerMode::Literal);

/// Per-round truncated channel inversion with an equal split of the average budget.
PowerSchedule policy_mse_min(const PowerProblem& prob);

/// Truncated channel inversion at the peak cap only.
PowerSchedule policy_inversion(const PowerProblem& prob);

/// Evaluates a concave dual at `duals` and writes a supergradient.
using DualEvaluator = std::function<double(const Vector& duals, Vector& supergradient)>;

struct SubgradientOptions {
  double step = 1.0;
  int max_iters = 10000;
  double tolerance = 1e-8;
};

struct SubgradientResult {
  Vector duals;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> best_values;  // best value after each iteration
};

/// Projected supergradient ascent with steps a/sqrt(t); coordinates flagged in
/// `nonnegative` are projected onto [0, inf). Returns the best iterate.
SubgradientResult dual_subgradient(const DualEvaluator& eval, const Vector& init,
                                   const std::vector<bool>& nonnegative,
                                   const SubgradientOptions& opts = {});

struct OracleOptions {
  double tolerance = 1e-10;
  int max_iters = 200000;
  std::uint64_t seed = 0;  // nonzero: random feasible start
};

/// Accelerated projected gradient on the primal amplitudes (alignment handled
/// by an augmented Lagrangian in case II). Independent of the dual solvers.
PowerSchedule oracle_projected_gradient(const PowerProblem& prob, const OracleOptions& opts = {});

/// Least-squares multipliers from stationarity on unclipped coordinates.
void recover_duals(PowerSchedule& sched, const PowerProblem& prob);

struct KktReport {
  double stationarity = 0.0;     // unclipped coordinates
  double bound_sign = 0.0;       // wrong-signed derivative at a clipped coordinate
  double primal = 0.0;           // peak, average (p Ghat units) and alignment
  double complementarity = 0.0;  // max |dual * slack|
  double dual_sign = 0.0;        // negative inequality multipliers
};

KktReport kkt_residuals(const PowerSchedule& sched, const PowerProblem& prob);

/// Effective gap of `power` for the problem's case.
double effective_gap(const Matrix& power, const PowerProblem& prob);

/// CSV: round,device,gain,amplitude,power,power_times_Ghat.
void export_schedule(const PowerSchedule& sched, const PowerProblem& prob, const std::string& path);

/// Human-readable duals and residuals.
std::string schedule_summary(const PowerSchedule& sched, const PowerProblem& prob);

}  // namespace airfeel
