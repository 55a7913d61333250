#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "airfeel/bounds.hpp"
#include "airfeel/channel.hpp"
#include "airfeel/model.hpp"
#include "airfeel/power.hpp"

namespace airfeel {

enum class Policy { Fixed, MseMin, CaseI, CaseII, Inversion, Constant };

Policy parse_policy(const std::string& name);
std::string to_string(Policy p);
BDivisor parse_b_divisor(const std::string& name);
std::string to_string(BDivisor d);
DualMethod parse_dual_method(const std::string& name);
std::string to_string(DualMethod m);

/// Everything one experiment needs. Defaults follow the ridge-regression
/// setup: K=10, q=10, D=1000, noise power 0.1, per-device average budgets
/// alternating 5 and 15 with peaks at 5x.
struct ExperimentConfig {
  std::uint64_t dataset_seed = 7;
  std::uint64_t channel_seed = 11;
  std::uint64_t noise_seed = 13;
  std::uint64_t batch_seed = 17;

  Index devices = 10;
  Index rounds = 400;
  Index dimension = 10;
  Index samples_per_device = 1000;
  Index batch_size = 0;  // 0: min(rounds, samples_per_device)
  double label_noise = 0.2;
  double ridge = 5e-5;
  double noise_variance = 0.1;
  NoiseConvention noise_convention = NoiseConvention::Real;

  RateSpec rate;
  std::vector<double> average_power{5.0, 15.0};  // per device, cycled over K
  double peak_multiplier = 5.0;
  double budget_scale = 1.0;

  std::vector<Policy> policies{Policy::Fixed, Policy::MseMin, Policy::CaseI, Policy::CaseII};
  int trials = 100;
  std::string output_dir = "out";

  BDivisor b_divisor = BDivisor::K;
  FixedPowerMode fixed_power = FixedPowerMode::Literal;
  InnerMode inner = InnerMode::Exact;
  DualMethod dual_method = DualMethod::Newton;

  double W_factor = 1.0;
  std::optional<double> W;
  double gramian_shift = 1e-4;
  Index holdout_samples = 2000;
  bool redraw_dataset = false;

  // "constant" policy: p = constant_power on all but the last
  // floor(constant_silent_fraction * K) devices, which stay silent.
  double constant_power = 1.0;
  double constant_silent_fraction = 0.5;

  int threads = 0;
  std::vector<Index> bound_rounds{50, 100, 200, 400};

  double noise_std() const;
  Index effective_batch() const;
  /// P-hat^ave for device k.
  double device_average_power(Index k) const;
  void validate() const;
};

/// Applies one "key = value" setting. Unknown keys and malformed values throw
/// InvalidArgument.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// INI-style text: "key = value" lines, '#' or ';' comments, optional
/// [section] headers that prefix keys as "section.key".
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);
/// Canonical "key = value" lines in a fixed order; parse_config reads them back.
std::string config_text(const ExperimentConfig& cfg);
/// FNV-1a of config_text.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Read-only state shared by all trials and policies.
struct Workload {
  Dataset data;
  Dataset holdout;
  OptimalModel optimum;
  LearningConstants constants;
  RateSchedule rates;
  Index batch = 0;
  NoiseConvention noise_convention = NoiseConvention::Real;
  double initial_gap = 0.0;  // F(0) - F*
};

Workload prepare_workload(const ExperimentConfig& cfg, std::uint64_t dataset_seed);
inline Workload prepare_workload(const ExperimentConfig& cfg) {
  return prepare_workload(cfg, cfg.dataset_seed);
}

struct TrainingTrace {
  Vector loss;              // rounds + 1 entries, index 0 is the initial model
  Vector gap;               // F(w) - F*
  Vector prediction_error;  // on the held-out set
  Vector error_sq;          // |eps|^2 per round, index 0 unused (0)
  Matrix errors;            // q x rounds, realized eps per round
  Vector energy;            // per device, (1/N) sum p |g|^2 / q
  Vector w;                 // final model
  bool diverged = false;

  std::string policy;
  std::uint64_t config_hash = 0;
  std::string normal_convention;
  std::string noise_convention;

  Index rounds_completed() const { return loss.size() == 0 ? 0 : loss.size() - 1; }
};

/// FedSGD from w = 0 with over-the-air aggregation under `power` (K x N).
/// Stops early, with `diverged` set, once the loss is not finite or exceeds
/// 1e6 times the initial loss.
TrainingTrace run_training(const Workload& wl, const ChannelTrace& trace, const Matrix& power,
                           Rng& noise_rng, Rng& batch_rng);

/// Power-control instance for a trace under the configured budgets.
PowerProblem make_problem(const ExperimentConfig& cfg, const Workload& wl,
                          const ChannelTrace& trace, GapCase gap_case);

/// Schedule chosen by `policy`. Throws Infeasible for an infeasible case II trace.
PowerSchedule policy_schedule(Policy policy, const ExperimentConfig& cfg, const Workload& wl,
                              const ChannelTrace& trace);

struct PolicyStats {
  Policy policy = Policy::Fixed;
  int completed = 0;     // trials in the means
  int diverged = 0;
  int infeasible = 0;
  int nonconverged = 0;  // solver flagged, still included
  Vector gap_mean, gap_se;
  Vector prediction_mean, prediction_se;
  Matrix error_mean;     // q x N, mean realized eps
  Vector error_sq_mean;  // N, mean |eps|^2
  double analytic_bound_mean = 0.0;  // Prop.-1 (Prop.-2 for case II) bound
  double analytic_bound_se = 0.0;
  double energy_ratio = 0.0;         // max_k realized energy / P-hat^ave_k, trial mean
  bool budget_violated = false;      // any trial's schedule exceeded the budgets

  std::string name() const { return to_string(policy); }
  double final_gap() const { return gap_mean.size() ? gap_mean[gap_mean.size() - 1] : 0.0; }
  double final_gap_se() const { return gap_se.size() ? gap_se[gap_se.size() - 1] : 0.0; }
  double feasibility_rate(int trials) const;
};

struct Comparison {
  ExperimentConfig config;
  std::uint64_t hash = 0;
  double initial_gap = 0.0;
  double L = 0.0, delta = 0.0, W = 0.0;
  std::vector<PolicyStats> policies;

  const PolicyStats* find(Policy p) const;
};

/// Trials with their own channel, noise and batch substreams. Results are
/// summed in trial order, so they do not depend on the thread count.
Comparison monte_carlo(const ExperimentConfig& cfg);

/// monte_carlo over at least two policies; each trial gives every policy the
/// same dataset, channel, noise and batch draws.
Comparison compare_policies(const ExperimentConfig& cfg);

/// First round from which `lower` stays strictly below `upper` through the
/// end, if any (round index into the gap curves).
std::optional<Index> crossover_round(const Vector& lower, const Vector& upper);

struct BoundRow {
  Index rounds = 0;
  Policy policy = Policy::CaseI;
  double empirical = 0.0;
  double empirical_se = 0.0;
  double theorem = 0.0;   // Theorem 1 (Corollary 1 when diminishing) with realized errors
  double analytic = 0.0;  // Prop. 1 or Prop. 2, mean over trials
  bool theorem_holds = false;   // theorem >= empirical - 3 se
  bool analytic_holds = false;
  bool analytic_dominates = false;  // analytic >= theorem
  bool batch_assumption = true;     // m_b == N
  std::string hypothesis;           // empty when the rate hypotheses hold
  int completed = 0;
};

struct BoundReport {
  std::vector<BoundRow> rows;
  bool all_hold() const;
};

/// Empirical mean final gap against the bounds at each N in cfg.bound_rounds.
BoundReport validate_bound(const ExperimentConfig& cfg);

/// Writes "# key = value" lines of the config snapshot.
void write_config_header(std::ostream& out, const ExperimentConfig& cfg);

/// CSV: round,loss,gap,prediction_error,error_sq_norm.
void export_training_trace(const TrainingTrace& trace, const ExperimentConfig& cfg,
                           const std::string& path);
TrainingTrace import_training_trace(const std::string& path);

/// comparison.csv (one row per policy and round), gap_plot.csv (one column per
/// policy) and summary.csv (final-round table) in `dir`.
void export_comparison(const Comparison& cmp, const std::string& dir);
std::string comparison_summary(const Comparison& cmp);

void export_bound_report(const BoundReport& report, const ExperimentConfig& cfg,
                         const std::string& path);
std::string bound_summary(const BoundReport& report);

}  // namespace airfeel
