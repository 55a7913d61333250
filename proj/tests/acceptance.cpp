// Acceptance run: one PASS/FAIL line per criterion.
//
// The exit status is nonzero only when a criterion could not be evaluated
// (an exception), or with --strict when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "airfeel/harness.hpp"
#include "airfeel/verify.hpp"

using namespace airfeel;

namespace {

std::string config_path(const std::string& name) { return std::string(AIRFEEL_CONFIG_DIR) + "/" + name; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Criteria 1 and 2 share one suite run.
const OracleSuite& oracle_suite() {
  static const OracleSuite suite = run_oracle_suite(2024, 50);
  return suite;
}

Verdict oracle_equivalence() {
  const OracleSuite& s = oracle_suite();
  bool converged = true;
  for (const auto& c : s.cases) converged = converged && c.converged && c.oracle_converged;
  return {s.max_relative_difference < 1e-4 && s.seconds < 60.0 && converged,
          fmt("%zu solves, max relative difference %.3e, %.2f s, converged %s", s.cases.size(),
              s.max_relative_difference, s.seconds, converged ? "yes" : "no")};
}

Verdict kkt_duality() {
  const OracleSuite& s = oracle_suite();
  return {s.max_relative_gap < 1e-4 && s.max_kkt < 1e-6,
          fmt("max relative duality gap %.3e, max KKT residual %.3e", s.max_relative_gap, s.max_kkt)};
}

Verdict large_budget_limit() {
  ExperimentConfig c;
  c.rounds = 100;
  c.budget_scale = 1e6;
  const Workload wl = prepare_workload(c);
  double worst = 0.0, worst_dual = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ChannelTrace t = draw_channels(seed, c.devices, c.rounds, c.noise_std());
    const PowerProblem p = make_problem(c, wl, t, GapCase::I);
    const PowerSchedule s = solve_caseI(p);
    const PowerSchedule inv = policy_inversion(p);
    worst = std::max(worst, (s.power - inv.power).cwiseAbs().maxCoeff());
    worst_dual = std::max(worst_dual, s.device_duals.maxCoeff());
  }
  return {worst < 1e-6, fmt("10 traces, sup |p - p_inv| = %.3e, max budget dual %.3e", worst, worst_dual)};
}

Verdict unbiasedness() {
  // alignment on every feasible case II schedule: random instances and reference traces
  double misalign = 0.0;
  int schedules = 0;
  auto check = [&](const PowerProblem& p, const PowerSchedule& s) {
    for (Index n = 0; n < p.rounds(); ++n)
      misalign = std::max(misalign, std::abs(p.trace.gains.col(n).dot(s.amplitude.col(n)) -
                                             static_cast<double>(p.devices())));
    ++schedules;
  };
  for (int i = 0; i < 50; ++i) {
    const PowerProblem p = random_power_problem(substream_seed(2024, 1000 + i), 2 + i % 3,
                                                3 + i % 4, GapCase::II);
    check(p, solve_caseII(p));
  }
  ExperimentConfig c;
  const Workload wl = prepare_workload(c);
  PowerSchedule sched;
  PowerProblem prob;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ChannelTrace t = draw_channels(seed, c.devices, c.rounds, c.noise_std());
    prob = make_problem(c, wl, t, GapCase::II);
    try {
      sched = solve_caseII(prob);
    } catch (const Infeasible&) {
      continue;
    }
    check(prob, sched);
  }

  // Monte-Carlo mean of eps in the round with the most uneven weights. Local
  // gradients are symmetric: every device samples its batch from the pooled data.
  const Index K = c.devices, q = c.dimension, m = 400;
  Index round = 0;
  double spread = -1.0;
  for (Index n = 0; n < prob.rounds(); ++n) {
    const Vector a = prob.trace.gains.col(n).cwiseProduct(sched.amplitude.col(n));
    if (a.maxCoeff() - a.minCoeff() > spread) {
      spread = a.maxCoeff() - a.minCoeff();
      round = n;
    }
  }
  const Vector gains = prob.trace.gains.col(round);
  const Vector powers = sched.power.col(round);
  const Vector misaligned = Vector::Constant(K, 1.0);
  const Vector w = 0.5 * wl.optimum.w;
  const Index total = wl.data.size();
  Rng rng = make_rng(99, 4);
  std::uniform_int_distribution<Index> pick(0, total - 1);
  const int draws = 10000;
  Vector sum = Vector::Zero(q), sq = Vector::Zero(q), csum = Vector::Zero(q), csq = Vector::Zero(q);
  Matrix grads(q, K);
  const double noise_std = effective_noise_std(c.noise_std(), c.noise_convention);
  for (int d = 0; d < draws; ++d) {
    for (Index k = 0; k < K; ++k) {
      Vector g = Vector::Zero(q);
      for (Index j = 0; j < m; ++j) {
        const Index i = pick(rng);
        const double r = wl.data.features.row(i).dot(w) - wl.data.labels[i];
        g += r * wl.data.features.row(i).transpose();
      }
      grads.col(k) = g / static_cast<double>(m) + 2.0 * wl.data.ridge * w;
    }
    const Vector z = draw_noise(q, noise_std, rng);
    const Vector e = error_decomposition(grads, gains, powers, z).total;
    const Vector ec = error_decomposition(grads, gains, misaligned, z).total;
    sum += e;
    sq += e.cwiseAbs2();
    csum += ec;
    csq += ec.cwiseAbs2();
  }
  auto zscore = [&](const Vector& s1, const Vector& s2) {
    const Vector mean = s1 / draws;
    const Vector var = (s2 / draws - mean.cwiseAbs2()) * (draws / (draws - 1.0));
    return (mean.cwiseAbs().array() / (var / draws).cwiseSqrt().array()).maxCoeff();
  };
  const double z_aligned = zscore(sum, sq), z_control = zscore(csum, csq);
  return {misalign < 1e-6 && z_aligned < 4.0 && schedules > 50,
          fmt("%d schedules, max |sum h sqrt(p) - K| = %.3e; 1e4 draws: max |mean|/se = %.2f "
              "(misaligned control %.1f)",
              schedules, misalign, z_aligned, z_control)};
}

Verdict bound_validity() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = load_config(config_path("bound_validity.ini"));
  const BoundReport r = validate_bound(c);
  const double secs = seconds_since(t0);
  std::printf("%s", bound_summary(r).c_str());
  double worst = 1e300;
  for (const auto& row : r.rows)
    worst = std::min(worst, std::min(row.theorem, row.analytic) /
                                (row.empirical + 3.0 * row.empirical_se));
  return {r.all_hold() && secs < 300.0,
          fmt("%zu (N, policy) rows, min bound / (mean + 3 se) = %.2f, %.1f s", r.rows.size(),
              worst, secs)};
}

Verdict policy_ordering() {
  const ExperimentConfig c = load_config(config_path("reference.ini"));
  const Comparison cmp = compare_policies(c);
  std::printf("%s", comparison_summary(cmp).c_str());
  const double fixed = cmp.find(Policy::Fixed)->final_gap();
  const double mse = cmp.find(Policy::MseMin)->final_gap();
  const double one = cmp.find(Policy::CaseI)->final_gap();
  const PolicyStats* two_stats = cmp.find(Policy::CaseII);
  const double two = two_stats->final_gap();
  const auto cross = crossover_round(two_stats->gap_mean, cmp.find(Policy::CaseI)->gap_mean);
  const bool a = one < mse, b = mse < fixed, d = two < one;
  return {a && b && d && two_stats->completed >= 100,
          fmt("case1 < mse-min: %s, mse-min < fixed: %s, case2 < case1: %s; "
              "case2 below case1 from round %s; case2 feasible in %d/%d trials",
              a ? "yes" : "no", b ? "yes" : "no", d ? "yes" : "no",
              cross ? std::to_string(*cross).c_str() : "never", two_stats->completed, c.trials)};
}

Verdict device_sweep() {
  const ExperimentConfig base = load_config(config_path("k_sweep.ini"));
  const std::vector<Index> ks{5, 10, 15, 20};
  std::vector<Comparison> runs;
  for (Index k : ks) {
    ExperimentConfig c = base;
    c.devices = k;
    runs.push_back(compare_policies(c));
  }
  bool monotone = true, narrowing = true;
  std::string table;
  for (std::size_t p = 0; p < base.policies.size(); ++p) {
    table += "    " + to_string(base.policies[p]) + ":";
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const double g = runs[i].policies[p].final_gap();
      table += fmt(" %.4e", g);
      if (i > 0 && !(g <= runs[i - 1].policies[p].final_gap())) monotone = false;
    }
    table += "\n";
  }
  auto best_proposed = [](const Comparison& c) {
    double b = 1e300;
    for (const auto& s : c.policies)
      if ((s.policy == Policy::CaseI || s.policy == Policy::CaseII) && s.completed > 0)
        b = std::min(b, s.final_gap());
    return b;
  };
  for (Policy bench : {Policy::Fixed, Policy::MseMin}) {
    table += "    |" + to_string(bench) + " - proposed|:";
    double prev = 1e300;
    for (const auto& run : runs) {
      const double diff = std::abs(run.find(bench)->final_gap() - best_proposed(run));
      table += fmt(" %.4e", diff);
      if (diff > prev) narrowing = false;
      prev = diff;
    }
    table += "\n";
  }
  std::printf("  final gap for K = 5, 10, 15, 20\n%s", table.c_str());
  return {monotone && narrowing, fmt("nonincreasing in K for every policy: %s, gap to benchmarks narrows: %s",
                                     monotone ? "yes" : "no", narrowing ? "yes" : "no")};
}

Verdict error_floor() {
  const ExperimentConfig c = load_config(config_path("error_floor.ini"));
  const Comparison cmp = monte_carlo(c);
  const PolicyStats* flat = cmp.find(Policy::Constant);
  const PolicyStats* two = cmp.find(Policy::CaseII);
  const Index N = c.rounds;
  const double gN = flat->gap_mean[N], gH = flat->gap_mean[N / 2];
  const double rel = std::abs(gN - gH) / gN;
  const double ratio = gN / two->gap_mean[N];
  return {rel < 0.05 && ratio > 10.0 && gN > 0.0,
          fmt("constant: gap(N/2) = %.4e, gap(N) = %.4e, change %.2f%%; case2 gap(N/2) = %.4e, "
              "gap(N) = %.4e; ratio %.1f",
              gH, gN, 100.0 * rel, two->gap_mean[N / 2], two->gap_mean[N], ratio)};
}

Verdict exact_aggregation() {
  ExperimentConfig c;
  c.rounds = 100;
  c.noise_variance = 0.0;
  c.batch_size = c.samples_per_device;
  const Workload wl = prepare_workload(c);
  const ChannelTrace t = draw_channels(5, c.devices, c.rounds, 0.0);
  Rng a(1), b(2);
  const TrainingTrace tr = run_training(wl, t, t.gains.cwiseAbs2().cwiseInverse(), a, b);
  Vector w = Vector::Zero(c.dimension);
  double worst = 0.0;
  for (Index n = 0; n < c.rounds; ++n) w -= wl.rates.eta[n] * full_gradient(w, wl.data);
  worst = (tr.w - w).cwiseAbs().maxCoeff();
  return {worst < 1e-10 && tr.rounds_completed() == 100,
          fmt("100 rounds, K=10, D=1000, max |w - w_gd| = %.3e", worst)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism() {
  const auto root = std::filesystem::temp_directory_path() / "airfeel_acceptance_determinism";
  std::filesystem::remove_all(root);
  std::vector<std::filesystem::path> dirs{root / "a", root / "b"};
  for (const auto& d : dirs) {
    const std::string cmd = std::string("\"") + AIRFEEL_CLI + "\" compare -c \"" +
                            config_path("determinism.ini") + "\" -o \"" + d.string() +
                            "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "airfeel compare failed: " + cmd};
  }
  bool same = true;
  std::size_t bytes = 0;
  for (const char* f : {"comparison.csv", "gap_plot.csv", "summary.csv"}) {
    const std::string x = slurp(dirs[0] / f), y = slurp(dirs[1] / f);
    same = same && !x.empty() && x == y;
    bytes += x.size();
  }
  return {same, fmt("two `airfeel compare` runs, 3 files, %zu bytes, identical: %s", bytes,
                    same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::string(argv[1]) == "--strict";
  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "oracle equivalence", oracle_equivalence},
      {2, "KKT and duality", kkt_duality},
      {3, "large-budget limit", large_budget_limit},
      {4, "unbiasedness", unbiasedness},
      {5, "bound validity", bound_validity},
      {6, "N sweep ordering", policy_ordering},
      {7, "K sweep", device_sweep},
      {8, "error floor", error_floor},
      {9, "exact aggregation", exact_aggregation},
      {10, "determinism", determinism},
  };
  int passed = 0, errors = 0;
  std::string report;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    passed += v.pass;
    const std::string line = fmt("criterion %d (%s): %s  ", c.id, c.name, v.pass ? "PASS" : "FAIL") +
                             v.detail + fmt("  [%.1f s]\n", seconds_since(t0));
    std::printf("%s", line.c_str());
    report += line;
    std::fflush(stdout);
  }
  report += fmt("acceptance: %d/%zu criteria pass\n", passed, criteria.size());
  std::printf("%s", report.c_str() + report.rfind("acceptance:"));
  std::ofstream("acceptance_report.txt") << report;
  if (errors > 0) return 2;
  return strict && passed != static_cast<int>(criteria.size()) ? 1 : 0;
}
