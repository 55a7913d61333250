// airfeel command-line front end.
//
// Exit codes: 0 success, 1 invalid config or arguments, 2 infeasible
// instance, 3 solver nonconvergence.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "airfeel/harness.hpp"
#include "airfeel/kernels.hpp"
#include "airfeel/verify.hpp"

using namespace airfeel;

namespace {

enum Exit { kOk = 0, kInvalid = 1, kInfeasible = 2, kNonconverged = 3 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  int threads = -1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "experiment config file (key = value)");
  sub->add_option("-s,--set", c.overrides, "override a config key, key=value (repeatable)");
  sub->add_option("--threads", c.threads, "worker threads (0: runtime default)");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.threads >= 0) cfg.threads = c.threads;
  if (!c.output.empty()) cfg.output_dir = c.output;
  cfg.validate();
  if (cfg.threads > 0) kernels::set_threads(cfg.threads);
  return cfg;
}

ChannelTrace trace_for(const ExperimentConfig& cfg, const std::string& path) {
  if (path.empty()) return draw_channels(cfg.channel_seed, cfg.devices, cfg.rounds, cfg.noise_std());
  ChannelTrace t = import_trace(path);
  require(t.devices() == cfg.devices, "trace has " + std::to_string(t.devices()) +
                                          " devices, config has " + std::to_string(cfg.devices));
  require(t.rounds() == cfg.rounds, "trace has " + std::to_string(t.rounds()) +
                                        " rounds, config has " + std::to_string(cfg.rounds));
  return t;
}

int cmd_simulate(const Common& c, const std::string& policy_name) {
  ExperimentConfig cfg = load(c);
  if (!policy_name.empty()) cfg.policies = {parse_policy(policy_name)};
  require(cfg.policies.size() == 1, "simulate runs one policy; use --policy or compare");
  const Comparison cmp = monte_carlo(cfg);
  export_comparison(cmp, cfg.output_dir);

  // first trial as a full trace
  const Workload wl = prepare_workload(cfg);
  const ChannelTrace trace = draw_channels(substream_seed(cfg.channel_seed, 0), cfg.devices,
                                           cfg.rounds, cfg.noise_std());
  const PowerSchedule s = policy_schedule(cfg.policies[0], cfg, wl, trace);
  Rng noise = make_rng(cfg.noise_seed, 0), batch = make_rng(cfg.batch_seed, 0);
  TrainingTrace tr = run_training(wl, trace, s.power, noise, batch);
  tr.policy = to_string(cfg.policies[0]);
  tr.config_hash = config_hash(cfg);
  export_training_trace(tr, cfg, cfg.output_dir + "/trace.csv");

  std::cout << comparison_summary(cmp);
  std::cout << "wrote " << cfg.output_dir << "/{comparison,gap_plot,summary,trace}.csv\n";
  return kOk;
}

int cmd_compare(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Comparison cmp = compare_policies(cfg);
  export_comparison(cmp, cfg.output_dir);
  std::cout << comparison_summary(cmp);
  const PolicyStats* one = cmp.find(Policy::CaseI);
  const PolicyStats* two = cmp.find(Policy::CaseII);
  if (one && two && two->completed > 0 && one->completed > 0) {
    const auto r = crossover_round(two->gap_mean, one->gap_mean);
    std::cout << "case2 below case1 from round: " << (r ? std::to_string(*r) : "never") << "\n";
  }
  if (two) std::printf("case2 feasibility rate: %.3f\n", two->feasibility_rate(cfg.trials));
  std::cout << "wrote " << cfg.output_dir << "/{comparison,gap_plot,summary}.csv\n";
  return kOk;
}

int cmd_solve(const Common& c, const std::string& trace_path, const std::string& policy_name,
              const std::string& save_trace) {
  const ExperimentConfig cfg = load(c);
  const Policy policy = parse_policy(policy_name);
  const Workload wl = prepare_workload(cfg);
  const ChannelTrace trace = trace_for(cfg, trace_path);
  if (!save_trace.empty()) export_trace(trace, save_trace);
  const PowerProblem prob =
      make_problem(cfg, wl, trace, policy == Policy::CaseII ? GapCase::II : GapCase::I);
  const PowerSchedule s = policy_schedule(policy, cfg, wl, trace);
  std::filesystem::create_directories(cfg.output_dir);
  const std::string path = cfg.output_dir + "/schedule.csv";
  export_schedule(s, prob, path);
  std::cout << schedule_summary(s, prob);
  std::cout << "wrote " << path << "\n";
  return s.converged ? kOk : kNonconverged;
}

int cmd_feasibility(const Common& c, const std::string& trace_path) {
  const ExperimentConfig cfg = load(c);
  const Workload wl = prepare_workload(cfg);
  const PowerProblem prob = make_problem(cfg, wl, trace_for(cfg, trace_path), GapCase::II);
  const Feasibility f = check_feasibility(prob);
  std::printf("level: %.10g\nlower: %.10g\nK: %lld\nfeasible: %s\nconverged: %s\niterations: %d\n",
              f.level, f.lower, static_cast<long long>(prob.devices()), f.feasible ? "yes" : "no",
              f.converged ? "yes" : "no", f.iterations);
  if (!f.converged) return kNonconverged;
  return f.feasible ? kOk : kInfeasible;
}

int cmd_bound(const Common& c, const std::string& trace_path, const std::string& policy_name,
              bool validate) {
  const ExperimentConfig cfg = load(c);
  std::filesystem::create_directories(cfg.output_dir);
  if (validate) {
    const BoundReport r = validate_bound(cfg);
    export_bound_report(r, cfg, cfg.output_dir + "/bound_report.csv");
    std::cout << bound_summary(r);
    std::cout << "wrote " << cfg.output_dir << "/bound_report.csv\n";
    return kOk;
  }
  const Policy policy = parse_policy(policy_name);
  const Workload wl = prepare_workload(cfg);
  const ChannelTrace trace = trace_for(cfg, trace_path);
  const GapCase gc = policy == Policy::CaseII ? GapCase::II : GapCase::I;
  const PowerProblem prob = make_problem(cfg, wl, trace, gc);
  const PowerSchedule s = policy_schedule(policy, cfg, wl, trace);
  const double noise_var = std::pow(effective_noise_std(cfg.noise_std(), cfg.noise_convention), 2);
  const GapBound b = gc == GapCase::II
                         ? prop2_bound(wl.initial_gap, s.power, trace, noise_var, prob.coeffs)
                         : prop1_bound(wl.initial_gap, s.power, trace, noise_var, prob.coeffs);
  const std::string path = cfg.output_dir + "/bound_trace.csv";
  export_bound_trace(prob.coeffs, b, path);
  std::printf("policy: %s\ninitial_gap: %.10g\nfloor: %.10g\ngap: %.10g\ntotal: %.10g\n"
              "effective_gap: %.10g\nbatch_assumption: %s\n",
              to_string(policy).c_str(), wl.initial_gap, b.floor, b.gap, b.total, s.objective,
              b.batch_assumption ? "yes" : "no (m_b != N)");
  std::cout << "wrote " << path << "\n";
  return kOk;
}

int cmd_verify(std::uint64_t seed, int instances) {
  const OracleSuite suite = run_oracle_suite(seed, instances);
  std::cout << format_suite(suite);
  bool ok = suite.max_relative_difference < 1e-4 && suite.max_relative_gap < 1e-4 &&
            suite.max_kkt < 1e-6;
  for (const auto& cse : suite.cases) ok = ok && cse.converged && cse.oracle_converged;
  std::cout << (ok ? "verify: PASS\n" : "verify: FAIL\n");
  return ok ? kOk : kNonconverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power control for over-the-air federated learning"};
  app.require_subcommand(1);

  Common common;
  std::string policy, trace_path, save_trace;
  bool validate = false;
  std::uint64_t verify_seed = 1;
  int verify_instances = 50;

  auto* sim = app.add_subcommand("simulate", "train with one policy over Monte-Carlo trials");
  add_common(sim, common);
  sim->add_option("-p,--policy", policy, "policy (defaults to the config's single policy)");
  sim->add_option("-o,--output", common.output, "output directory");

  auto* cmp = app.add_subcommand("compare", "paired multi-policy comparison");
  add_common(cmp, common);
  cmp->add_option("-o,--output", common.output, "output directory");

  auto* solve = app.add_subcommand("solve", "power schedule for one channel trace");
  add_common(solve, common);
  solve->add_option("-p,--policy", policy, "case1, case2, mse-min, fixed, inversion, constant")
      ->required();
  solve->add_option("-t,--trace", trace_path, "channel trace CSV (default: draw from channel_seed)");
  solve->add_option("--save-trace", save_trace, "write the trace used");
  solve->add_option("-o,--output", common.output, "output directory");

  auto* feas = app.add_subcommand("feasibility", "largest achievable aligned level for a trace");
  add_common(feas, common);
  feas->add_option("-t,--trace", trace_path, "channel trace CSV");

  auto* bound = app.add_subcommand("bound", "analytic gap bound, or Monte-Carlo validation");
  add_common(bound, common);
  bound->add_option("-p,--policy", policy, "policy whose schedule is bounded")->default_val("case1");
  bound->add_option("-t,--trace", trace_path, "channel trace CSV");
  bound->add_flag("--validate", validate, "compare bounds with Monte-Carlo gaps at bound_rounds");
  bound->add_option("-o,--output", common.output, "output directory");

  auto* verify = app.add_subcommand("verify", "solvers against the projected-gradient oracle");
  verify->add_option("--seed", verify_seed, "instance seed")->default_val(1);
  verify->add_option("-n,--instances", verify_instances, "random instances")->default_val(50);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*sim) return cmd_simulate(common, policy);
    if (*cmp) return cmd_compare(common);
    if (*solve) return cmd_solve(common, trace_path, policy, save_trace);
    if (*feas) return cmd_feasibility(common, trace_path);
    if (*bound) return cmd_bound(common, trace_path, policy, validate);
    if (*verify) return cmd_verify(verify_seed, verify_instances);
  } catch (const Infeasible& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid: " << e.what() << "\n";
    return kInvalid;
  } catch (const IoError& e) {
    std::cerr << "io: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
  return kOk;
}
