#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "airfeel/power.hpp"

namespace airfeel {

/// Random power-control instance on a Rayleigh trace. Case II budgets are
/// inflated until the instance is feasible with some margin.
PowerProblem random_power_problem(std::uint64_t seed, Index devices, Index rounds, GapCase gap_case);

struct OracleComparison {
  GapCase gap_case = GapCase::I;
  Index devices = 0;
  Index rounds = 0;
  double objective = 0.0;
  double oracle_objective = 0.0;
  double relative_difference = 0.0;
  double relative_gap = 0.0;  // solver's own primal-dual gap
  KktReport kkt;              // solver duals
  bool converged = false;
  bool oracle_converged = false;

  double max_kkt() const;
};

OracleComparison compare_with_oracle(const PowerProblem& prob, const SolverOptions& opts = {});

struct OracleSuite {
  std::vector<OracleComparison> cases;
  double max_relative_difference = 0.0;
  double max_relative_gap = 0.0;
  double max_kkt = 0.0;
  double seconds = 0.0;
};

/// `instances` random problems with K in {2,3,4}, N in {3..6}; each is solved
/// in both cases and compared with the projected-gradient oracle.
OracleSuite run_oracle_suite(std::uint64_t seed, int instances, const SolverOptions& opts = {});

std::string format_suite(const OracleSuite& suite);

}  // namespace airfeel
