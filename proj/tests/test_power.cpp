#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "airfeel/power.hpp"
#include "airfeel/verify.hpp"

using namespace airfeel;

namespace {

// Hand-built problem with constant per-round coefficients.
PowerProblem constant_problem(const Matrix& gains, GapCase gc, double A, double B, double Ghat,
                              const Vector& peak, const Vector& average, double J = 1.0) {
  PowerProblem p;
  p.trace.gains = gains;
  const Index K = gains.rows(), N = gains.cols();
  auto& c = p.coeffs;
  c.gap_case = gc;
  c.devices = K;
  c.batch = N;
  c.dimension = 1;
  c.eta = Vector::Constant(N, 0.05);
  c.C = Vector::Constant(N, 0.5);
  c.J = Vector::Constant(N, J);
  c.A = Vector::Constant(N, gc == GapCase::I ? A : 0.0);
  c.B = Vector::Constant(N, B);
  c.G = Vector::Ones(N);
  c.Ghat = Vector::Constant(N, Ghat);
  p.peak = peak;
  p.average = average;
  return p;
}

double per_round_misalignment(const PowerSchedule& s, const PowerProblem& p, Index n) {
  double m = 0.0;
  for (Index k = 0; k < p.devices(); ++k) {
    const double e = p.trace.gains(k, n) * std::sqrt(s.power(k, n)) - 1.0;
    m += e * e;
  }
  return m;
}

void expect_feasible(const PowerSchedule& s, const PowerProblem& p) {
  const Vector spend = p.average_spend(s.power);
  for (Index k = 0; k < p.devices(); ++k) {
    EXPECT_LE(spend[k], p.average[k] + 1e-9);
    for (Index n = 0; n < p.rounds(); ++n) {
      EXPECT_GE(s.power(k, n), 0.0);
      EXPECT_LE(s.power(k, n) * p.coeffs.Ghat[n], p.peak[k] + 1e-9);
    }
  }
  if (p.gap_case() == GapCase::II) {
    for (Index n = 0; n < p.rounds(); ++n) {
      double agg = 0.0;
      for (Index k = 0; k < p.devices(); ++k) agg += p.trace.gains(k, n) * std::sqrt(s.power(k, n));
      EXPECT_NEAR(agg, static_cast<double>(p.devices()), 1e-6);
    }
  }
}

}  // namespace

// --- per-round inner minimisers -------------------------------------------

TEST(CaseIRound, SingleDeviceAlignment) {
  const Vector h = Vector::Ones(1), cap = Vector::Constant(1, 10.0), pen = Vector::Zero(1);
  EXPECT_NEAR(caseI_round_minimizer(h, cap, 0.7, 0.3, pen)[0], 1.0, 1e-14);
  EXPECT_NEAR(caseI_round_paper_form(h, cap, 0.7, 0.3, pen)[0], 1.0, 1e-14);
}

TEST(CaseIRound, ZeroPenaltyIsInversion) {
  Vector h(3), cap = Vector::Constant(3, 100.0), pen = Vector::Zero(3);
  h << 0.4, 1.1, 2.5;
  const Vector x = caseI_round_minimizer(h, cap, 1.3, 0.2, pen);
  for (Index k = 0; k < 3; ++k) EXPECT_NEAR(x[k], 1.0 / h[k], 1e-13);
}

TEST(CaseIRound, MatchesBruteForceProjectedGradient) {
  Rng rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Index K = 2 + trial % 4;
    Vector h(K), cap(K), pen(K);
    for (Index k = 0; k < K; ++k) {
      h[k] = trial % 7 == 0 && k == 0 ? 0.0 : 0.05 + 2.0 * u(rng);
      cap[k] = 0.2 + 2.0 * u(rng);
      pen[k] = 2.0 * u(rng);
    }
    const double A = 2.0 * u(rng), B = 0.05 + u(rng);
    const double Kd = static_cast<double>(K);
    auto f = [&](const Vector& x) {
      const double S = h.dot(x) - Kd;
      double v = A * S * S;
      for (Index k = 0; k < K; ++k) v += B * std::pow(h[k] * x[k] - 1.0, 2) + pen[k] * x[k] * x[k];
      return v;
    };
    // plain projected gradient with a safe step
    const double L = 2.0 * (A * h.squaredNorm() + B * h.cwiseAbs2().maxCoeff() + pen.maxCoeff());
    Vector x = Vector::Zero(K);
    for (int it = 0; it < 20000; ++it) {
      Vector g(K);
      const double S = h.dot(x) - Kd;
      for (Index k = 0; k < K; ++k)
        g[k] = 2.0 * (A * h[k] * S + B * h[k] * (h[k] * x[k] - 1.0) + pen[k] * x[k]);
      x = (x - g / L).cwiseMax(0.0).cwiseMin(cap);
    }
    const Vector got = caseI_round_minimizer(h, cap, A, B, pen);
    EXPECT_LE(f(got), f(x) + 1e-12) << "trial " << trial;
    EXPECT_LT((got - x).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
  }
}

TEST(CaseIRound, PaperFormEqualsExactWhenCapsSlack) {
  Rng rng(32);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vector h(4), pen(4);
    for (Index k = 0; k < 4; ++k) {
      h[k] = u(rng);
      pen[k] = u(rng);
    }
    const Vector cap = Vector::Constant(4, 1e6);
    const Vector a = caseI_round_minimizer(h, cap, 0.8, 0.4, pen);
    const Vector b = caseI_round_paper_form(h, cap, 0.8, 0.4, pen);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CaseIRound, PaperFormDiffersWhenCapBinds) {
  Vector h(2), cap(2), pen = Vector::Zero(2);
  h << 0.1, 1.0;
  cap << 2.0, 5.0;
  const Vector exact = caseI_round_minimizer(h, cap, 1.0, 0.5, pen);
  const Vector paper = caseI_round_paper_form(h, cap, 1.0, 0.5, pen);
  EXPECT_DOUBLE_EQ(exact[0], 2.0);
  EXPECT_DOUBLE_EQ(paper[0], 2.0);
  // the exact solution compensates the capped device; the clamp does not
  EXPECT_GT(exact[1], paper[1] + 1e-3);
}

TEST(CaseIRound, ZeroGainGetsZeroAmplitude) {
  Vector h(2), cap = Vector::Constant(2, 3.0), pen = Vector::Constant(2, 0.1);
  h << 0.0, 1.0;
  EXPECT_EQ(caseI_round_minimizer(h, cap, 1.0, 1.0, pen)[0], 0.0);
  EXPECT_EQ(caseI_round_paper_form(h, cap, 1.0, 1.0, pen)[0], 0.0);
}

TEST(CaseIIRound, ZeroDualsGiveTruncatedInversion) {
  Vector h(3), cap(3);
  h << 0.3, 1.0, 2.0;
  cap << 1.5, 5.0, 5.0;
  const Vector x = caseII_round_minimizer(h, cap, 0.7, 0.2, 3.0, 10, Vector::Zero(3), 0.0);
  EXPECT_DOUBLE_EQ(x[0], 1.5);
  EXPECT_NEAR(x[1], 1.0, 1e-15);
  EXPECT_NEAR(x[2], 0.5, 1e-15);
}

TEST(CaseIIRound, MatchesScalarMinimisation) {
  Rng rng(33);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double J = 0.1 + u(rng), B = 0.1 + u(rng), Ghat = 1.0 + 2.0 * u(rng);
    const Index N = 7;
    Vector h(3), cap(3), lambda(3);
    for (Index k = 0; k < 3; ++k) {
      h[k] = 0.05 + 2.0 * u(rng);
      cap[k] = 0.2 + 2.0 * u(rng);
      lambda[k] = 3.0 * u(rng);
    }
    const double mu = 4.0 * (u(rng) - 0.5) * J * B;
    const Vector x = caseII_round_minimizer(h, cap, J, B, Ghat, N, lambda, mu);
    for (Index k = 0; k < 3; ++k) {
      auto f = [&](double a) {
        return J * B * std::pow(h[k] * a - 1.0, 2) + lambda[k] * Ghat * a * a / N + mu * h[k] * a;
      };
      double best = f(x[k]);
      for (int i = 0; i <= 4000; ++i) EXPECT_LE(best, f(cap[k] * i / 4000.0) + 1e-12);
    }
  }
}

// --- projection and support utilities -------------------------------------

TEST(BoxEllipsoid, ProjectionIsObtuse) {
  Rng rng(34);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 6;
    Vector y(n), cap(n), w(n);
    for (Index i = 0; i < n; ++i) {
      y[i] = 4.0 * (u(rng) - 0.3);
      cap[i] = 0.5 + u(rng);
      w[i] = 0.1 + u(rng);
    }
    const double budget = 0.5 * u(rng) + 0.05;
    const Vector x = box_ellipsoid_project(y, cap, w, budget);
    EXPECT_LE(w.dot(x.cwiseAbs2()), budget * (1 + 1e-12));
    for (int s = 0; s < 100; ++s) {
      Vector z(n);
      for (Index i = 0; i < n; ++i) z[i] = cap[i] * u(rng);
      const double spend = w.dot(z.cwiseAbs2());
      if (spend > budget) z *= std::sqrt(budget / spend);
      EXPECT_LE((y - x).dot(z - x), 1e-10);
    }
  }
}

TEST(BoxEllipsoid, SupportDominatesFeasiblePoints) {
  Rng rng(35);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 5;
    Vector v(n), cap(n), w(n), x;
    for (Index i = 0; i < n; ++i) {
      v[i] = u(rng);
      cap[i] = 0.5 + u(rng);
      w[i] = 0.1 + u(rng);
    }
    const double budget = 0.6 * u(rng) + 0.05;
    const double s = box_ellipsoid_support(v, cap, w, budget, x);
    EXPECT_NEAR(s, v.dot(x), 1e-12);
    EXPECT_LE(w.dot(x.cwiseAbs2()), budget * (1 + 1e-10));
    EXPECT_TRUE((x.array() >= 0.0).all() && (x.array() <= cap.array() + 1e-15).all());
    for (int k = 0; k < 200; ++k) {
      Vector z(n);
      for (Index i = 0; i < n; ++i) z[i] = cap[i] * u(rng);
      const double spend = w.dot(z.cwiseAbs2());
      if (spend > budget) z *= std::sqrt(budget / spend);
      EXPECT_LE(v.dot(z), s + 1e-12);
    }
  }
}

// --- case I ---------------------------------------------------------------

TEST(CaseI, RemarkTwoLimitIsTruncatedInversion) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PowerProblem p = random_power_problem(seed, 4, 8, GapCase::I);
    p.average *= 1e6;
    p.peak *= 1e6;
    const PowerSchedule s = solve_caseI(p);
    const PowerSchedule inv = policy_inversion(p);
    EXPECT_LT(s.device_duals.maxCoeff(), 1e-12);
    EXPECT_LT((s.power - inv.power).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(CaseI, SingleDeviceSingleRound) {
  Matrix h = Matrix::Ones(1, 1);
  PowerProblem p = constant_problem(h, GapCase::I, 0.6, 0.4, 1.0, Vector::Constant(1, 100.0),
                                    Vector::Constant(1, 50.0));
  const PowerSchedule s = solve_caseI(p);
  EXPECT_NEAR(s.amplitude(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(s.objective, 0.0, 1e-24);
}

TEST(CaseI, TightBudgetsMatchOracle) {
  const PowerProblem p = random_power_problem(77, 3, 5, GapCase::I);
  const PowerSchedule s = solve_caseI(p);
  const PowerSchedule o = oracle_projected_gradient(p);
  EXPECT_TRUE(s.converged);
  EXPECT_GT(s.device_duals.maxCoeff(), 0.0);  // budgets actually bind
  EXPECT_LT(std::abs(s.objective - o.objective) / o.objective, 1e-4);
  expect_feasible(s, p);
}

TEST(CaseI, PaperFormIsFeasibleAndNoBetterThanExact) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const PowerProblem p = random_power_problem(seed, 3, 6, GapCase::I);
    SolverOptions o;
    o.inner = InnerMode::PaperForm;
    const PowerSchedule paper = solve_caseI(p, o);
    const PowerSchedule exact = solve_caseI(p);
    EXPECT_EQ(paper.mode, "paper-form");
    expect_feasible(paper, p);
    EXPECT_GE(paper.objective, exact.objective * (1 - 1e-12));
  }
}

TEST(CaseI, SubgradientMethodApproachesNewton) {
  const PowerProblem p = random_power_problem(5, 3, 5, GapCase::I);
  SolverOptions o;
  o.method = DualMethod::Subgradient;
  o.subgradient_iters = 20000;
  const PowerSchedule sub = solve_caseI(p, o);
  const PowerSchedule newton = solve_caseI(p);
  expect_feasible(sub, p);
  EXPECT_LE(sub.dual_value, newton.objective * (1 + 1e-12));
  EXPECT_LT((sub.objective - newton.objective) / newton.objective, 1e-2);
}

// --- case II --------------------------------------------------------------

TEST(CaseII, SingleDeviceExactAlignment) {
  Matrix h = Matrix::Ones(1, 6);
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.3, 2.0, Vector::Constant(1, 100.0),
                                    Vector::Constant(1, 50.0));
  const PowerSchedule s = solve_caseII(p);
  for (Index n = 0; n < 6; ++n) EXPECT_NEAR(s.amplitude(0, n), 1.0, 1e-12);
  EXPECT_NEAR(s.objective, 0.0, 1e-20);
}

TEST(CaseII, SlackBudgetsGiveChannelInversion) {
  Matrix h(2, 3);
  h << 0.5, 1.0, 2.0, 1.5, 0.8, 1.2;
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.5, 1.0, Vector::Constant(2, 100.0),
                                    Vector::Constant(2, 100.0));
  const PowerSchedule s = solve_caseII(p);
  EXPECT_LT(s.device_duals.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(s.round_duals.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((s.amplitude - h.cwiseInverse()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CaseII, RandomInstanceMatchesOracle) {
  const PowerProblem p = random_power_problem(78, 3, 4, GapCase::II);
  const PowerSchedule s = solve_caseII(p);
  const PowerSchedule o = oracle_projected_gradient(p);
  EXPECT_TRUE(s.converged);
  EXPECT_LT(std::abs(s.objective - o.objective) / o.objective, 1e-4);
  expect_feasible(s, p);
}

TEST(CaseII, InfeasibleInstanceIsRejectedWithLevel) {
  Matrix h = Matrix::Ones(3, 4);
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.5, 1.0, Vector::Constant(3, 0.25),
                                    Vector::Constant(3, 0.25));
  try {
    solve_caseII(p);
    FAIL() << "expected Infeasible";
  } catch (const Infeasible& e) {
    EXPECT_NEAR(e.level(), 1.5, 1e-6);  // three devices at amplitude 0.5
  }
}

TEST(CaseII, ZeroGainDeviceResidual) {
  // Device 1 never reaches the receiver; the other three share K = 4 evenly:
  // each round costs J B (1 + 3 (1/3)^2).
  Matrix h(4, 3);
  h << 0, 0, 0, 1, 1, 1, 0.5, 0.5, 0.5, 2, 2, 2;
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.4, 1.0, Vector::Constant(4, 100.0),
                                    Vector::Constant(4, 100.0), 0.5);
  const double expected = 3 * 0.5 * 0.4 * (1.0 + 1.0 / 3.0);
  const PowerSchedule o = oracle_projected_gradient(p);
  EXPECT_NEAR(o.objective, expected, 1e-9);
  EXPECT_NEAR(solve_caseII(p).objective, expected, 1e-12);
  expect_feasible(o, p);
}

// --- feasibility ----------------------------------------------------------

TEST(Feasibility, CapLimitedSingleDevice) {
  Matrix h = Matrix::Ones(1, 5);
  const double Ghat = 3.0;
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.5, Ghat, Vector::Constant(1, 4.0 * Ghat),
                                    Vector::Constant(1, 4.0 * Ghat));
  const Feasibility f = check_feasibility(p);
  EXPECT_NEAR(f.level, 2.0, 1e-8);
  EXPECT_NEAR(f.lower, 2.0, 1e-8);
  EXPECT_TRUE(f.feasible);  // K = 1 <= 2
}

TEST(Feasibility, ZeroBudgets) {
  Matrix h = Matrix::Ones(2, 3);
  PowerProblem p = constant_problem(h, GapCase::II, 0.0, 0.5, 1.0, Vector::Zero(2), Vector::Zero(2));
  const Feasibility f = check_feasibility(p);
  EXPECT_EQ(f.level, 0.0);
  EXPECT_FALSE(f.feasible);
}

TEST(Feasibility, MatchesGridSearch) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    PowerProblem p = random_power_problem(seed, 2, 2, GapCase::I);
    p.coeffs.gap_case = GapCase::II;
    const Feasibility f = check_feasibility(p);
    const Matrix cap = p.amplitude_cap();
    const Vector a = p.coeffs.Ghat / 2.0;
    // x(1,2) is best set as large as its budget allows; grid the other three
    const int R = 300;
    double best = 0.0;
    for (int i = 0; i <= R; ++i) {
      const double x00 = cap(0, 0) * i / R;
      for (int j = 0; j <= R; ++j) {
        const double x01 = cap(0, 1) * j / R;
        if (a[0] * x00 * x00 + a[1] * x01 * x01 > p.average[0]) break;
        for (int k = 0; k <= R; ++k) {
          const double x10 = cap(1, 0) * k / R;
          const double rest = p.average[1] - a[0] * x10 * x10;
          if (rest < 0.0) break;
          const double x11 = std::min(cap(1, 1), std::sqrt(rest / a[1]));
          best = std::max(best, std::min(p.trace.gains(0, 0) * x00 + p.trace.gains(1, 0) * x10,
                                         p.trace.gains(0, 1) * x01 + p.trace.gains(1, 1) * x11));
        }
      }
    }
    EXPECT_GE(f.level, best - 1e-9);
    EXPECT_LT(f.level - best, 1e-3);
    EXPECT_NEAR(f.level, f.lower, 1e-8);
  }
}

TEST(Feasibility, LargeInstanceCertified) {
  PowerProblem p = random_power_problem(3, 10, 200, GapCase::I);
  p.coeffs.gap_case = GapCase::II;
  const Feasibility f = check_feasibility(p);
  EXPECT_TRUE(f.converged);
  EXPECT_LE(f.lower, f.level + 1e-12);
  EXPECT_LT(f.level - f.lower, 1e-6 * f.level);
  const Vector spend = p.average_spend(f.amplitude.array().square().matrix());
  EXPECT_TRUE((spend.array() <= p.average.array() + 1e-12).all());
}

// --- benchmark policies ---------------------------------------------------

TEST(FixedPower, LiteralRowsAreConstant) {
  Matrix h = Matrix::Ones(4, 3);
  Vector ave(4);
  ave << 50, 150, 50, 150;
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 0.5, 5.0 * ave, ave);
  const PowerSchedule s = policy_fixed_power(p);
  for (Index k = 0; k < 4; ++k)
    for (Index n = 0; n < 3; ++n) EXPECT_EQ(s.power(k, n), ave[k]);
  EXPECT_FALSE(s.budget_violated);  // Ghat < 1
  EXPECT_EQ(s.mode, "fixed-literal");
}

TEST(FixedPower, LiteralFlagsViolationWhenGhatAboveOne) {
  Matrix h = Matrix::Ones(2, 3);
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 2.0, Vector::Constant(2, 100.0),
                                    Vector::Constant(2, 5.0));
  EXPECT_TRUE(policy_fixed_power(p).budget_violated);
}

TEST(FixedPower, NormalizedSpendsBudgetExactly) {
  Matrix h = Matrix::Ones(2, 4);
  Vector ave(2);
  ave << 5, 15;
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 7.0, 5.0 * ave, ave);
  const PowerSchedule s = policy_fixed_power(p, FixedPowerMode::Normalized);
  const Vector spend = p.average_spend(s.power);
  EXPECT_NEAR(spend[0], 5.0, 1e-14);
  EXPECT_NEAR(spend[1], 15.0, 1e-14);
  EXPECT_FALSE(s.budget_violated);
}

TEST(MseMin, SlackCapsInvertExactly) {
  Matrix h(2, 2);
  h << 0.5, 2.0, 1.0, 1.5;
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 1.0, Vector::Constant(2, 100.0),
                                    Vector::Constant(2, 100.0));
  const PowerSchedule s = policy_mse_min(p);
  EXPECT_LT((s.amplitude - h.cwiseInverse()).cwiseAbs().maxCoeff(), 1e-15);
  for (Index n = 0; n < 2; ++n) EXPECT_NEAR(per_round_misalignment(s, p, n), 0.0, 1e-28);
}

TEST(MseMin, VanishingGainPinsAtCap) {
  Matrix h(1, 2);
  h << 1e-9, 0.0;
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 4.0, Vector::Constant(1, 16.0),
                                    Vector::Constant(1, 9.0));
  const PowerSchedule s = policy_mse_min(p);
  EXPECT_DOUBLE_EQ(s.amplitude(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(s.amplitude(0, 1), 1.5);
}

TEST(MseMin, NoWorseThanNormalizedFixedPowerPerRound) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const PowerProblem p = random_power_problem(seed, 5, 20, GapCase::I);
    const PowerSchedule mse = policy_mse_min(p);
    const PowerSchedule fixed = policy_fixed_power(p, FixedPowerMode::Normalized);
    for (Index n = 0; n < p.rounds(); ++n)
      EXPECT_LE(per_round_misalignment(mse, p, n), per_round_misalignment(fixed, p, n) + 1e-12);
  }
}

// --- subgradient engine ---------------------------------------------------

TEST(Subgradient, OneDimensionalQuadratic) {
  auto eval = [](const Vector& y, Vector& g) {
    g.resize(1);
    g[0] = -2.0 * (y[0] - 2.0);
    return -(y[0] - 2.0) * (y[0] - 2.0);
  };
  SubgradientOptions o;
  o.max_iters = 10000;
  o.tolerance = 1e-4;
  const auto r = dual_subgradient(eval, Vector::Zero(1), {true}, o);
  EXPECT_LT(std::abs(r.duals[0] - 2.0), 1e-3);
  EXPECT_LE(r.iterations, 10000);
}

TEST(Subgradient, ZeroSubgradientReturnsInit) {
  auto eval = [](const Vector& y, Vector& g) {
    g = Vector::Zero(y.size());
    return 1.0;
  };
  Vector init(2);
  init << 0.7, -0.3;
  const auto r = dual_subgradient(eval, init, {true, false});
  EXPECT_EQ(r.duals, init);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_TRUE(r.converged);
}

TEST(Subgradient, BestValueIsMonotone) {
  const PowerProblem p = random_power_problem(9, 3, 4, GapCase::I);
  // dual of case I evaluated through the public round minimiser
  const Matrix cap = p.amplitude_cap();
  auto eval = [&](const Vector& phi, Vector& g) {
    Matrix x(p.devices(), p.rounds());
    for (Index n = 0; n < p.rounds(); ++n) {
      const Vector pen = phi * (p.coeffs.Ghat[n] / (p.rounds() * p.coeffs.J[n]));
      x.col(n) = caseI_round_minimizer(p.trace.gains.col(n), cap.col(n), p.coeffs.A[n],
                                       p.coeffs.B[n], pen);
    }
    const Matrix pw = x.array().square();
    g = p.average_spend(pw) - p.average;
    return effective_gap(pw, p) + phi.dot(g);
  };
  SubgradientOptions o;
  o.max_iters = 500;
  const auto r = dual_subgradient(eval, Vector::Zero(3), {true, true, true}, o);
  for (std::size_t i = 1; i < r.best_values.size(); ++i)
    EXPECT_GE(r.best_values[i], r.best_values[i - 1]);
  EXPECT_TRUE((r.duals.array() >= 0.0).all());
}

// --- oracle ---------------------------------------------------------------

TEST(Oracle, InteriorClosedFormMatches) {
  PowerProblem p = random_power_problem(10, 3, 5, GapCase::I);
  p.average *= 1e4;
  p.peak *= 1e4;
  const PowerSchedule o = oracle_projected_gradient(p);
  const PowerSchedule s = solve_caseI(p);
  EXPECT_LT((o.amplitude - s.amplitude).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Oracle, RandomRestartsAgree) {
  for (GapCase gc : {GapCase::I, GapCase::II}) {
    const PowerProblem p = random_power_problem(11, 3, 5, gc);
    const double ref = oracle_projected_gradient(p).objective;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      OracleOptions o;
      o.seed = seed;
      EXPECT_NEAR(oracle_projected_gradient(p, o).objective, ref, 1e-8 * ref);
    }
  }
}

// --- KKT diagnostics ------------------------------------------------------

TEST(Kkt, OracleWithRecoveredDuals) {
  for (GapCase gc : {GapCase::I, GapCase::II}) {
    const PowerProblem p = random_power_problem(12, 4, 6, gc);
    const KktReport r = kkt_residuals(oracle_projected_gradient(p), p);
    EXPECT_LT(r.stationarity, 1e-6);
    EXPECT_LT(r.bound_sign, 1e-6);
    EXPECT_LT(r.primal, 1e-6);
    EXPECT_LT(r.complementarity, 1e-6);
  }
}

TEST(Kkt, PeakPerturbationIsReported) {
  Matrix h = Matrix::Ones(2, 4);
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 1.0, Vector::Constant(2, 2.0),
                                    Vector::Constant(2, 100.0));
  PowerSchedule s = solve_caseI(p);
  const double delta = 1e-3;
  s.power(1, 2) = (p.peak[1] + delta) / p.coeffs.Ghat[2];
  EXPECT_NEAR(kkt_residuals(s, p).primal, delta, 1e-12);
}

TEST(Kkt, SlackBudgetWithPositiveDualFlagged) {
  Matrix h = Matrix::Ones(2, 4);
  PowerProblem p = constant_problem(h, GapCase::I, 1.0, 1.0, 1.0, Vector::Constant(2, 100.0),
                                    Vector::Constant(2, 100.0));
  PowerSchedule s = solve_caseI(p);
  EXPECT_LT(kkt_residuals(s, p).complementarity, 1e-12);
  s.device_duals[0] = 0.5;
  EXPECT_GT(kkt_residuals(s, p).complementarity, 1.0);
}

// --- invariants on random instances ---------------------------------------

TEST(Invariants, FeasibilityAndWeakDuality) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (GapCase gc : {GapCase::I, GapCase::II}) {
      const PowerProblem p = random_power_problem(seed, 2 + seed % 3, 3 + seed % 4, gc);
      const PowerSchedule s = gc == GapCase::I ? solve_caseI(p) : solve_caseII(p);
      expect_feasible(s, p);
      EXPECT_LE(s.dual_value, s.objective + 1e-12 * std::max(1.0, s.objective));
      EXPECT_LT(s.relative_gap, 1e-4);
    }
  }
}

TEST(Invariants, CaseIISlackness) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const PowerProblem p = random_power_problem(seed, 3, 5, GapCase::II);
    const PowerSchedule s = solve_caseII(p);
    const Vector spend = p.average_spend(s.power);
    for (Index k = 0; k < p.devices(); ++k) {
      if (s.device_duals[k] > 1e-8) {
        EXPECT_NEAR(spend[k], p.average[k], 1e-6 * p.average[k]);
      }
    }
  }
}

TEST(Invariants, CaseIIScaleInvariantInB) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    PowerProblem p = random_power_problem(seed, 3, 5, GapCase::II);
    const PowerSchedule a = solve_caseII(p);
    p.coeffs.B *= 7.5;
    const PowerSchedule b = solve_caseII(p);
    EXPECT_LT((a.amplitude - b.amplitude).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Invariants, OracleEquivalence) {
  const OracleSuite suite = run_oracle_suite(5, 10);
  EXPECT_LT(suite.max_relative_difference, 1e-4);
  EXPECT_LT(suite.max_kkt, 1e-6);
}

// --- export ---------------------------------------------------------------

TEST(Export, ScheduleCsv) {
  const PowerProblem p = random_power_problem(13, 2, 3, GapCase::I);
  const PowerSchedule s = solve_caseI(p);
  const auto path = std::filesystem::temp_directory_path() / "airfeel_schedule.csv";
  export_schedule(s, p, path.string());
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "round,device,gain,amplitude,power,power_times_Ghat");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  std::filesystem::remove(path);
  const std::string summary = schedule_summary(s, p);
  EXPECT_NE(summary.find("kkt_stationarity"), std::string::npos);
  EXPECT_NE(summary.find("relative_gap"), std::string::npos);
}
