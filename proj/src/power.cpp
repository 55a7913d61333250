#include "airfeel/power.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace airfeel {

Matrix PowerProblem::amplitude_cap() const {
  Matrix cap(devices(), rounds());
  for (Index n = 0; n < rounds(); ++n)
    for (Index k = 0; k < devices(); ++k) cap(k, n) = std::sqrt(peak[k] / coeffs.Ghat[n]);
  return cap;
}

Vector PowerProblem::average_spend(const Matrix& power) const {
  return power * coeffs.Ghat / static_cast<double>(rounds());
}

void PowerProblem::validate() const {
  require(devices() >= 1 && rounds() >= 1, "power problem needs at least one device and round");
  require(coeffs.rounds() == rounds(), "coefficients and channel trace disagree on N");
  require(coeffs.devices == devices(), "coefficients and channel trace disagree on K");
  require(peak.size() == devices() && average.size() == devices(),
          "budgets need one entry per device");
  require((peak.array() >= 0.0).all() && (average.array() >= 0.0).all(),
          "budgets must be nonnegative");
  require((trace.gains.array() >= 0.0).all(), "gains must be nonnegative");
  require((coeffs.Ghat.array() > 0.0).all(), "Ghat must be positive");
  require((coeffs.J.array() >= 0.0).all() && (coeffs.B.array() >= 0.0).all() &&
              (coeffs.A.array() >= 0.0).all(),
          "bound coefficients must be nonnegative");
}

InnerMode parse_inner_mode(const std::string& name) {
  if (name == "exact") return InnerMode::Exact;
  if (name == "paper-form" || name == "paper" || name == "clamped") return InnerMode::PaperForm;
  throw InvalidArgument("unknown inner mode '" + name + "' (expected exact or paper-form)");
}

std::string to_string(InnerMode m) { return m == InnerMode::Exact ? "exact" : "paper-form"; }

FixedPowerMode parse_fixed_power_mode(const std::string& name) {
  if (name == "literal") return FixedPowerMode::Literal;
  if (name == "normalized" || name == "budget-normalized") return FixedPowerMode::Normalized;
  throw InvalidArgument("unknown fixed-power mode '" + name + "' (expected literal or normalized)");
}

std::string to_string(FixedPowerMode m) {
  return m == FixedPowerMode::Literal ? "literal" : "normalized";
}

double effective_gap(const Matrix& power, const PowerProblem& prob) {
  return prob.gap_case() == GapCase::I ? effective_gap_caseI(power, prob.trace, prob.coeffs)
                                       : effective_gap_caseII(power, prob.trace, prob.coeffs);
}

// ---------------------------------------------------------------------------
// Per-round inner minimisers

Vector caseI_round_minimizer(const Vector& h, const Vector& cap, double A, double B,
                             const Vector& penalty) {
  const Index K = h.size();
  const double Kd = static_cast<double>(K);
  Vector D(K);
  for (Index k = 0; k < K; ++k) D[k] = B * h[k] * h[k] + penalty[k];

  auto coord = [&](Index k, double level) {
    // level = B + A (K - S)
    if (h[k] == 0.0 || cap[k] == 0.0) return 0.0;
    if (D[k] <= 0.0) return level > 0.0 ? cap[k] : 0.0;
    return std::clamp(h[k] * level / D[k], 0.0, cap[k]);
  };
  Vector x(K);
  auto fill = [&](double S) {
    const double level = B + A * (Kd - S);
    double sum = 0.0;
    for (Index k = 0; k < K; ++k) {
      x[k] = coord(k, level);
      sum += h[k] * x[k];
    }
    return sum;
  };

  if (A == 0.0) {
    fill(Kd);
    return x;
  }

  // S - sum_k h_k x_k(S) is increasing in S; its root is the round's aggregate.
  double lo = 0.0, hi = 0.0;
  for (Index k = 0; k < K; ++k) hi += h[k] * cap[k];
  if (!std::isfinite(hi)) hi = Kd + B / A + 1.0;
  hi = std::min(hi, Kd + B / A);
  for (int it = 0; it < 200 && hi - lo > 1e-16 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid - fill(mid) > 0.0) hi = mid;
    else lo = mid;
  }
  const double S0 = 0.5 * (lo + hi);
  fill(S0);

  // Exact refit on the active set found above.
  double sF = 0.0, capped = 0.0;
  std::vector<int> state(K, 0);  // 0 zero, 1 free, 2 cap
  for (Index k = 0; k < K; ++k) {
    if (h[k] == 0.0 || cap[k] == 0.0 || D[k] <= 0.0) {
      state[k] = x[k] > 0.0 ? 2 : 0;
    } else if (x[k] <= 0.0) {
      state[k] = 0;
    } else if (x[k] >= cap[k]) {
      state[k] = 2;
    } else {
      state[k] = 1;
      sF += h[k] * h[k] / D[k];
    }
    if (state[k] == 2) capped += h[k] * cap[k];
  }
  const double level = (B + A * Kd - A * capped) / (1.0 + A * sF);
  Vector refit(K);
  bool consistent = true;
  for (Index k = 0; k < K && consistent; ++k) {
    if (state[k] == 1) {
      refit[k] = h[k] * level / D[k];
      consistent = refit[k] >= 0.0 && refit[k] <= cap[k];
    } else {
      refit[k] = state[k] == 2 ? cap[k] : 0.0;
      if (h[k] != 0.0 && cap[k] != 0.0 && D[k] > 0.0) {
        const double t = h[k] * level / D[k];
        consistent = state[k] == 2 ? t >= cap[k] * (1 - 1e-12) : t <= 1e-12 * cap[k];
      }
    }
  }
  return consistent ? refit : x;
}

Vector caseI_round_paper_form(const Vector& h, const Vector& cap, double A, double B,
                              const Vector& penalty) {
  const Index K = h.size();
  // M_k = B h_k + c_k / h_k
  double s = 0.0;
  for (Index k = 0; k < K; ++k)
    if (h[k] > 0.0) s += h[k] / (B * h[k] + penalty[k] / h[k]);
  Vector x(K);
  for (Index k = 0; k < K; ++k) {
    if (h[k] == 0.0) {
      x[k] = 0.0;
      continue;
    }
    const double M = B * h[k] + penalty[k] / h[k];
    x[k] = std::min((B + A * static_cast<double>(K)) / (M + A * M * s), cap[k]);
  }
  return x;
}

Vector caseII_round_minimizer(const Vector& h, const Vector& cap, double J, double B, double Ghat,
                              Index rounds, const Vector& lambda, double mu) {
  const Index K = h.size();
  const double JB = J * B;
  const double N = static_cast<double>(rounds);
  Vector x(K);
  for (Index k = 0; k < K; ++k) {
    if (h[k] == 0.0 || cap[k] == 0.0) {
      x[k] = 0.0;
    } else if (JB > 0.0) {
      const double a = std::max(0.0, 1.0 - mu / (2.0 * JB));
      x[k] = std::clamp(h[k] * a / (h[k] * h[k] + lambda[k] * Ghat / (N * JB)), 0.0, cap[k]);
    } else if (lambda[k] > 0.0) {
      x[k] = std::clamp(-mu * h[k] * N / (2.0 * lambda[k] * Ghat), 0.0, cap[k]);
    } else {
      x[k] = mu < 0.0 ? cap[k] : 0.0;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Projected Newton on a concave dual (Bertsekas-style active set with an
// Armijo search along the projection arc).

namespace {

class DualModel {
 public:
  virtual ~DualModel() = default;
  virtual Index dim() const = 0;
  virtual bool bounded(Index i) const = 0;
  virtual double scale(Index i) const = 0;
  /// Dual value and gradient; caches the inner minimiser for the other calls.
  virtual double evaluate(const Vector& y, Vector& grad) = 0;
  /// diag of -H at the last evaluated point.
  virtual Vector curvature() = 0;
  /// Curvature each coordinate would have with every amplitude unclipped;
  /// used where the true curvature vanishes.
  virtual Vector fallback_curvature() const = 0;
  /// Solves (-H_FF + floor) d_F = g_F at the last evaluated point.
  virtual Vector newton(const std::vector<bool>& free, const Vector& g, const Vector& floor) = 0;
};

struct NewtonOutcome {
  Vector y;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  double residual = 0.0;
};

double dual_residual(const DualModel& m, const Vector& y, const Vector& g) {
  double r = 0.0;
  for (Index i = 0; i < y.size(); ++i) {
    const double ri = (m.bounded(i) && y[i] <= 0.0) ? std::max(0.0, g[i]) : std::abs(g[i]);
    r = std::max(r, ri / m.scale(i));
  }
  return r;
}

Vector project_bounds(const DualModel& m, Vector y) {
  for (Index i = 0; i < y.size(); ++i)
    if (m.bounded(i)) y[i] = std::max(0.0, y[i]);
  return y;
}

NewtonOutcome projected_newton(DualModel& m, Vector y, int max_iters, double tol) {
  const Index n = m.dim();
  y = project_bounds(m, std::move(y));
  Vector g(n), gt(n);
  double v = m.evaluate(y, g);
  NewtonOutcome out;
  const double sigma = 1e-4;
  int it = 0;
  for (; it < max_iters; ++it) {
    const double res = dual_residual(m, y, g);
    if (res <= tol) {
      out.converged = true;
      break;
    }
    Vector curv = m.curvature();
    const Vector fallback = m.fallback_curvature();
    Vector floor = Vector::Zero(n);
    for (Index i = 0; i < n; ++i) {
      if (curv[i] <= 1e-8 * fallback[i]) {
        floor[i] = fallback[i] - curv[i];
        curv[i] = fallback[i];
      }
    }
    const double cmax = curv.maxCoeff();

    // epsilon-active set from a scaled projected step
    double width = 0.0;
    for (Index i = 0; i < n; ++i) {
      if (!m.bounded(i)) continue;
      width = std::max(width, std::abs(y[i] - std::max(0.0, y[i] + g[i] / curv[i])));
    }
    std::vector<bool> free(n, true);
    for (Index i = 0; i < n; ++i)
      if (m.bounded(i) && y[i] <= width && g[i] < 0.0) free[i] = false;

    Vector d = m.newton(free, g, floor);
    for (Index i = 0; i < n; ++i)
      if (!free[i]) d[i] = g[i] / curv[i];

    auto search = [&](const Vector& dir) {
      double alpha = 1.0;
      for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
        Vector yt = project_bounds(m, y + alpha * dir);
        const double vt = m.evaluate(yt, gt);
        const double pred = g.dot(yt - y);
        if (vt >= v + sigma * pred ||
            (std::abs(vt - v) <= 1e-14 * (1.0 + std::abs(v)) && dual_residual(m, yt, gt) < res)) {
          y = std::move(yt);
          v = vt;
          g = gt;
          return true;
        }
      }
      return false;
    };
    if (search(d)) continue;
    Vector grad_dir(n);
    for (Index i = 0; i < n; ++i) grad_dir[i] = g[i] / cmax;
    if (search(grad_dir)) continue;
    m.evaluate(y, g);  // restore the cache at the current point
    break;
  }
  out.y = y;
  out.value = v;
  out.iterations = it;
  out.residual = dual_residual(m, y, g);
  if (!out.converged) out.converged = out.residual <= tol;
  return out;
}

// ---------------------------------------------------------------------------
// Case I dual: maximise over phi >= 0.

class CaseIDual : public DualModel {
 public:
  CaseIDual(const PowerProblem& prob, InnerMode mode)
      : prob_(prob), cap_(prob.amplitude_cap()), mode_(mode),
        x_(Matrix::Zero(prob.devices(), prob.rounds())) {}

  Index dim() const override { return prob_.devices(); }
  bool bounded(Index) const override { return true; }
  double scale(Index i) const override { return std::max(prob_.average[i], 1e-12); }

  const Matrix& amplitude() const { return x_; }

  Vector penalty(const Vector& phi, Index n) const {
    const auto& c = prob_.coeffs;
    return phi * (c.Ghat[n] / (static_cast<double>(prob_.rounds()) * c.J[n]));
  }

  void inner(const Vector& phi, InnerMode mode, Matrix& x) const {
    const auto& c = prob_.coeffs;
    x.resize(prob_.devices(), prob_.rounds());
    for (Index n = 0; n < prob_.rounds(); ++n) {
      if (c.J[n] <= 0.0) {
        x.col(n).setZero();
        continue;
      }
      const Vector pen = penalty(phi, n);
      x.col(n) = mode == InnerMode::Exact
                     ? caseI_round_minimizer(prob_.trace.gains.col(n), cap_.col(n), c.A[n], c.B[n], pen)
                     : caseI_round_paper_form(prob_.trace.gains.col(n), cap_.col(n), c.A[n], c.B[n], pen);
    }
  }

  double evaluate(const Vector& phi, Vector& grad) override {
    phi_ = phi;
    inner(phi, mode_, x_);
    const Matrix p = x_.array().square();
    grad = prob_.average_spend(p) - prob_.average;
    return effective_gap_caseI(p, prob_.trace, prob_.coeffs) + phi.dot(grad);
  }

  Matrix hessian() const {
    const auto& c = prob_.coeffs;
    const Index K = prob_.devices();
    const double N = static_cast<double>(prob_.rounds());
    Matrix H = Matrix::Zero(K, K);  // of -g
    Vector u(K);
    for (Index n = 0; n < prob_.rounds(); ++n) {
      if (c.J[n] <= 0.0) continue;
      const double gamma = c.Ghat[n] / (N * c.J[n]);
      const double w = 2.0 * c.Ghat[n] / N;
      double s = 0.0;
      u.setZero();
      for (Index k = 0; k < K; ++k) {
        const double h = prob_.trace.gains(k, n), x = x_(k, n);
        if (h == 0.0 || x <= 0.0 || x >= cap_(k, n)) continue;
        const double D = c.B[n] * h * h + phi_[k] * gamma;
        if (D <= 0.0) continue;
        s += h * h / D;
        u[k] = h * x / D;
        H(k, k) += w * gamma * x * x / D;
      }
      H.noalias() -= (w * c.A[n] * gamma / (1.0 + c.A[n] * s)) * u * u.transpose();
    }
    return H;
  }

  Vector curvature() override {
    H_ = hessian();
    return H_.diagonal();
  }

  Vector fallback_curvature() const override {
    const auto& c = prob_.coeffs;
    const double N = static_cast<double>(prob_.rounds());
    Vector f = Vector::Zero(dim());
    for (Index n = 0; n < prob_.rounds(); ++n) {
      if (c.J[n] <= 0.0) continue;
      const double gamma = c.Ghat[n] / (N * c.J[n]);
      for (Index k = 0; k < dim(); ++k) {
        const double h = prob_.trace.gains(k, n);
        const double D = c.B[n] * h * h + phi_[k] * gamma;
        if (h == 0.0 || D <= 0.0) continue;
        const double x = std::min(cap_(k, n), h * (c.B[n] + c.A[n] * dim()) / D);
        f[k] += 2.0 * c.Ghat[n] / N * gamma * x * x / D;
      }
    }
    for (Index k = 0; k < dim(); ++k)
      if (!(f[k] > 0.0)) f[k] = 1.0;
    return f;
  }

  Vector newton(const std::vector<bool>& free, const Vector& g, const Vector& floor) override {
    const Index K = dim();
    std::vector<Index> idx;
    for (Index k = 0; k < K; ++k)
      if (free[k]) idx.push_back(k);
    Vector d = Vector::Zero(K);
    if (idx.empty()) return d;
    const Index m = static_cast<Index>(idx.size());
    Matrix M(m, m);
    Vector r(m);
    for (Index a = 0; a < m; ++a) {
      r[a] = g[idx[a]];
      for (Index b = 0; b < m; ++b) M(a, b) = H_(idx[a], idx[b]);
      M(a, a) += floor[idx[a]];
    }
    Vector sol = M.ldlt().solve(r);
    for (Index a = 0; a < m; ++a) d[idx[a]] = sol[a];
    return d;
  }

 private:
  const PowerProblem& prob_;
  Matrix cap_;
  InnerMode mode_;
  Matrix x_;
  Vector phi_;
  Matrix H_;
};

// ---------------------------------------------------------------------------
// Case II dual: lambda >= 0 (first K entries), mu free (next N entries).

class CaseIIDual : public DualModel {
 public:
  explicit CaseIIDual(const PowerProblem& prob)
      : prob_(prob), cap_(prob.amplitude_cap()),
        x_(Matrix::Zero(prob.devices(), prob.rounds())) {}

  Index dim() const override { return prob_.devices() + prob_.rounds(); }
  bool bounded(Index i) const override { return i < prob_.devices(); }
  double scale(Index i) const override {
    return i < prob_.devices() ? std::max(prob_.average[i], 1e-12)
                               : static_cast<double>(prob_.devices());
  }

  const Matrix& amplitude() const { return x_; }

  void inner(const Vector& y, Matrix& x) const {
    const auto& c = prob_.coeffs;
    const Index K = prob_.devices();
    const Vector lambda = y.head(K);
    x.resize(K, prob_.rounds());
    for (Index n = 0; n < prob_.rounds(); ++n) {
      x.col(n) = caseII_round_minimizer(prob_.trace.gains.col(n), cap_.col(n), c.J[n], c.B[n],
                                        c.Ghat[n], prob_.rounds(), lambda, y[K + n]);
    }
  }

  double evaluate(const Vector& y, Vector& grad) override {
    y_ = y;
    inner(y, x_);
    const Index K = prob_.devices();
    const Matrix p = x_.array().square();
    grad.resize(dim());
    grad.head(K) = prob_.average_spend(p) - prob_.average;
    const Vector agg = (prob_.trace.gains.array() * x_.array()).colwise().sum().transpose();
    grad.tail(prob_.rounds()) = agg.array() - static_cast<double>(K);
    return effective_gap_caseII(p, prob_.trace, prob_.coeffs) + y.dot(grad);
  }

  // Blocks of -H: P (K, diagonal), Q (N, diagonal), E (K x N).
  void blocks() {
    const auto& c = prob_.coeffs;
    const Index K = prob_.devices(), N = prob_.rounds();
    const double Nd = static_cast<double>(N);
    P_ = Vector::Zero(K);
    Q_ = Vector::Zero(N);
    E_ = Matrix::Zero(K, N);
    for (Index n = 0; n < N; ++n) {
      const double JB = c.J[n] * c.B[n];
      if (JB <= 0.0) continue;
      const double rho = c.Ghat[n] / (Nd * JB);
      for (Index k = 0; k < K; ++k) {
        const double h = prob_.trace.gains(k, n), x = x_(k, n);
        if (h == 0.0 || x <= 0.0 || x >= cap_(k, n)) continue;
        const double D = h * h + y_[k] * rho;
        P_[k] += 2.0 * c.Ghat[n] / Nd * x * x * rho / D;
        E_(k, n) = c.Ghat[n] * x * h / (Nd * JB * D);
        Q_[n] += h * h / (2.0 * JB * D);
      }
    }
  }

  Vector curvature() override {
    blocks();
    Vector d(dim());
    d << P_, Q_;
    return d;
  }

  Vector fallback_curvature() const override {
    const auto& c = prob_.coeffs;
    const Index K = prob_.devices(), N = prob_.rounds();
    const double Nd = static_cast<double>(N);
    Vector f = Vector::Zero(K + N);
    for (Index n = 0; n < N; ++n) {
      const double JB = c.J[n] * c.B[n];
      if (JB <= 0.0) continue;
      const double rho = c.Ghat[n] / (Nd * JB);
      for (Index k = 0; k < K; ++k) {
        const double h = prob_.trace.gains(k, n);
        if (h == 0.0) continue;
        const double D = h * h + y_[k] * rho;
        const double x = std::min(cap_(k, n), h / D);
        f[k] += 2.0 * c.Ghat[n] / Nd * x * x * rho / D;
        f[K + n] += h * h / (2.0 * JB * D);
      }
    }
    for (Index i = 0; i < K + N; ++i)
      if (!(f[i] > 0.0)) f[i] = 1.0;
    return f;
  }

  Vector newton(const std::vector<bool>& free, const Vector& g, const Vector& floor) override {
    const Index K = prob_.devices(), N = prob_.rounds();
    const Vector q = Q_ + floor.tail(N);
    std::vector<Index> idx;
    for (Index k = 0; k < K; ++k)
      if (free[k]) idx.push_back(k);
    const Index m = static_cast<Index>(idx.size());
    const Vector gmu = g.tail(N);
    Vector d = Vector::Zero(K + N);
    Vector dl = Vector::Zero(m);
    if (m > 0) {
      Matrix S(m, m);
      Vector r(m);
      for (Index a = 0; a < m; ++a) {
        const Index ka = idx[a];
        r[a] = g[ka] - (E_.row(ka).transpose().array() * gmu.array() / q.array()).sum();
        for (Index b = 0; b < m; ++b) {
          S(a, b) = -(E_.row(ka).array() * E_.row(idx[b]).array() / q.transpose().array()).sum();
        }
        S(a, a) += P_[ka] + floor[ka];
      }
      dl = S.ldlt().solve(r);
      for (Index a = 0; a < m; ++a) d[idx[a]] = dl[a];
    }
    Vector rmu = gmu;
    for (Index a = 0; a < m; ++a) rmu -= E_.row(idx[a]).transpose() * dl[a];
    d.tail(N) = rmu.array() / q.array();
    return d;
  }

 private:
  const PowerProblem& prob_;
  Matrix cap_;
  Matrix x_;
  Vector y_;
  Vector P_, Q_;
  Matrix E_;
};

// Scale down amplitudes of devices that overspend their average budget.
bool repair_budget(const PowerProblem& prob, Matrix& x) {
  const Vector spend = prob.average_spend(x.array().square().matrix());
  bool changed = false;
  for (Index k = 0; k < prob.devices(); ++k) {
    if (spend[k] > prob.average[k]) {
      const double f = prob.average[k] > 0.0 ? std::sqrt(prob.average[k] / spend[k]) : 0.0;
      x.row(k) *= f * (1.0 - 1e-15);
      if (spend[k] - prob.average[k] > 1e-12 * std::max(1.0, prob.average[k])) changed = true;
    }
  }
  return changed;
}

void finish(PowerSchedule& s, const PowerProblem& prob) {
  s.power = s.amplitude.array().square();
  s.objective = effective_gap(s.power, prob);
  s.relative_gap = s.objective > 0.0 ? (s.objective - s.dual_value) / s.objective
                                     : std::abs(s.objective - s.dual_value);
}

}  // namespace

// ---------------------------------------------------------------------------

SubgradientResult dual_subgradient(const DualEvaluator& eval, const Vector& init,
                                   const std::vector<bool>& nonnegative,
                                   const SubgradientOptions& opts) {
  require(static_cast<Index>(nonnegative.size()) == init.size(),
          "projection mask must match the dual dimension");
  require(opts.step > 0.0 && opts.max_iters >= 0, "step and iteration limit must be positive");
  auto project = [&](Vector y) {
    for (Index i = 0; i < y.size(); ++i)
      if (nonnegative[i]) y[i] = std::max(0.0, y[i]);
    return y;
  };
  auto residual = [&](const Vector& y, const Vector& g) {
    double r = 0.0;
    for (Index i = 0; i < y.size(); ++i)
      r = std::max(r, (nonnegative[i] && y[i] <= 0.0) ? std::max(0.0, g[i]) : std::abs(g[i]));
    return r;
  };

  SubgradientResult out;
  Vector y = project(init);
  Vector g(y.size());
  double v = eval(y, g);
  out.duals = y;
  out.value = v;
  for (int t = 1; t <= opts.max_iters; ++t) {
    if (residual(y, g) <= opts.tolerance) {
      out.converged = true;
      break;
    }
    y = project(y + (opts.step / std::sqrt(static_cast<double>(t))) * g);
    v = eval(y, g);
    if (v > out.value) {
      out.value = v;
      out.duals = y;
    }
    out.best_values.push_back(out.value);
    out.iterations = t;
  }
  return out;
}

namespace {

// Supergradient ascent in coordinates scaled by sqrt of the unclipped curvature.
SubgradientResult preconditioned_subgradient(DualModel& m, const Vector& init,
                                             const SolverOptions& opts) {
  const Index n = m.dim();
  Vector g(n);
  m.evaluate(init, g);
  const Vector d = m.curvature().cwiseMax(m.fallback_curvature()).cwiseSqrt();
  std::vector<bool> mask(n);
  double tol = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) {
    mask[i] = m.bounded(i);
    tol = std::min(tol, opts.tolerance * m.scale(i) / d[i]);
  }
  SubgradientOptions so;
  so.step = opts.subgradient_step;
  so.max_iters = opts.subgradient_iters;
  so.tolerance = tol;
  auto eval = [&](const Vector& z, Vector& grad) {
    const double v = m.evaluate(z.cwiseQuotient(d), grad);
    grad = grad.cwiseQuotient(d);
    return v;
  };
  SubgradientResult r = dual_subgradient(eval, init.cwiseProduct(d), mask, so);
  r.duals = r.duals.cwiseQuotient(d);
  return r;
}

}  // namespace

PowerSchedule solve_caseI(const PowerProblem& prob, const SolverOptions& opts) {
  prob.validate();
  require(prob.gap_case() == GapCase::I, "solve_caseI needs case I coefficients");
  CaseIDual dual(prob, InnerMode::Exact);
  PowerSchedule s;
  s.mode = to_string(opts.inner);

  Vector phi;
  if (opts.method == DualMethod::Newton) {
    NewtonOutcome r = projected_newton(dual, Vector::Zero(prob.devices()), opts.max_iters,
                                       opts.tolerance);
    phi = r.y;
    s.converged = r.converged;
    s.iterations = r.iterations;
  } else {
    auto r = preconditioned_subgradient(dual, Vector::Zero(prob.devices()), opts);
    phi = r.duals;
    s.converged = r.converged;
    s.iterations = r.iterations;
  }

  Vector g;
  s.dual_value = dual.evaluate(phi, g);
  s.device_duals = phi;
  if (opts.inner == InnerMode::Exact) {
    s.amplitude = dual.amplitude();
  } else {
    dual.inner(phi, InnerMode::PaperForm, s.amplitude);
  }
  s.repaired = repair_budget(prob, s.amplitude);
  finish(s, prob);
  return s;
}

PowerSchedule solve_caseII(const PowerProblem& prob, const SolverOptions& opts) {
  prob.validate();
  require(prob.gap_case() == GapCase::II, "solve_caseII needs case II coefficients");
  for (Index n = 0; n < prob.rounds(); ++n) {
    require(prob.coeffs.J[n] * prob.coeffs.B[n] > 0.0, "case II needs J B > 0 in every round");
  }
  const Index K = prob.devices(), N = prob.rounds();
  CaseIIDual dual(prob);
  PowerSchedule s;
  s.mode = "exact";
  Vector y = Vector::Zero(K + N);
  if (opts.method == DualMethod::Newton) {
    NewtonOutcome r = projected_newton(dual, y, opts.max_iters, opts.tolerance);
    y = r.y;
    s.converged = r.converged;
    s.iterations = r.iterations;
  } else {
    auto r = preconditioned_subgradient(dual, y, opts);
    y = r.duals;
    s.converged = r.converged;
    s.iterations = r.iterations;
  }
  Vector g;
  s.dual_value = dual.evaluate(y, g);
  s.device_duals = y.head(K);
  s.round_duals = y.tail(N);
  s.amplitude = dual.amplitude();
  s.repaired = repair_budget(prob, s.amplitude);
  finish(s, prob);
  if (!opts.check_feasibility) return s;

  // a converged, aligned schedule within budget certifies feasibility by itself
  double misalignment = 0.0;
  for (Index n = 0; n < N; ++n) {
    const double sum = prob.trace.gains.col(n).dot(s.amplitude.col(n));
    misalignment = std::max(misalignment, std::abs(sum - static_cast<double>(K)));
  }
  if (s.converged && misalignment <= 1e-8 * static_cast<double>(K)) return s;
  Feasibility f = check_feasibility(prob);
  if (!f.feasible) {
    std::ostringstream msg;
    msg << "unbiased aggregation is infeasible: level " << f.level << " < K = " << K;
    throw Infeasible(msg.str(), f.level);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Feasibility level

namespace {

// Support value of the box-ellipsoid set at v >= 0; also reports the budget
// multiplier theta (0 when the caps alone fit the budget).
double support_exact(const Vector& v, const Vector& caps, const Vector& weights, double budget,
                     Vector& x, double& theta) {
  const Index n = v.size();
  x.resize(n);
  theta = 0.0;
  if (budget <= 0.0) {
    for (Index i = 0; i < n; ++i) x[i] = weights[i] > 0.0 ? 0.0 : caps[i];
    theta = std::numeric_limits<double>::infinity();
    return v.dot(x);
  }
  double full = 0.0;
  for (Index i = 0; i < n; ++i) full += weights[i] * caps[i] * caps[i];
  if (full <= budget) {
    x = caps;
    return v.dot(x);
  }
  // coordinate i sits at its cap while theta <= v_i / (2 a_i c_i)
  std::vector<Index> order;
  std::vector<double> brk(n, 0.0);
  for (Index i = 0; i < n; ++i) {
    if (weights[i] <= 0.0) continue;
    brk[i] = caps[i] > 0.0 ? v[i] / (2.0 * weights[i] * caps[i]) : 0.0;
    order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return brk[a] < brk[b]; });
  const Index m = static_cast<Index>(order.size());
  std::vector<double> capped_suffix(m + 1, 0.0);
  for (Index j = m - 1; j >= 0; --j) {
    const Index i = order[j];
    capped_suffix[j] = capped_suffix[j + 1] + weights[i] * caps[i] * caps[i];
  }
  double free_sum = 0.0;
  theta = 0.0;
  for (Index j = 0; j <= m; ++j) {
    // free: order[0..j-1], capped: order[j..m-1]
    if (j > 0) {
      const Index i = order[j - 1];
      free_sum += v[i] * v[i] / weights[i];
    }
    const double rest = budget - capped_suffix[j];
    if (rest <= 0.0 || free_sum <= 0.0) continue;
    const double t = std::sqrt(free_sum / (4.0 * rest));
    const double lo = j > 0 ? brk[order[j - 1]] : 0.0;
    const double hi = j < m ? brk[order[j]] : std::numeric_limits<double>::infinity();
    if (t >= lo * (1 - 1e-14) && t <= hi * (1 + 1e-14)) {
      theta = t;
      break;
    }
  }
  if (theta == 0.0 && free_sum > 0.0) theta = std::sqrt(free_sum / (4.0 * budget));
  for (Index i = 0; i < n; ++i) {
    if (weights[i] <= 0.0) x[i] = caps[i];
    else x[i] = theta > 0.0 ? std::min(caps[i], v[i] / (2.0 * theta * weights[i])) : 0.0;
  }
  return v.dot(x);
}

}  // namespace

double box_ellipsoid_support(const Vector& v, const Vector& caps, const Vector& weights,
                             double budget, Vector& x) {
  double theta = 0.0;
  return support_exact(v, caps, weights, budget, x, theta);
}

Vector box_ellipsoid_project(const Vector& y, const Vector& caps, const Vector& weights,
                             double budget) {
  const Index n = y.size();
  Vector x(n);
  auto fill = [&](double theta) {
    double spend = 0.0;
    for (Index i = 0; i < n; ++i) {
      x[i] = std::clamp(y[i] / (1.0 + 2.0 * theta * weights[i]), 0.0, caps[i]);
      spend += weights[i] * x[i] * x[i];
    }
    return spend;
  };
  if (fill(0.0) <= budget) return x;
  if (budget <= 0.0) {
    for (Index i = 0; i < n; ++i) x[i] = weights[i] > 0.0 ? 0.0 : std::clamp(y[i], 0.0, caps[i]);
    return x;
  }
  double lo = 0.0, hi = 1.0;
  while (fill(hi) > budget) {
    lo = hi;
    hi *= 4.0;
  }
  for (int it = 0; it < 300 && hi - lo > 1e-16 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (fill(mid) > budget) lo = mid;
    else hi = mid;
  }
  fill(hi);
  return x;
}


namespace {

// Log-barrier method for  max l  s.t.  sum_k h x >= l (each round),
// (1/N) sum_n Ghat x^2 <= budget (each device),  0 <= x <= cap.
class LevelBarrier {
 public:
  LevelBarrier(const PowerProblem& prob)
      : prob_(prob), K_(prob.devices()), N_(prob.rounds()), cap_(prob.amplitude_cap()),
        a_(prob.coeffs.Ghat / static_cast<double>(prob.rounds())),
        active_(K_, N_) {
    for (Index k = 0; k < K_; ++k)
      for (Index n = 0; n < N_; ++n)
        active_(k, n) = cap_(k, n) > 0.0 && prob.average[k] > 0.0 ? 1.0 : 0.0;
    terms_ = 2.0 * active_.sum() + static_cast<double>(N_);
    for (Index k = 0; k < K_; ++k)
      if (prob.average[k] > 0.0) terms_ += 1.0;
  }

  const Matrix& amplitude() const { return x_; }
  double level() const { return level_; }
  Vector round_weights() const {
    Vector w = slack_rounds().cwiseInverse();
    return w / w.sum();
  }

  int run(double tol, int max_newton) {
    start();
    double t = 1.0;
    int newton = 0;
    for (;;) {
      for (int it = 0; it < 100 && newton < max_newton; ++it, ++newton) {
        if (!newton_step(t)) break;
      }
      if (terms_ / t <= tol * std::max(1.0, std::abs(level_)) || newton >= max_newton) break;
      t *= 20.0;
    }
    return newton;
  }

 private:
  Vector slack_rounds() const {
    Vector r(N_);
    for (Index n = 0; n < N_; ++n) r[n] = prob_.trace.gains.col(n).dot(x_.col(n)) - level_;
    return r;
  }
  Vector slack_devices(const Matrix& x) const {
    return prob_.average - x.array().square().matrix() * a_;
  }

  void start() {
    x_ = Matrix::Zero(K_, N_);
    for (Index k = 0; k < K_; ++k) {
      double full = 0.0;
      for (Index n = 0; n < N_; ++n) full += a_[n] * cap_(k, n) * cap_(k, n) * active_(k, n);
      const double f = full > 0.0 ? std::min(0.5, std::sqrt(0.5 * prob_.average[k] / full)) : 0.0;
      x_.row(k) = f * cap_.row(k).cwiseProduct(active_.row(k));
    }
    const Vector agg = (prob_.trace.gains.array() * x_.array()).colwise().sum().transpose();
    level_ = agg.minCoeff() - std::max(1.0, std::abs(agg.minCoeff()));
  }

  bool inside(const Matrix& x, double level) const {
    for (Index k = 0; k < K_; ++k)
      for (Index n = 0; n < N_; ++n)
        if (active_(k, n) > 0.0 && !(x(k, n) > 0.0 && x(k, n) < cap_(k, n))) return false;
    const Vector sd = slack_devices(x);
    for (Index k = 0; k < K_; ++k)
      if (prob_.average[k] > 0.0 && !(sd[k] > 0.0)) return false;
    for (Index n = 0; n < N_; ++n)
      if (!(prob_.trace.gains.col(n).dot(x.col(n)) - level > 0.0)) return false;
    return true;
  }

  double value(const Matrix& x, double level, double t) const {
    double f = -t * level;
    for (Index k = 0; k < K_; ++k)
      for (Index n = 0; n < N_; ++n)
        if (active_(k, n) > 0.0) f -= std::log(x(k, n)) + std::log(cap_(k, n) - x(k, n));
    const Vector sd = slack_devices(x);
    for (Index k = 0; k < K_; ++k)
      if (prob_.average[k] > 0.0) f -= std::log(sd[k]);
    for (Index n = 0; n < N_; ++n) f -= std::log(prob_.trace.gains.col(n).dot(x.col(n)) - level);
    return f;
  }

  // Solves (Diag + sum_n v_n v_n^T) y = b, v_n = (h_n / r_n on round n, -1/r_n on level).
  void solve_rounds(const Matrix& diag, const Vector& r, const Matrix& bx, double bl, Matrix& yx,
                    double& yl) const {
    Vector beta(N_), gamma(N_);
    double num = bl, den = 0.0;
    for (Index n = 0; n < N_; ++n) {
      double b = 0.0, g = 0.0;
      for (Index k = 0; k < K_; ++k) {
        if (active_(k, n) == 0.0) continue;
        const double q = prob_.trace.gains(k, n) / r[n];
        b += q * bx(k, n) / diag(k, n);
        g += q * q / diag(k, n);
      }
      beta[n] = b;
      gamma[n] = g;
      num += b / (r[n] * (1.0 + g));
      den += 1.0 / (r[n] * r[n] * (1.0 + g));
    }
    yl = num / den;
    yx.resize(K_, N_);
    for (Index n = 0; n < N_; ++n) {
      const double alpha = (beta[n] - yl / r[n]) / (1.0 + gamma[n]);
      for (Index k = 0; k < K_; ++k) {
        yx(k, n) = active_(k, n) == 0.0
                       ? 0.0
                       : (bx(k, n) - prob_.trace.gains(k, n) / r[n] * alpha) / diag(k, n);
      }
    }
  }

  bool newton_step(double t) {
    const Vector r = slack_rounds();
    const Vector sd = slack_devices(x_);
    Matrix gx = Matrix::Zero(K_, N_), diag = Matrix::Ones(K_, N_);
    double gl = -t;
    for (Index n = 0; n < N_; ++n) gl += 1.0 / r[n];
    Matrix U = Matrix::Zero(K_, N_);  // device rank-one factors, row k
    for (Index k = 0; k < K_; ++k) {
      const bool budget = prob_.average[k] > 0.0;
      for (Index n = 0; n < N_; ++n) {
        if (active_(k, n) == 0.0) continue;
        const double x = x_(k, n), c = cap_(k, n);
        double g = -1.0 / x + 1.0 / (c - x) - prob_.trace.gains(k, n) / r[n];
        double d = 1.0 / (x * x) + 1.0 / ((c - x) * (c - x));
        if (budget) {
          g += 2.0 * a_[n] * x / sd[k];
          d += 2.0 * a_[n] / sd[k];
          U(k, n) = 2.0 * a_[n] * x / sd[k];
        }
        gx(k, n) = g;
        diag(k, n) = d;
      }
    }
    // Woodbury over the K device terms.
    Matrix dx;
    double dl;
    solve_rounds(diag, r, -gx, -gl, dx, dl);
    std::vector<Matrix> Zx(K_);
    Vector Zl(K_);
    Matrix cap_mat = Matrix::Identity(K_, K_);
    for (Index j = 0; j < K_; ++j) {
      Matrix e = Matrix::Zero(K_, N_);
      e.row(j) = U.row(j);
      solve_rounds(diag, r, e, 0.0, Zx[j], Zl[j]);
      for (Index i = 0; i < K_; ++i) cap_mat(i, j) += U.row(i).dot(Zx[j].row(i));
    }
    Vector rhs(K_);
    for (Index i = 0; i < K_; ++i) rhs[i] = U.row(i).dot(dx.row(i));
    const Vector coef = cap_mat.partialPivLu().solve(rhs);
    for (Index j = 0; j < K_; ++j) {
      dx -= coef[j] * Zx[j];
      dl -= coef[j] * Zl[j];
    }
    const double decrement = -((gx.array() * dx.array()).sum() + gl * dl);
    if (decrement / 2.0 <= 1e-10) return false;
    const double f0 = value(x_, level_, t);
    double step = 1.0;
    for (int ls = 0; ls < 80; ++ls, step *= 0.5) {
      const Matrix xt = x_ + step * dx;
      const double lt = level_ + step * dl;
      if (!inside(xt, lt)) continue;
      if (value(xt, lt, t) <= f0 - 0.25 * step * decrement) {
        x_ = xt;
        level_ = lt;
        return true;
      }
    }
    return false;
  }

  const PowerProblem& prob_;
  Index K_, N_;
  Matrix cap_;
  Vector a_;
  Matrix active_;
  double terms_ = 0.0;
  Matrix x_;
  double level_ = 0.0;
};

}  // namespace

Feasibility check_feasibility(const PowerProblem& prob, double tolerance, int max_iters) {
  prob.validate();
  const Index K = prob.devices(), N = prob.rounds();
  const Matrix cap = prob.amplitude_cap();
  const Vector weights = prob.coeffs.Ghat / static_cast<double>(N);

  LevelBarrier barrier(prob);
  Feasibility f;
  f.iterations = barrier.run(tolerance, max_iters);
  f.amplitude = barrier.amplitude();
  f.lower = (prob.trace.gains.array() * f.amplitude.array()).colwise().sum().minCoeff();

  // Upper bound: sum_k support_k(w .* h_k) >= l* for any round weights w.
  const Vector w = barrier.round_weights();
  double upper = 0.0;
  Vector xk;
  for (Index k = 0; k < K; ++k) {
    const Vector v = w.cwiseProduct(prob.trace.gains.row(k).transpose());
    upper += box_ellipsoid_support(v, cap.row(k).transpose(), weights, prob.average[k], xk);
  }
  f.level = upper;
  f.converged = upper - f.lower <= 1e3 * tolerance * std::max(1.0, std::abs(upper));
  f.feasible = f.lower >= static_cast<double>(K) * (1.0 - 1e-9);
  return f;
}

// ---------------------------------------------------------------------------
// Benchmarks

PowerSchedule policy_fixed_power(const PowerProblem& prob, FixedPowerMode mode) {
  prob.validate();
  PowerSchedule s;
  s.mode = "fixed-" + to_string(mode);
  s.power.resize(prob.devices(), prob.rounds());
  for (Index n = 0; n < prob.rounds(); ++n) {
    for (Index k = 0; k < prob.devices(); ++k) {
      s.power(k, n) = mode == FixedPowerMode::Literal ? prob.average[k]
                                                      : prob.average[k] / prob.coeffs.Ghat[n];
    }
  }
  s.amplitude = s.power.cwiseSqrt();
  s.objective = effective_gap(s.power, prob);
  const Vector spend = prob.average_spend(s.power);
  for (Index k = 0; k < prob.devices(); ++k) {
    if (spend[k] > prob.average[k] + 1e-9) s.budget_violated = true;
    for (Index n = 0; n < prob.rounds(); ++n)
      if (s.power(k, n) * prob.coeffs.Ghat[n] > prob.peak[k] + 1e-9) s.budget_violated = true;
  }
  return s;
}

PowerSchedule policy_mse_min(const PowerProblem& prob) {
  prob.validate();
  PowerSchedule s;
  s.mode = "mse-min";
  s.amplitude.resize(prob.devices(), prob.rounds());
  for (Index n = 0; n < prob.rounds(); ++n) {
    for (Index k = 0; k < prob.devices(); ++k) {
      const double cap =
          std::sqrt(std::min(prob.peak[k], prob.average[k]) / prob.coeffs.Ghat[n]);
      const double h = prob.trace.gains(k, n);
      s.amplitude(k, n) = h > 0.0 ? std::min(1.0 / h, cap) : cap;
    }
  }
  s.power = s.amplitude.array().square();
  s.objective = effective_gap(s.power, prob);
  return s;
}

PowerSchedule policy_inversion(const PowerProblem& prob) {
  prob.validate();
  PowerSchedule s;
  s.mode = "inversion";
  const Matrix cap = prob.amplitude_cap();
  s.amplitude.resize(prob.devices(), prob.rounds());
  for (Index n = 0; n < prob.rounds(); ++n) {
    for (Index k = 0; k < prob.devices(); ++k) {
      const double h = prob.trace.gains(k, n);
      s.amplitude(k, n) = h > 0.0 ? std::min(1.0 / h, cap(k, n)) : cap(k, n);
    }
  }
  s.power = s.amplitude.array().square();
  s.objective = effective_gap(s.power, prob);
  const Vector spend = prob.average_spend(s.power);
  for (Index k = 0; k < prob.devices(); ++k)
    if (spend[k] > prob.average[k] + 1e-9) s.budget_violated = true;
  return s;
}

// ---------------------------------------------------------------------------
// Oracle: FISTA with backtracking and adaptive restart on the amplitudes.

namespace {

struct SmoothObjective {
  const PowerProblem& prob;
  Vector nu;        // alignment multipliers (case II)
  double rho = 0.0; // alignment penalty (case II)

  double value(const Matrix& x, Matrix* grad) const {
    const auto& c = prob.coeffs;
    const Index K = prob.devices();
    const double Kd = static_cast<double>(K);
    double f = 0.0;
    if (grad) grad->resize(K, prob.rounds());
    for (Index n = 0; n < prob.rounds(); ++n) {
      double S = 0.0;
      for (Index k = 0; k < K; ++k) S += prob.trace.gains(k, n) * x(k, n);
      const double r = S - Kd;
      double round = 0.0;
      for (Index k = 0; k < K; ++k) {
        const double e = prob.trace.gains(k, n) * x(k, n) - 1.0;
        round += c.J[n] * c.B[n] * e * e;
      }
      double coupling = 0.0;
      if (prob.gap_case() == GapCase::I) {
        round += c.J[n] * c.A[n] * r * r;
        coupling = 2.0 * c.J[n] * c.A[n] * r;
      } else {
        round += nu[n] * r + 0.5 * rho * r * r;
        coupling = nu[n] + rho * r;
      }
      f += round;
      if (grad) {
        for (Index k = 0; k < K; ++k) {
          const double h = prob.trace.gains(k, n);
          (*grad)(k, n) = 2.0 * c.J[n] * c.B[n] * h * (h * x(k, n) - 1.0) + coupling * h;
        }
      }
    }
    return f;
  }

  double lipschitz() const {
    const auto& c = prob.coeffs;
    double L = 0.0;
    for (Index n = 0; n < prob.rounds(); ++n) {
      const Vector h = prob.trace.gains.col(n);
      const double coupling = prob.gap_case() == GapCase::I ? 2.0 * c.J[n] * c.A[n] : rho;
      L = std::max(L, 2.0 * c.J[n] * c.B[n] * h.cwiseAbs2().maxCoeff() + coupling * h.squaredNorm());
    }
    return std::max(L, 1e-300);
  }
};

struct Projector {
  const PowerProblem& prob;
  Matrix cap;
  Vector weights;

  explicit Projector(const PowerProblem& p)
      : prob(p), cap(p.amplitude_cap()),
        weights(p.coeffs.Ghat / static_cast<double>(p.rounds())) {}

  Matrix operator()(const Matrix& y) const {
    Matrix x(y.rows(), y.cols());
    for (Index k = 0; k < y.rows(); ++k) {
      x.row(k) = box_ellipsoid_project(y.row(k).transpose(), cap.row(k).transpose(), weights,
                                       prob.average[k])
                     .transpose();
    }
    return x;
  }
};

struct FistaResult {
  Matrix x;
  int iterations = 0;
  bool converged = false;
};

FistaResult fista(const SmoothObjective& obj, const Projector& proj, Matrix x, double tol,
                  int max_iters) {
  const double Lmax = obj.lipschitz();
  double L = Lmax / 64.0;
  Matrix y = x, x_prev = x, g, gx;
  double t = 1.0;
  FistaResult r;
  int it = 0;
  for (; it < max_iters; ++it) {
    const double fy = obj.value(y, &g);
    Matrix xn;
    for (;;) {
      xn = proj(y - g / L);
      const Matrix d = xn - y;
      const double fx = obj.value(xn, nullptr);
      if (fx <= fy + (g.array() * d.array()).sum() + 0.5 * L * d.squaredNorm() + 1e-15 * std::abs(fy) ||
          L >= Lmax) {
        break;
      }
      L = std::min(2.0 * L, Lmax);
    }
    // gradient mapping at the new point
    obj.value(xn, &gx);
    const Matrix step = xn - proj(xn - gx / Lmax);
    if ((Lmax * step).cwiseAbs().maxCoeff() <= tol) {
      x = xn;
      r.converged = true;
      break;
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if (((y - xn).array() * (xn - x).array()).sum() > 0.0) {
      t = 1.0;  // restart momentum
      y = xn;
    } else {
      y = xn + ((t - 1.0) / tn) * (xn - x);
      t = tn;
    }
    x_prev = x;
    x = xn;
  }
  r.x = x;
  r.iterations = it;
  return r;
}

}  // namespace

PowerSchedule oracle_projected_gradient(const PowerProblem& prob, const OracleOptions& opts) {
  prob.validate();
  const Index K = prob.devices(), N = prob.rounds();
  Projector proj(prob);
  Matrix x0 = Matrix::Zero(K, N);
  if (opts.seed != 0) {
    Rng rng = make_rng(opts.seed, 7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Index k = 0; k < K; ++k)
      for (Index n = 0; n < N; ++n) x0(k, n) = u(rng) * proj.cap(k, n);
    x0 = proj(x0);
  }

  PowerSchedule s;
  s.mode = "oracle";
  SmoothObjective obj{prob, Vector::Zero(N), 0.0};
  if (prob.gap_case() == GapCase::I) {
    FistaResult r = fista(obj, proj, x0, opts.tolerance, opts.max_iters);
    s.amplitude = r.x;
    s.iterations = r.iterations;
    s.converged = r.converged;
  } else {
    double scale = 0.0;
    for (Index n = 0; n < N; ++n) scale = std::max(scale, prob.coeffs.J[n] * prob.coeffs.B[n]);
    obj.rho = 10.0 * scale;
    Matrix x = x0;
    s.converged = false;
    for (int outer = 0; outer < 500; ++outer) {
      FistaResult r = fista(obj, proj, x, opts.tolerance, opts.max_iters);
      x = r.x;
      s.iterations += r.iterations;
      const Vector agg = (prob.trace.gains.array() * x.array()).colwise().sum().transpose();
      const Vector viol = agg.array() - static_cast<double>(K);
      obj.nu += obj.rho * viol;
      if (viol.cwiseAbs().maxCoeff() <= 1e-11 && r.converged) {
        s.converged = true;
        break;
      }
      if (outer % 10 == 9) obj.rho *= 2.0;
    }
    s.amplitude = x;
    s.round_duals = obj.nu;
  }
  s.power = s.amplitude.array().square();
  s.objective = effective_gap(s.power, prob);
  recover_duals(s, prob);
  return s;
}

// ---------------------------------------------------------------------------
// Dual recovery and KKT diagnostics

namespace {

// d/dx of the effective gap (no multipliers).
Matrix objective_gradient(const Matrix& x, const PowerProblem& prob) {
  SmoothObjective obj{prob, Vector::Zero(prob.rounds()), 0.0};
  Matrix g;
  obj.value(x, &g);
  return g;
}

enum class Clip { Zero, Free, Cap };

Clip classify(double x, double cap) {
  const double tol = 1e-12 * std::max(1.0, cap);
  if (x <= tol) return Clip::Zero;
  if (x >= cap - tol) return Clip::Cap;
  return Clip::Free;
}

}  // namespace

void recover_duals(PowerSchedule& s, const PowerProblem& prob) {
  const Index K = prob.devices(), N = prob.rounds();
  const Matrix cap = prob.amplitude_cap();
  const Matrix grad = objective_gradient(s.amplitude, prob);
  const Vector spend = prob.average_spend(s.power);
  const double Nd = static_cast<double>(N);
  std::vector<bool> slack(K);
  for (Index k = 0; k < K; ++k)
    slack[k] = spend[k] < prob.average[k] * (1.0 - 1e-7) - 1e-12;

  if (prob.gap_case() == GapCase::I) {
    s.device_duals = Vector::Zero(K);
    for (Index k = 0; k < K; ++k) {
      if (slack[k]) continue;
      double num = 0.0, den = 0.0;
      for (Index n = 0; n < N; ++n) {
        if (classify(s.amplitude(k, n), cap(k, n)) != Clip::Free) continue;
        const double a = 2.0 * prob.coeffs.Ghat[n] * s.amplitude(k, n) / Nd;
        num += a * (-grad(k, n));
        den += a * a;
      }
      s.device_duals[k] = den > 0.0 ? std::max(0.0, num / den) : 0.0;
    }
    s.round_duals.resize(0);
    return;
  }

  // unknowns: lambda_k for budget-tight devices, then mu_n
  std::vector<Index> col(K, -1);
  Index cols = 0;
  for (Index k = 0; k < K; ++k)
    if (!slack[k]) col[k] = cols++;
  const Index mu0 = cols;
  cols += N;
  std::vector<std::pair<Index, Index>> rows;
  for (Index n = 0; n < N; ++n)
    for (Index k = 0; k < K; ++k)
      if (classify(s.amplitude(k, n), cap(k, n)) == Clip::Free) rows.emplace_back(k, n);
  Matrix M = Matrix::Zero(static_cast<Index>(rows.size()), cols);
  Vector rhs(static_cast<Index>(rows.size()));
  for (Index r = 0; r < static_cast<Index>(rows.size()); ++r) {
    const auto [k, n] = rows[r];
    if (col[k] >= 0) M(r, col[k]) = 2.0 * prob.coeffs.Ghat[n] * s.amplitude(k, n) / Nd;
    M(r, mu0 + n) = prob.trace.gains(k, n);
    rhs[r] = -grad(k, n);
  }
  Vector sol = rows.empty() ? Vector::Zero(cols) : Vector(M.completeOrthogonalDecomposition().solve(rhs));
  s.device_duals = Vector::Zero(K);
  for (Index k = 0; k < K; ++k)
    if (col[k] >= 0) s.device_duals[k] = std::max(0.0, sol[col[k]]);
  s.round_duals = sol.tail(N);
}

KktReport kkt_residuals(const PowerSchedule& s, const PowerProblem& prob) {
  prob.validate();
  const Index K = prob.devices(), N = prob.rounds();
  require(s.amplitude.rows() == K && s.amplitude.cols() == N, "schedule shape mismatch");
  require(s.device_duals.size() == K, "schedule has no device multipliers attached");
  const bool aligned = prob.gap_case() == GapCase::II;
  require(!aligned || s.round_duals.size() == N, "case II schedule needs round multipliers");
  const Matrix cap = prob.amplitude_cap();
  const Matrix x = s.power.cwiseMax(0.0).cwiseSqrt();
  const Matrix grad = objective_gradient(x, prob);
  const double Nd = static_cast<double>(N);

  KktReport r;
  for (Index n = 0; n < N; ++n) {
    for (Index k = 0; k < K; ++k) {
      double d = grad(k, n) + 2.0 * s.device_duals[k] * prob.coeffs.Ghat[n] * x(k, n) / Nd;
      if (aligned) d += s.round_duals[n] * prob.trace.gains(k, n);
      switch (classify(x(k, n), cap(k, n))) {
        case Clip::Free: r.stationarity = std::max(r.stationarity, std::abs(d)); break;
        case Clip::Zero: r.bound_sign = std::max(r.bound_sign, -d); break;
        case Clip::Cap: r.bound_sign = std::max(r.bound_sign, d); break;
      }
      r.primal = std::max(r.primal, s.power(k, n) * prob.coeffs.Ghat[n] - prob.peak[k]);
      r.primal = std::max(r.primal, -s.power(k, n));
    }
    if (aligned) {
      double S = 0.0;
      for (Index k = 0; k < K; ++k) S += prob.trace.gains(k, n) * x(k, n);
      r.primal = std::max(r.primal, std::abs(S - static_cast<double>(K)));
    }
  }
  const Vector spend = prob.average_spend(s.power);
  for (Index k = 0; k < K; ++k) {
    r.primal = std::max(r.primal, spend[k] - prob.average[k]);
    r.complementarity =
        std::max(r.complementarity, std::abs(s.device_duals[k] * (prob.average[k] - spend[k])));
    r.dual_sign = std::max(r.dual_sign, -s.device_duals[k]);
  }
  r.primal = std::max(r.primal, 0.0);
  return r;
}

// ---------------------------------------------------------------------------

void export_schedule(const PowerSchedule& s, const PowerProblem& prob, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write schedule to " + path);
  out << "round,device,gain,amplitude,power,power_times_Ghat\n";
  char buf[256];
  for (Index n = 0; n < prob.rounds(); ++n) {
    for (Index k = 0; k < prob.devices(); ++k) {
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g,%.17g,%.17g\n",
                    static_cast<long long>(n + 1), static_cast<long long>(k + 1),
                    prob.trace.gains(k, n), s.amplitude(k, n), s.power(k, n),
                    s.power(k, n) * prob.coeffs.Ghat[n]);
      out << buf;
    }
  }
  if (!out) throw IoError("failed while writing " + path);
}

std::string schedule_summary(const PowerSchedule& s, const PowerProblem& prob) {
  std::ostringstream o;
  o.precision(10);
  o << "mode: " << s.mode << "\n"
    << "case: " << to_string(prob.gap_case()) << "\n"
    << "objective: " << s.objective << "\n"
    << "dual_value: " << s.dual_value << "\n"
    << "relative_gap: " << s.relative_gap << "\n"
    << "converged: " << (s.converged ? "yes" : "no") << "\n"
    << "iterations: " << s.iterations << "\n"
    << "repaired: " << (s.repaired ? "yes" : "no") << "\n"
    << "budget_violated: " << (s.budget_violated ? "yes" : "no") << "\n";
  const Vector spend = prob.average_spend(s.power);
  o << "device,dual,average_spend,average_budget\n";
  for (Index k = 0; k < prob.devices(); ++k) {
    o << (k + 1) << ',' << (s.device_duals.size() == prob.devices() ? s.device_duals[k] : 0.0)
      << ',' << spend[k] << ',' << prob.average[k] << "\n";
  }
  if (s.round_duals.size() == prob.rounds()) {
    o << "round,dual\n";
    for (Index n = 0; n < prob.rounds(); ++n) o << (n + 1) << ',' << s.round_duals[n] << "\n";
  }
  if (s.device_duals.size() == prob.devices() &&
      (prob.gap_case() == GapCase::I || s.round_duals.size() == prob.rounds())) {
    KktReport r = kkt_residuals(s, prob);
    o << "kkt_stationarity: " << r.stationarity << "\n"
      << "kkt_bound_sign: " << r.bound_sign << "\n"
      << "kkt_primal: " << r.primal << "\n"
      << "kkt_complementarity: " << r.complementarity << "\n";
  }
  return o.str();
}

}  // namespace airfeel
