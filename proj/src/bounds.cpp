#include "airfeel/bounds.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace airfeel {

RateKind parse_rate_kind(const std::string& name) {
  if (name == "fixed") return RateKind::Fixed;
  if (name == "diminishing") return RateKind::Diminishing;
  throw InvalidArgument("unknown rate kind '" + name + "' (expected fixed or diminishing)");
}

std::string to_string(RateKind k) { return k == RateKind::Fixed ? "fixed" : "diminishing"; }

std::string to_string(GapCase c) { return c == GapCase::I ? "I" : "II"; }

RateSchedule build_schedule(const RateSpec& spec, Index rounds, double delta, double L) {
  require(rounds >= 0, "round count must be nonnegative");
  require(delta > 0.0 && L >= delta, "need L >= delta > 0");
  const double upper = 2.0 / (2.0 + L);
  auto fail = [](const std::string& what, double lhs, double rhs) {
    std::ostringstream msg;
    msg << "step-size hypothesis violated: " << what << " (" << lhs << " vs " << rhs << ")";
    throw InvalidArgument(msg.str());
  };

  RateSchedule s;
  s.kind = spec.kind;
  s.spec = spec;
  s.eta.resize(rounds);
  if (spec.kind == RateKind::Fixed) {
    if (!(spec.eta > 0.0)) fail("eta > 0", spec.eta, 0.0);
    if (spec.eta > upper) fail("eta <= 2/(2+L)", spec.eta, upper);
    if (upper > 1.0 / delta) fail("2/(2+L) <= 1/delta", upper, 1.0 / delta);
    s.eta.setConstant(spec.eta);
  } else {
    if (!(spec.v > 0.0)) fail("v > 0", spec.v, 0.0);
    if (!(spec.u > 1.0 / delta)) fail("u > 1/delta", spec.u, 1.0 / delta);
    const double first = spec.u / (1.0 + spec.v);
    if (first > upper) fail("u/(1+v) <= 2/(2+L)", first, upper);
    for (Index n = 0; n < rounds; ++n) s.eta[n] = spec.u / (static_cast<double>(n + 1) + spec.v);
  }
  return s;
}

double BoundCoefficients::contraction() const {
  double p = 1.0;
  for (Index n = 0; n < C.size(); ++n) p *= C[n];
  return p;
}

BoundCoefficients build_coefficients(GapCase gap_case, const RateSchedule& sched,
                                     const LearningConstants& lc, Index devices, Index batch,
                                     const CoefficientOptions& options) {
  require(devices >= 1, "device count must be at least 1");
  require(batch >= 1, "batch size must be at least 1");
  const Index N = sched.rounds();
  BoundCoefficients c;
  c.gap_case = gap_case;
  c.devices = devices;
  c.batch = batch;
  c.dimension = lc.sigma.size();
  c.L = lc.L;
  c.delta = lc.delta;
  c.sigma_sq = lc.sigma_sq_norm();
  c.rate = sched.kind;
  c.eta = sched.eta;
  c.C = (1.0 - lc.delta * sched.eta.array()).matrix();
  for (Index n = 0; n < N; ++n) {
    require(c.C[n] > 0.0 && c.C[n] < 1.0, "contraction factor must lie in (0, 1)");
  }

  if (options.G) {
    require(options.G->size() == N, "gradient-bound override needs one value per round");
    c.G = *options.G;
  } else {
    c.G = Vector::Constant(N, 2.0 * lc.W * lc.L);
  }
  c.Ghat = (c.G.array().square() + c.sigma_sq / static_cast<double>(batch)).matrix();

  // J^(n) = prod_{i=n}^{N} C^(i) / (2 C^(n)) = prod_{i>n} C^(i) / 2
  c.J.resize(N);
  if (sched.kind == RateKind::Fixed) {
    for (Index n = 0; n < N; ++n) c.J[n] = std::pow(c.C[n], static_cast<double>(N - 1 - n)) / 2.0;
  } else {
    double tail = 1.0;
    for (Index n = N - 1; n >= 0; --n) {
      c.J[n] = tail / 2.0;
      tail *= c.C[n];
    }
  }

  const double K = static_cast<double>(devices);
  const Vector eta_sq = sched.eta.array().square();
  c.A = ((1.0 + eta_sq.array() * lc.L * lc.L) * c.G.array().square() / (K * K)).matrix();
  const double b_div =
      (gap_case == GapCase::II && options.case2_divisor == BDivisor::KSquared) ? K * K : K;
  c.B = (eta_sq.array() * lc.L * c.Ghat.array() / b_div).matrix();
  if (gap_case == GapCase::II) c.A.setZero();
  return c;
}

namespace {

void check_lengths(const Vector& biases, const Vector& mses, const BoundCoefficients& c) {
  require(biases.size() == c.rounds() && mses.size() == c.rounds(),
          "bias and MSE sequences need one entry per round");
}

void check_powers(const Matrix& powers, const ChannelTrace& trace, const BoundCoefficients& c) {
  require(powers.rows() == trace.devices() && powers.cols() == trace.rounds(),
          "power schedule shape does not match the channel trace");
  require(trace.rounds() == c.rounds(), "channel trace length does not match the coefficients");
  require((powers.array() >= 0.0).all(), "powers must be nonnegative");
}

}  // namespace

GapBound theorem1_bound(double initial_gap, const Vector& biases, const Vector& mses,
                        const BoundCoefficients& c) {
  check_lengths(biases, mses, c);
  require(c.rate == RateKind::Fixed, "theorem bound needs a fixed-rate schedule");
  const Index N = c.rounds();
  const double K = static_cast<double>(c.devices);
  GapBound b;
  b.batch_assumption = c.batch == N;
  b.floor_terms.resize(N);
  b.gap_terms.resize(N);
  const double variance =
      N > 0 ? c.sigma_sq / (2.0 * c.delta * static_cast<double>(N) * K * K) : 0.0;
  for (Index n = 0; n < N; ++n) {
    const double w = c.J[n];
    const double e2 = c.eta[n] * c.eta[n];
    const double bias_sq = biases[n] * biases[n];
    b.floor_terms[n] = w * bias_sq;
    b.gap_terms[n] = w * (e2 * c.L * variance + e2 * c.L * c.L * bias_sq + e2 * c.L * mses[n]);
  }
  b.floor = b.floor_terms.sum();
  b.gap = std::pow(N > 0 ? c.C[0] : 1.0, static_cast<double>(N)) * initial_gap + b.gap_terms.sum();
  b.total = b.floor + b.gap;
  return b;
}

GapBound corollary1_bound(double initial_gap, const Vector& biases, const Vector& mses,
                          const BoundCoefficients& c) {
  check_lengths(biases, mses, c);
  const Index N = c.rounds();
  const double K = static_cast<double>(c.devices);
  GapBound b;
  b.batch_assumption = c.batch == N;
  b.floor_terms.resize(N);
  b.gap_terms.resize(N);
  const double variance = c.sigma_sq / (2.0 * static_cast<double>(c.batch) * K * K);
  for (Index n = 0; n < N; ++n) {
    const double w = c.J[n];
    const double e2 = c.eta[n] * c.eta[n];
    const double bias_sq = biases[n] * biases[n];
    b.floor_terms[n] = w * bias_sq;
    b.gap_terms[n] = w * (e2 * c.L * variance + e2 * c.L * c.L * bias_sq + e2 * c.L * mses[n]);
  }
  b.floor = b.floor_terms.sum();
  b.gap = c.contraction() * initial_gap + b.gap_terms.sum();
  b.total = b.floor + b.gap;
  return b;
}

double effective_gap_caseI(const Matrix& powers, const ChannelTrace& trace,
                           const BoundCoefficients& c) {
  check_powers(powers, trace, c);
  const double K = static_cast<double>(trace.devices());
  double phi = 0.0;
  for (Index n = 0; n < trace.rounds(); ++n) {
    const Vector eff = trace.gains.col(n).cwiseProduct(powers.col(n).cwiseSqrt());
    const double align = eff.sum() - K;
    phi += c.J[n] * c.A[n] * align * align + c.J[n] * c.B[n] * (eff.array() - 1.0).square().sum();
  }
  return phi;
}

double effective_gap_caseII(const Matrix& powers, const ChannelTrace& trace,
                            const BoundCoefficients& c) {
  check_powers(powers, trace, c);
  double theta = 0.0;
  for (Index n = 0; n < trace.rounds(); ++n) {
    const Vector eff = trace.gains.col(n).cwiseProduct(powers.col(n).cwiseSqrt());
    theta += c.J[n] * c.B[n] * (eff.array() - 1.0).square().sum();
  }
  return theta;
}

namespace {

GapBound power_bound(double initial_gap, const Matrix& powers, const ChannelTrace& trace,
                     double noise_variance, const BoundCoefficients& c, bool with_alignment) {
  check_powers(powers, trace, c);
  require(noise_variance >= 0.0, "noise variance must be nonnegative");
  const Index N = c.rounds();
  const double K = static_cast<double>(c.devices);
  const double q = static_cast<double>(c.dimension);
  GapBound b;
  b.batch_assumption = c.batch == N;
  b.floor_terms = Vector::Zero(N);
  b.gap_terms.resize(N);
  for (Index n = 0; n < N; ++n) {
    const Vector eff = trace.gains.col(n).cwiseProduct(powers.col(n).cwiseSqrt());
    const double e2 = c.eta[n] * c.eta[n];
    const double variance = e2 * c.L * c.sigma_sq / (2.0 * static_cast<double>(c.batch) * K * K);
    const double noise = e2 * noise_variance * c.L * q / (K * K);
    double term = c.B[n] * (eff.array() - 1.0).square().sum() + noise + variance;
    if (with_alignment) {
      const double align = eff.sum() - K;
      // the A term mixes floor (bias^2) and gap (eta^2 L^2 bias^2) contributions
      const double bias_sq = c.G[n] * c.G[n] / (K * K) * align * align;
      b.floor_terms[n] = c.J[n] * bias_sq;
      term += c.A[n] * align * align - bias_sq;
    }
    b.gap_terms[n] = c.J[n] * term;
  }
  b.floor = b.floor_terms.sum();
  b.gap = c.contraction() * initial_gap + b.gap_terms.sum();
  b.total = b.floor + b.gap;
  return b;
}

}  // namespace

GapBound prop1_bound(double initial_gap, const Matrix& powers, const ChannelTrace& trace,
                     double noise_variance, const BoundCoefficients& c) {
  require(c.gap_case == GapCase::I, "proposition 1 bound needs case I coefficients");
  return power_bound(initial_gap, powers, trace, noise_variance, c, true);
}

GapBound prop2_bound(double initial_gap, const Matrix& powers, const ChannelTrace& trace,
                     double noise_variance, const BoundCoefficients& c) {
  require(c.gap_case == GapCase::II, "proposition 2 bound needs case II coefficients");
  return power_bound(initial_gap, powers, trace, noise_variance, c, false);
}

void export_bound_trace(const BoundCoefficients& c, const GapBound& bound,
                        const std::string& path) {
  require(bound.floor_terms.size() == c.rounds() && bound.gap_terms.size() == c.rounds(),
          "bound terms do not match the coefficients");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write bound trace to " + path);
  out << "n,C,J,A,B,floor,gap\n";
  char buf[256];
  for (Index n = 0; n < c.rounds(); ++n) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(n + 1), c.C[n], c.J[n], c.A[n], c.B[n],
                  bound.floor_terms[n], bound.gap_terms[n]);
    out << buf;
  }
  if (!out) throw IoError("failed while writing " + path);
}

}  // namespace airfeel
