#include "airfeel/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "airfeel/kernels.hpp"

namespace airfeel {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string hex(std::uint64_t x) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n\"'");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n\"'");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty() && item != "[" && item != "]") out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(x))
    throw InvalidArgument("config key '" + key + "': expected a number, got '" + value + "'");
  return x;
}

long long to_integer(const std::string& key, const std::string& value) {
  const double x = to_double(key, value);
  if (x != std::floor(x) || std::abs(x) > 9.0e15)
    throw InvalidArgument("config key '" + key + "': expected an integer, got '" + value + "'");
  return static_cast<long long>(x);
}

std::uint64_t to_seed(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used, 0);
    if (used == v.size() && v.front() != '-') return s;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("config key '" + key + "': expected a nonnegative seed, got '" + value + "'");
}

bool to_bool(const std::string& key, const std::string& value) {
  const std::string v = lower(trim(value));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw InvalidArgument("config key '" + key + "': expected true or false, got '" + value + "'");
}

template <class T>
std::string join(const std::vector<T>& xs, auto&& show) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += show(xs[i]);
  }
  return out;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

void finish_output(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

// mean (x'w - t)^2 over the held-out set from its cached moments
double holdout_error(const Vector& w, const Dataset& ho) {
  const double sq = w.dot(ho.gram * w) - 2.0 * w.dot(ho.moment) + ho.label_energy;
  return std::max(sq, 0.0) / static_cast<double>(ho.size());
}

}  // namespace

Policy parse_policy(const std::string& name) {
  const std::string n = lower(trim(name));
  if (n == "fixed" || n == "fixed-power") return Policy::Fixed;
  if (n == "mse-min" || n == "mse") return Policy::MseMin;
  if (n == "case1" || n == "case-i" || n == "i") return Policy::CaseI;
  if (n == "case2" || n == "case-ii" || n == "ii") return Policy::CaseII;
  if (n == "inversion") return Policy::Inversion;
  if (n == "constant") return Policy::Constant;
  throw InvalidArgument("unknown policy '" + name +
                        "' (fixed, mse-min, case1, case2, inversion, constant)");
}

std::string to_string(Policy p) {
  switch (p) {
    case Policy::Fixed: return "fixed";
    case Policy::MseMin: return "mse-min";
    case Policy::CaseI: return "case1";
    case Policy::CaseII: return "case2";
    case Policy::Inversion: return "inversion";
    case Policy::Constant: return "constant";
  }
  return "?";
}

BDivisor parse_b_divisor(const std::string& name) {
  const std::string n = lower(trim(name));
  if (n == "k") return BDivisor::K;
  if (n == "k2" || n == "k^2" || n == "ksquared") return BDivisor::KSquared;
  throw InvalidArgument("unknown B divisor '" + name + "' (k, k2)");
}

std::string to_string(BDivisor d) { return d == BDivisor::K ? "k" : "k2"; }

DualMethod parse_dual_method(const std::string& name) {
  const std::string n = lower(trim(name));
  if (n == "newton") return DualMethod::Newton;
  if (n == "subgradient") return DualMethod::Subgradient;
  throw InvalidArgument("unknown dual method '" + name + "' (newton, subgradient)");
}

std::string to_string(DualMethod m) { return m == DualMethod::Newton ? "newton" : "subgradient"; }

// ---------------------------------------------------------------------------
// configuration

double ExperimentConfig::noise_std() const { return std::sqrt(noise_variance); }

Index ExperimentConfig::effective_batch() const {
  return batch_size > 0 ? batch_size : std::min(rounds, samples_per_device);
}

double ExperimentConfig::device_average_power(Index k) const {
  return budget_scale * average_power[static_cast<std::size_t>(k) % average_power.size()];
}

void ExperimentConfig::validate() const {
  require(devices >= 1, "devices must be at least 1");
  require(rounds >= 1, "rounds must be at least 1");
  require(dimension >= 5, "dimension must be at least 5: the label uses coordinate 5");
  require(samples_per_device >= 1, "samples_per_device must be at least 1");
  require(batch_size >= 0 && batch_size <= samples_per_device,
          "batch_size must lie in [0, samples_per_device]");
  require(label_noise >= 0.0, "label_noise must be nonnegative");
  require(ridge >= 0.0, "ridge must be nonnegative");
  require(noise_variance >= 0.0, "noise_variance must be nonnegative");
  require(!average_power.empty(), "average_power needs at least one value");
  for (double p : average_power) require(p > 0.0, "average_power values must be positive");
  require(peak_multiplier > 0.0, "peak_multiplier must be positive");
  require(budget_scale > 0.0, "budget_scale must be positive");
  require(!policies.empty(), "at least one policy is required");
  require(trials >= 1, "trials must be at least 1");
  require(W_factor > 0.0, "w_factor must be positive");
  require(!W || *W > 0.0, "w must be positive");
  require(gramian_shift >= 0.0, "gramian_shift must be nonnegative");
  require(holdout_samples >= 1, "holdout_samples must be at least 1");
  require(constant_power >= 0.0, "constant_power must be nonnegative");
  require(constant_silent_fraction >= 0.0 && constant_silent_fraction <= 1.0,
          "constant_silent_fraction must lie in [0, 1]");
  require(threads >= 0, "threads must be nonnegative");
  for (Index n : bound_rounds) require(n >= 1, "bound_rounds entries must be at least 1");
}

void apply_setting(ExperimentConfig& c, const std::string& raw_key, const std::string& value) {
  std::string key = lower(trim(raw_key));
  std::replace(key.begin(), key.end(), '-', '_');
  const std::string v = trim(value);
  if (key == "dataset_seed" || key == "seed.dataset") c.dataset_seed = to_seed(key, v);
  else if (key == "channel_seed" || key == "seed.channel") c.channel_seed = to_seed(key, v);
  else if (key == "noise_seed" || key == "seed.noise") c.noise_seed = to_seed(key, v);
  else if (key == "batch_seed" || key == "seed.batch") c.batch_seed = to_seed(key, v);
  else if (key == "devices") c.devices = to_integer(key, v);
  else if (key == "rounds") c.rounds = to_integer(key, v);
  else if (key == "dimension") c.dimension = to_integer(key, v);
  else if (key == "samples_per_device") c.samples_per_device = to_integer(key, v);
  else if (key == "batch_size") c.batch_size = to_integer(key, v);
  else if (key == "label_noise") c.label_noise = to_double(key, v);
  else if (key == "ridge") c.ridge = to_double(key, v);
  else if (key == "noise_variance") c.noise_variance = to_double(key, v);
  else if (key == "noise_convention") c.noise_convention = parse_noise_convention(v);
  else if (key == "rate") c.rate.kind = parse_rate_kind(v);
  else if (key == "eta") c.rate.eta = to_double(key, v);
  else if (key == "rate_u") c.rate.u = to_double(key, v);
  else if (key == "rate_v") c.rate.v = to_double(key, v);
  else if (key == "average_power") {
    c.average_power.clear();
    for (const auto& s : split_list(v)) c.average_power.push_back(to_double(key, s));
  } else if (key == "peak_multiplier") c.peak_multiplier = to_double(key, v);
  else if (key == "budget_scale") c.budget_scale = to_double(key, v);
  else if (key == "policies") {
    c.policies.clear();
    for (const auto& s : split_list(v)) c.policies.push_back(parse_policy(s));
  } else if (key == "trials") c.trials = static_cast<int>(to_integer(key, v));
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "b_divisor") c.b_divisor = parse_b_divisor(v);
  else if (key == "fixed_power_mode") c.fixed_power = parse_fixed_power_mode(v);
  else if (key == "inner_mode") c.inner = parse_inner_mode(v);
  else if (key == "dual_method") c.dual_method = parse_dual_method(v);
  else if (key == "w_factor") c.W_factor = to_double(key, v);
  else if (key == "w") {
    if (lower(v) == "auto") c.W.reset();
    else c.W = to_double(key, v);
  } else if (key == "gramian_shift") c.gramian_shift = to_double(key, v);
  else if (key == "holdout_samples") c.holdout_samples = to_integer(key, v);
  else if (key == "redraw_dataset") c.redraw_dataset = to_bool(key, v);
  else if (key == "constant_power") c.constant_power = to_double(key, v);
  else if (key == "constant_silent_fraction") c.constant_silent_fraction = to_double(key, v);
  else if (key == "threads") c.threads = static_cast<int>(to_integer(key, v));
  else if (key == "bound_rounds") {
    c.bound_rounds.clear();
    for (const auto& s : split_list(v)) c.bound_rounds.push_back(to_integer(key, s));
  } else throw InvalidArgument("unknown config key '" + raw_key + "'");
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  CLI::ConfigINI ini;
  std::vector<CLI::ConfigItem> items;
  try {
    items = ini.from_config(in);
  } catch (const CLI::Error& e) {
    throw InvalidArgument(std::string("malformed config: ") + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    apply_setting(cfg, item.fullname(), value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  return parse_config(in);
}

std::string config_text(const ExperimentConfig& c) {
  auto seed = [](std::uint64_t s) { return std::to_string(s); };
  std::ostringstream o;
  o << "dataset_seed = " << seed(c.dataset_seed) << "\n"
    << "channel_seed = " << seed(c.channel_seed) << "\n"
    << "noise_seed = " << seed(c.noise_seed) << "\n"
    << "batch_seed = " << seed(c.batch_seed) << "\n"
    << "devices = " << c.devices << "\n"
    << "rounds = " << c.rounds << "\n"
    << "dimension = " << c.dimension << "\n"
    << "samples_per_device = " << c.samples_per_device << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "label_noise = " << num(c.label_noise) << "\n"
    << "ridge = " << num(c.ridge) << "\n"
    << "noise_variance = " << num(c.noise_variance) << "\n"
    << "noise_convention = " << to_string(c.noise_convention) << "\n"
    << "rate = " << to_string(c.rate.kind) << "\n"
    << "eta = " << num(c.rate.eta) << "\n"
    << "rate_u = " << num(c.rate.u) << "\n"
    << "rate_v = " << num(c.rate.v) << "\n"
    << "average_power = " << join(c.average_power, num) << "\n"
    << "peak_multiplier = " << num(c.peak_multiplier) << "\n"
    << "budget_scale = " << num(c.budget_scale) << "\n"
    << "policies = " << join(c.policies, [](Policy p) { return to_string(p); }) << "\n"
    << "trials = " << c.trials << "\n"
    << "output_dir = " << c.output_dir << "\n"
    << "b_divisor = " << to_string(c.b_divisor) << "\n"
    << "fixed_power_mode = " << to_string(c.fixed_power) << "\n"
    << "inner_mode = " << to_string(c.inner) << "\n"
    << "dual_method = " << to_string(c.dual_method) << "\n"
    << "w_factor = " << num(c.W_factor) << "\n"
    << "w = " << (c.W ? num(*c.W) : std::string("auto")) << "\n"
    << "gramian_shift = " << num(c.gramian_shift) << "\n"
    << "holdout_samples = " << c.holdout_samples << "\n"
    << "redraw_dataset = " << (c.redraw_dataset ? "true" : "false") << "\n"
    << "constant_power = " << num(c.constant_power) << "\n"
    << "constant_silent_fraction = " << num(c.constant_silent_fraction) << "\n"
    << "threads = " << c.threads << "\n"
    << "bound_rounds = " << join(c.bound_rounds, [](Index n) { return std::to_string(n); }) << "\n";
  return o.str();
}

namespace {

// where results go and how many threads compute them do not change them
ExperimentConfig canonical(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.threads = 0;
  c.output_dir = ".";
  return c;
}

}  // namespace

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const ExperimentConfig c = canonical(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_text(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// training

Workload prepare_workload(const ExperimentConfig& cfg, std::uint64_t dataset_seed) {
  cfg.validate();
  Workload wl;
  wl.data = generate_dataset(dataset_seed, cfg.devices, cfg.samples_per_device, cfg.dimension,
                             cfg.label_noise, cfg.ridge);
  wl.holdout = generate_holdout(substream_seed(dataset_seed, 0x686f6c64ULL), cfg.holdout_samples,
                                cfg.dimension, cfg.label_noise);
  wl.optimum = optimal_model(wl.data);
  LearningOptions lo;
  lo.gramian_shift = cfg.gramian_shift;
  lo.W_factor = cfg.W_factor;
  lo.W = cfg.W;
  wl.constants = learning_constants(wl.data, wl.optimum, lo);
  wl.rates = build_schedule(cfg.rate, cfg.rounds, wl.constants.delta, wl.constants.L);
  wl.batch = cfg.effective_batch();
  wl.noise_convention = cfg.noise_convention;
  wl.initial_gap = optimality_gap(Vector::Zero(cfg.dimension), wl.data, wl.optimum);
  return wl;
}

TrainingTrace run_training(const Workload& wl, const ChannelTrace& trace, const Matrix& power,
                           Rng& noise_rng, Rng& batch_rng) {
  const Dataset& ds = wl.data;
  const Index K = ds.devices(), q = ds.dimension(), N = trace.rounds();
  require(trace.devices() == K, "trace device count does not match the dataset");
  require(power.rows() == K && power.cols() == N, "power schedule must be K x N");
  require(wl.rates.rounds() >= N, "rate schedule is shorter than the trace");
  require(wl.batch >= 1 && wl.batch <= ds.samples_per_device(), "batch size out of range");
  require((power.array() >= 0.0).all(), "powers must be nonnegative");

  const double noise_std = effective_noise_std(trace.noise_std, wl.noise_convention);
  TrainingTrace tr;
  tr.loss.resize(N + 1);
  tr.gap.resize(N + 1);
  tr.prediction_error.resize(N + 1);
  tr.error_sq = Vector::Zero(N + 1);
  tr.errors = Matrix::Zero(q, N);
  tr.energy = Vector::Zero(K);
  tr.normal_convention = to_string(wl.optimum.convention);
  tr.noise_convention = to_string(wl.noise_convention);

  Vector w = Vector::Zero(q);
  auto record = [&](Index r) {
    tr.loss[r] = global_loss(w, ds);
    tr.gap[r] = optimality_gap(w, ds, wl.optimum);
    tr.prediction_error[r] = holdout_error(w, wl.holdout);
  };
  record(0);
  const double limit = tr.loss[0] > 0.0 ? 1e6 * tr.loss[0] : std::numeric_limits<double>::infinity();

  BatchSampler sampler(K, ds.samples_per_device());
  Matrix grads(q, K);
  Index done = 0;
  for (Index n = 0; n < N; ++n) {
    for (Index k = 0; k < K; ++k) {
      grads.col(k) = local_gradient(w, ds, k, sampler.draw(k, wl.batch, batch_rng));
      tr.energy[k] += power(k, n) * grads.col(k).squaredNorm() / static_cast<double>(q);
    }
    const Vector noise = draw_noise(q, noise_std, noise_rng);
    const Aggregate agg = aggregate_with_noise(grads, trace.gains.col(n), power.col(n), noise);
    tr.errors.col(n) = agg.estimate - grads.rowwise().mean();
    tr.error_sq[n + 1] = tr.errors.col(n).squaredNorm();
    w -= wl.rates.eta[n] * agg.estimate;
    const double loss = global_loss(w, ds);
    if (!std::isfinite(loss) || loss > limit) {
      tr.diverged = true;
      break;
    }
    record(n + 1);
    done = n + 1;
  }
  if (tr.diverged) {
    tr.loss.conservativeResize(done + 1);
    tr.gap.conservativeResize(done + 1);
    tr.prediction_error.conservativeResize(done + 1);
    tr.error_sq.conservativeResize(done + 1);
    tr.errors.conservativeResize(q, done);
  }
  if (done > 0) tr.energy /= static_cast<double>(done);
  tr.w = w;
  return tr;
}

PowerProblem make_problem(const ExperimentConfig& cfg, const Workload& wl,
                          const ChannelTrace& trace, GapCase gap_case) {
  const Index K = trace.devices();
  require(K == cfg.devices, "trace device count does not match the config");
  require(trace.rounds() <= wl.rates.rounds(), "rate schedule is shorter than the trace");
  RateSchedule rates = wl.rates;
  rates.eta.conservativeResize(trace.rounds());
  CoefficientOptions co;
  co.case2_divisor = cfg.b_divisor;
  PowerProblem p;
  p.trace = trace;
  p.coeffs = build_coefficients(gap_case, rates, wl.constants, K, wl.batch, co);
  p.average.resize(K);
  p.peak.resize(K);
  const double q = static_cast<double>(cfg.dimension);
  for (Index k = 0; k < K; ++k) {
    p.average[k] = q * cfg.device_average_power(k);
    p.peak[k] = cfg.peak_multiplier * p.average[k];
  }
  return p;
}

namespace {

SolverOptions solver_options(const ExperimentConfig& cfg) {
  SolverOptions o;
  o.inner = cfg.inner;
  o.method = cfg.dual_method;
  return o;
}

PowerSchedule constant_schedule(const ExperimentConfig& cfg, const PowerProblem& prob) {
  const Index K = prob.devices(), N = prob.rounds();
  const Index silent = static_cast<Index>(std::floor(cfg.constant_silent_fraction * K));
  PowerSchedule s;
  s.power = Matrix::Zero(K, N);
  s.power.topRows(K - silent).setConstant(cfg.constant_power);
  s.amplitude = s.power.cwiseSqrt();
  s.objective = effective_gap(s.power, prob);
  s.mode = "constant";
  const Vector spend = prob.average_spend(s.power);
  for (Index k = 0; k < K; ++k) {
    if (spend[k] > prob.average[k] + 1e-9) s.budget_violated = true;
    for (Index n = 0; n < N; ++n)
      if (s.power(k, n) * prob.coeffs.Ghat[n] > prob.peak[k] + 1e-9) s.budget_violated = true;
  }
  return s;
}

PowerSchedule schedule_for(Policy policy, const ExperimentConfig& cfg, const PowerProblem& probI,
                           const std::function<const PowerProblem&()>& probII) {
  switch (policy) {
    case Policy::Fixed: return policy_fixed_power(probI, cfg.fixed_power);
    case Policy::MseMin: return policy_mse_min(probI);
    case Policy::CaseI: return solve_caseI(probI, solver_options(cfg));
    case Policy::CaseII: return solve_caseII(probII(), solver_options(cfg));
    case Policy::Inversion: return policy_inversion(probI);
    case Policy::Constant: return constant_schedule(cfg, probI);
  }
  throw InvalidArgument("unknown policy");
}

enum class Status { Ok, Diverged, Infeasible };

struct Outcome {
  Status status = Status::Ok;
  TrainingTrace trace;
  double bound = 0.0;
  bool nonconverged = false;
  bool violated = false;
};

Vector nan_vector(Index n) { return Vector::Constant(n, kNaN); }

// mean and standard error of the selected rows, accumulated in the given order
void moments(const std::vector<const Vector*>& xs, Index n, Vector& mean, Vector& se) {
  if (xs.empty()) {
    mean = nan_vector(n);
    se = nan_vector(n);
    return;
  }
  mean = Vector::Zero(n);
  for (const Vector* x : xs) mean += *x;
  mean /= static_cast<double>(xs.size());
  se = Vector::Zero(n);
  if (xs.size() < 2) return;
  for (const Vector* x : xs) se += (*x - mean).cwiseAbs2();
  const double t = static_cast<double>(xs.size());
  se = (se / (t - 1.0) / t).cwiseSqrt();
}

}  // namespace

PowerSchedule policy_schedule(Policy policy, const ExperimentConfig& cfg, const Workload& wl,
                              const ChannelTrace& trace) {
  const PowerProblem probI = make_problem(cfg, wl, trace, GapCase::I);
  std::unique_ptr<PowerProblem> probII;
  return schedule_for(policy, cfg, probI, [&]() -> const PowerProblem& {
    if (!probII) probII = std::make_unique<PowerProblem>(make_problem(cfg, wl, trace, GapCase::II));
    return *probII;
  });
}

double PolicyStats::feasibility_rate(int trials) const {
  return trials > 0 ? 1.0 - static_cast<double>(infeasible) / trials : 0.0;
}

const PolicyStats* Comparison::find(Policy p) const {
  for (const auto& s : policies)
    if (s.policy == p) return &s;
  return nullptr;
}

Comparison monte_carlo(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.threads > 0) kernels::set_threads(cfg.threads);
  const Workload shared = prepare_workload(cfg);
  const Index K = cfg.devices, N = cfg.rounds, q = cfg.dimension;
  const std::size_t P = cfg.policies.size();
  const Index T = cfg.trials;

  std::vector<std::vector<Outcome>> results(T, std::vector<Outcome>(P));
  std::vector<std::exception_ptr> errors(T);
  kernels::parallel_for(T, [&](Index t) {
    try {
      std::unique_ptr<Workload> own;
      if (cfg.redraw_dataset)
        own = std::make_unique<Workload>(
            prepare_workload(cfg, substream_seed(cfg.dataset_seed, static_cast<std::uint64_t>(t))));
      const Workload& wl = own ? *own : shared;
      const ChannelTrace trace = draw_channels(
          substream_seed(cfg.channel_seed, static_cast<std::uint64_t>(t)), K, N, cfg.noise_std());
      const PowerProblem probI = make_problem(cfg, wl, trace, GapCase::I);
      std::unique_ptr<PowerProblem> probII;
      auto get_probII = [&]() -> const PowerProblem& {
        if (!probII) probII = std::make_unique<PowerProblem>(make_problem(cfg, wl, trace, GapCase::II));
        return *probII;
      };
      const double noise_var = std::pow(effective_noise_std(cfg.noise_std(), cfg.noise_convention), 2);
      for (std::size_t i = 0; i < P; ++i) {
        Outcome& out = results[t][i];
        const Policy policy = cfg.policies[i];
        PowerSchedule sched;
        try {
          sched = schedule_for(policy, cfg, probI, get_probII);
        } catch (const Infeasible&) {
          out.status = Status::Infeasible;
          continue;
        }
        out.nonconverged = !sched.converged;
        out.violated = sched.budget_violated;
        // every policy replays the same noise and batch streams of this trial
        Rng noise_rng = make_rng(cfg.noise_seed, static_cast<std::uint64_t>(t));
        Rng batch_rng = make_rng(cfg.batch_seed, static_cast<std::uint64_t>(t));
        out.trace = run_training(wl, trace, sched.power, noise_rng, batch_rng);
        out.status = out.trace.diverged ? Status::Diverged : Status::Ok;
        out.bound = policy == Policy::CaseII
                        ? prop2_bound(wl.initial_gap, sched.power, trace, noise_var, get_probII().coeffs).total
                        : prop1_bound(wl.initial_gap, sched.power, trace, noise_var, probI.coeffs).total;
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  Comparison cmp;
  cmp.config = cfg;
  cmp.hash = config_hash(cfg);
  cmp.initial_gap = shared.initial_gap;
  cmp.L = shared.constants.L;
  cmp.delta = shared.constants.delta;
  cmp.W = shared.constants.W;
  for (std::size_t i = 0; i < P; ++i) {
    PolicyStats st;
    st.policy = cfg.policies[i];
    std::vector<const Vector*> gaps, preds, sqs;
    std::vector<Vector> bounds;
    Matrix err_sum = Matrix::Zero(q, N);
    double energy = 0.0;
    for (Index t = 0; t < T; ++t) {
      const Outcome& o = results[t][i];
      if (o.status == Status::Infeasible) { ++st.infeasible; continue; }
      if (o.violated) st.budget_violated = true;
      if (o.status == Status::Diverged) { ++st.diverged; continue; }
      if (o.nonconverged) ++st.nonconverged;
      gaps.push_back(&o.trace.gap);
      preds.push_back(&o.trace.prediction_error);
      sqs.push_back(&o.trace.error_sq);
      err_sum += o.trace.errors;
      bounds.push_back(Vector::Constant(1, o.bound));
      double ratio = 0.0;
      for (Index k = 0; k < K; ++k)
        ratio = std::max(ratio, o.trace.energy[k] / cfg.device_average_power(k));
      energy += ratio;
    }
    st.completed = static_cast<int>(gaps.size());
    moments(gaps, N + 1, st.gap_mean, st.gap_se);
    moments(preds, N + 1, st.prediction_mean, st.prediction_se);
    Vector sq_mean, unused;
    moments(sqs, N + 1, sq_mean, unused);
    st.error_sq_mean = sq_mean.tail(N);
    std::vector<const Vector*> bptr;
    for (const auto& b : bounds) bptr.push_back(&b);
    Vector bm, bs;
    moments(bptr, 1, bm, bs);
    st.analytic_bound_mean = bm[0];
    st.analytic_bound_se = bs[0];
    if (st.completed > 0) {
      st.error_mean = err_sum / static_cast<double>(st.completed);
      st.energy_ratio = energy / st.completed;
    } else {
      st.error_mean = Matrix::Constant(q, N, kNaN);
      st.energy_ratio = kNaN;
    }
    cmp.policies.push_back(std::move(st));
  }
  return cmp;
}

Comparison compare_policies(const ExperimentConfig& cfg) {
  require(cfg.policies.size() >= 2, "compare needs at least two policies");
  return monte_carlo(cfg);
}

std::optional<Index> crossover_round(const Vector& lower, const Vector& upper) {
  require(lower.size() == upper.size(), "curves must have the same length");
  std::optional<Index> r;
  for (Index i = lower.size() - 1; i >= 0; --i) {
    if (!(lower[i] < upper[i])) break;
    r = i;
  }
  return r;
}

// ---------------------------------------------------------------------------
// bound validation

bool BoundReport::all_hold() const {
  return std::all_of(rows.begin(), rows.end(), [](const BoundRow& r) {
    return r.hypothesis.empty() && r.theorem_holds && r.analytic_holds;
  });
}

BoundReport validate_bound(const ExperimentConfig& cfg) {
  cfg.validate();
  BoundReport report;
  for (Index N : cfg.bound_rounds) {
    ExperimentConfig c = cfg;
    c.rounds = N;
    Workload wl;
    std::string hypothesis;
    try {
      wl = prepare_workload(c);
    } catch (const InvalidArgument& e) {
      hypothesis = e.what();
    }
    if (!hypothesis.empty()) {
      for (Policy p : c.policies) {
        BoundRow row;
        row.rounds = N;
        row.policy = p;
        row.empirical = row.empirical_se = row.theorem = row.analytic = kNaN;
        row.hypothesis = hypothesis;
        report.rows.push_back(row);
      }
      continue;
    }
    const Comparison cmp = monte_carlo(c);
    const BoundCoefficients coeffs =
        build_coefficients(GapCase::I, wl.rates, wl.constants, c.devices, wl.batch);
    for (const PolicyStats& st : cmp.policies) {
      BoundRow row;
      row.rounds = N;
      row.policy = st.policy;
      row.completed = st.completed;
      row.batch_assumption = wl.batch == N;
      row.empirical = st.final_gap();
      row.empirical_se = st.final_gap_se();
      row.analytic = st.analytic_bound_mean;
      if (st.completed > 0) {
        Vector biases(N);
        for (Index n = 0; n < N; ++n) biases[n] = st.error_mean.col(n).norm();
        const GapBound b = c.rate.kind == RateKind::Fixed
                               ? theorem1_bound(wl.initial_gap, biases, st.error_sq_mean, coeffs)
                               : corollary1_bound(wl.initial_gap, biases, st.error_sq_mean, coeffs);
        row.theorem = b.total;
      } else {
        row.theorem = kNaN;
      }
      const double floor = row.empirical - 3.0 * row.empirical_se;
      row.theorem_holds = row.theorem >= floor;
      row.analytic_holds = row.analytic >= floor;
      row.analytic_dominates = row.analytic >= row.theorem;
      report.rows.push_back(row);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// export

void write_config_header(std::ostream& out, const ExperimentConfig& cfg) {
  std::istringstream lines(config_text(canonical(cfg)));
  std::string line;
  while (std::getline(lines, line)) out << "# " << line << "\n";
  out << "# config_hash = " << hex(config_hash(cfg)) << "\n";
}

void export_training_trace(const TrainingTrace& tr, const ExperimentConfig& cfg,
                           const std::string& path) {
  std::ofstream out = open_output(path);
  write_config_header(out, cfg);
  out << "# policy = " << tr.policy << "\n"
      << "# normal_convention = " << tr.normal_convention << "\n"
      << "# noise_convention = " << tr.noise_convention << "\n"
      << "# diverged = " << (tr.diverged ? 1 : 0) << "\n"
      << "round,loss,gap,prediction_error,error_sq_norm\n";
  for (Index r = 0; r < tr.loss.size(); ++r)
    out << r << ',' << num(tr.loss[r]) << ',' << num(tr.gap[r]) << ','
        << num(tr.prediction_error[r]) << ',' << num(tr.error_sq[r]) << "\n";
  finish_output(out, path);
}

TrainingTrace import_training_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read trace '" + path + "'");
  TrainingTrace tr;
  std::vector<std::array<double, 4>> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = trim(line.substr(1, eq - 1)), value = trim(line.substr(eq + 1));
      if (key == "policy") tr.policy = value;
      else if (key == "normal_convention") tr.normal_convention = value;
      else if (key == "noise_convention") tr.noise_convention = value;
      else if (key == "diverged") tr.diverged = value == "1";
      else if (key == "config_hash") tr.config_hash = std::stoull(value, nullptr, 16);
      continue;
    }
    if (!header) {
      if (trim(line) != "round,loss,gap,prediction_error,error_sq_norm")
        throw IoError("unexpected trace header in '" + path + "'");
      header = true;
      continue;
    }
    std::istringstream cells(line);
    std::string cell;
    std::array<double, 4> row{};
    std::getline(cells, cell, ',');
    for (auto& x : row) {
      if (!std::getline(cells, cell, ',')) throw IoError("short row in '" + path + "'");
      x = std::strtod(cell.c_str(), nullptr);
    }
    rows.push_back(row);
  }
  const Index n = static_cast<Index>(rows.size());
  tr.loss.resize(n);
  tr.gap.resize(n);
  tr.prediction_error.resize(n);
  tr.error_sq.resize(n);
  for (Index r = 0; r < n; ++r) {
    tr.loss[r] = rows[r][0];
    tr.gap[r] = rows[r][1];
    tr.prediction_error[r] = rows[r][2];
    tr.error_sq[r] = rows[r][3];
  }
  return tr;
}

void export_comparison(const Comparison& cmp, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  const Index N = cmp.config.rounds;

  const std::string long_path = dir + "/comparison.csv";
  std::ofstream lf = open_output(long_path);
  write_config_header(lf, cmp.config);
  lf << "policy,round,gap_mean,gap_se,prediction_error_mean,prediction_error_se,trials\n";
  for (const auto& st : cmp.policies)
    for (Index r = 1; r <= N; ++r)
      lf << st.name() << ',' << r << ',' << num(st.gap_mean[r]) << ',' << num(st.gap_se[r]) << ','
         << num(st.prediction_mean[r]) << ',' << num(st.prediction_se[r]) << ',' << st.completed
         << "\n";
  finish_output(lf, long_path);

  const std::string plot_path = dir + "/gap_plot.csv";
  std::ofstream pf = open_output(plot_path);
  write_config_header(pf, cmp.config);
  pf << "round";
  for (const auto& st : cmp.policies) pf << ',' << st.name();
  pf << "\n";
  for (Index r = 0; r <= N; ++r) {
    pf << r;
    for (const auto& st : cmp.policies) pf << ',' << num(st.gap_mean[r]);
    pf << "\n";
  }
  finish_output(pf, plot_path);

  const std::string sum_path = dir + "/summary.csv";
  std::ofstream sf = open_output(sum_path);
  write_config_header(sf, cmp.config);
  sf << "policy,trials,completed,diverged,infeasible,nonconverged,feasibility_rate,"
        "final_gap_mean,final_gap_se,final_prediction_error_mean,final_prediction_error_se,"
        "analytic_bound_mean,energy_ratio,budget_violated\n";
  for (const auto& st : cmp.policies)
    sf << st.name() << ',' << cmp.config.trials << ',' << st.completed << ',' << st.diverged << ','
       << st.infeasible << ',' << st.nonconverged << ','
       << num(st.feasibility_rate(cmp.config.trials)) << ',' << num(st.final_gap()) << ','
       << num(st.final_gap_se()) << ',' << num(st.prediction_mean[N]) << ','
       << num(st.prediction_se[N]) << ',' << num(st.analytic_bound_mean) << ','
       << num(st.energy_ratio) << ',' << (st.budget_violated ? 1 : 0) << "\n";
  finish_output(sf, sum_path);
}

std::string comparison_summary(const Comparison& cmp) {
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof line, "K=%lld N=%lld trials=%d  L=%.6g delta=%.6g W=%.6g initial_gap=%.6g\n",
                static_cast<long long>(cmp.config.devices), static_cast<long long>(cmp.config.rounds),
                cmp.config.trials, cmp.L, cmp.delta, cmp.W, cmp.initial_gap);
  o << line;
  std::snprintf(line, sizeof line, "%-10s %9s %13s %11s %13s %8s %10s %6s\n", "policy", "completed",
                "final_gap", "se", "pred_error", "diverged", "infeasible", "budget");
  o << line;
  const Index N = cmp.config.rounds;
  for (const auto& st : cmp.policies) {
    std::snprintf(line, sizeof line, "%-10s %9d %13.6e %11.3e %13.6e %8d %10d %6s\n",
                  st.name().c_str(), st.completed, st.final_gap(), st.final_gap_se(),
                  st.prediction_mean[N], st.diverged, st.infeasible,
                  st.budget_violated ? "over" : "ok");
    o << line;
  }
  return o.str();
}

void export_bound_report(const BoundReport& report, const ExperimentConfig& cfg,
                         const std::string& path) {
  std::ofstream out = open_output(path);
  write_config_header(out, cfg);
  out << "rounds,policy,empirical,empirical_se,theorem,analytic,theorem_holds,analytic_holds,"
         "analytic_dominates,batch_assumption,hypothesis,trials\n";
  for (const auto& r : report.rows)
    out << r.rounds << ',' << to_string(r.policy) << ',' << num(r.empirical) << ','
        << num(r.empirical_se) << ',' << num(r.theorem) << ',' << num(r.analytic) << ','
        << r.theorem_holds << ',' << r.analytic_holds << ',' << r.analytic_dominates << ','
        << r.batch_assumption << ",\"" << r.hypothesis << "\"," << r.completed << "\n";
  finish_output(out, path);
}

std::string bound_summary(const BoundReport& report) {
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof line, "%6s %-9s %12s %10s %12s %12s %s\n", "N", "policy", "empirical",
                "se", "theorem", "analytic", "status");
  o << line;
  for (const auto& r : report.rows) {
    std::string status = r.hypothesis.empty()
                             ? std::string(r.theorem_holds && r.analytic_holds ? "holds" : "VIOLATED")
                             : "hypothesis: " + r.hypothesis;
    if (r.hypothesis.empty() && !r.batch_assumption) status += " (m_b != N)";
    std::snprintf(line, sizeof line, "%6lld %-9s %12.5e %10.3e %12.5e %12.5e %s\n",
                  static_cast<long long>(r.rounds), to_string(r.policy).c_str(), r.empirical,
                  r.empirical_se, r.theorem, r.analytic, status.c_str());
    o << line;
  }
  return o.str();
}

}  // namespace airfeel
