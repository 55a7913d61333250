// Serial reference kernels against their OpenMP versions.

#include <benchmark/benchmark.h>

#include <memory>
#include <numeric>
#include <vector>

#include "airfeel/harness.hpp"
#include "airfeel/kernels.hpp"

using namespace airfeel;

namespace {

struct Fixture {
  RowMatrix x;
  Vector labels;
  Vector w;
  std::vector<Index> rows;

  explicit Fixture(Index n) {
    const Dataset ds = generate_dataset(3, 1, n, 10, 0.2, 5e-5);
    x = ds.features;
    labels = ds.labels;
    w = Vector::LinSpaced(10, -1.0, 1.0);
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), Index{0});
  }
};

const Fixture& fixture(Index n) {
  static std::vector<std::unique_ptr<Fixture>> cache;
  for (const auto& f : cache)
    if (f->x.rows() == n) return *f;
  cache.push_back(std::make_unique<Fixture>(n));
  return *cache.back();
}

template <auto Fn>
void moments(benchmark::State& st) {
  const Fixture& f = fixture(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(Fn(f.x, f.labels, f.w, 5e-5));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <auto Fn>
void batch_sum(benchmark::State& st) {
  const Fixture& f = fixture(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(Fn(f.x, f.labels, f.rows, f.w));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <auto Fn>
void residuals(benchmark::State& st) {
  const Fixture& f = fixture(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(Fn(f.x, f.labels, f.w));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <auto Fn>
void gram(benchmark::State& st) {
  const Fixture& f = fixture(st.range(0));
  Matrix xtx;
  Vector xty;
  for (auto _ : st) {
    Fn(f.x, f.labels, xtx, xty);
    benchmark::DoNotOptimize(xtx.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

// Monte-Carlo trials: serial loop against the parallel trial loop.
void trials(benchmark::State& st, bool parallel) {
  ExperimentConfig c;
  c.devices = 5;
  c.rounds = 100;
  c.samples_per_device = 200;
  c.trials = 8;
  c.policies = {Policy::MseMin, Policy::CaseI};
  const Workload wl = prepare_workload(c);
  for (auto _ : st) {
    std::vector<double> out(c.trials);
    auto body = [&](Index t) {
      const ChannelTrace tr = draw_channels(substream_seed(c.channel_seed, t), c.devices,
                                            c.rounds, c.noise_std());
      const PowerSchedule s = policy_schedule(Policy::CaseI, c, wl, tr);
      Rng a = make_rng(c.noise_seed, t), b = make_rng(c.batch_seed, t);
      out[t] = run_training(wl, tr, s.power, a, b).gap.tail(1)[0];
    };
    if (parallel) kernels::parallel_for(c.trials, body);
    else kernels::serial_for(c.trials, body);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(moments<kernels::serial::sample_gradient_moments>)->Name("moments/serial")->Arg(10000)->Arg(100000);
BENCHMARK(moments<kernels::omp::sample_gradient_moments>)->Name("moments/omp")->Arg(10000)->Arg(100000);
BENCHMARK(batch_sum<kernels::serial::batch_gradient_sum>)->Name("batch_sum/serial")->Arg(10000)->Arg(100000);
BENCHMARK(batch_sum<kernels::omp::batch_gradient_sum>)->Name("batch_sum/omp")->Arg(10000)->Arg(100000);
BENCHMARK(residuals<kernels::serial::squared_residual_sum>)->Name("residuals/serial")->Arg(10000)->Arg(100000);
BENCHMARK(residuals<kernels::omp::squared_residual_sum>)->Name("residuals/omp")->Arg(10000)->Arg(100000);
BENCHMARK(gram<kernels::serial::gram>)->Name("gram/serial")->Arg(10000)->Arg(100000);
BENCHMARK(gram<kernels::omp::gram>)->Name("gram/omp")->Arg(10000)->Arg(100000);
BENCHMARK_CAPTURE(trials, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(trials, omp, true)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
