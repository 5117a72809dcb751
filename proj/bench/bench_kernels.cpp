// Serial vs OpenMP timings for the parallel kernels. Arg 0 = serial, 1 = parallel.

#include "gidd/denoiser.hpp"
#include "gidd/elbo.hpp"
#include "gidd/sampler.hpp"
#include "gidd/scaling_fit.hpp"
#include "gidd/tabular.hpp"

#include <benchmark/benchmark.h>

#include <cmath>

using namespace gidd;

namespace {

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::serial : Exec::parallel; }

struct Instance {
    Vocab vocab = Vocab::with_mask_last(6);
    MixingSchedule sched = schedule_for(NoiseType::balanced);
    EnumerableDataset data = EnumerableDataset::uniform_over(
        {{0, 1, 2}, {1, 1, 0}, {2, 3, 4}, {4, 0, 1}, {3, 3, 3}, {0, 2, 4}, {1, 4, 2}, {2, 2, 0}});
};

void BM_DatasetQuadrature(benchmark::State& state) {
    const Instance in;
    const BayesOracle oracle(in.data, in.sched, in.vocab);
    QuadratureOptions q;
    q.exec = exec_of(state);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dataset_nelbo_quadrature(in.data, oracle, in.sched, in.vocab, q).mean);
    }
}

void BM_MonteCarlo(benchmark::State& state) {
    const Instance in;
    const BayesOracle oracle(in.data, in.sched, in.vocab);
    const auto p = LambdaDistribution::for_schedule(in.sched, LambdaDistribution::Kind::linear_schedule);
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            nelbo_monte_carlo(in.data.sequences[0], oracle, in.sched, in.vocab, p, 20000, 1, exec_of(state)).value);
    }
}

void BM_AncestralSampling(benchmark::State& state) {
    const Instance in;
    BayesOracle oracle(in.data, in.sched, in.vocab);
    oracle.set_strict(false);
    const DenoiseSchedule schedule = DenoiseSchedule::uniform_time(in.sched, 64);
    SamplerOptions opts;
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            ancestral_sample_many(oracle, in.sched, in.vocab, schedule, 3, 2000, opts, exec_of(state)).size());
    }
}

void BM_Bootstrap(benchmark::State& state) {
    std::vector<double> xs;
    std::vector<double> ys;
    for (int i = 0; i < 12; ++i) {
        const double x = std::pow(10.0, 18.0 + 0.3 * i);
        xs.push_back(x);
        ys.push_back(2.0 * std::pow(x, 0.5) * (1.0 + 0.01 * std::sin(i)));
    }
    const FitProcedure fit = [](std::span<const double> x, std::span<const double> y) {
        const PowerLawFit f = fit_power_law(x, y);
        return std::vector<double>{f.A, f.alpha};
    };
    BootstrapOptions opts;
    opts.n_resamples = 2000;
    opts.exec = exec_of(state);
    for (auto _ : state) {
        benchmark::DoNotOptimize(bootstrap_ci(fit, xs, ys, opts).size());
    }
}

void BM_TrainTabular(benchmark::State& state) {
    const Instance in;
    TrainConfig cfg;
    cfg.n_steps = 50;
    cfg.eval_every = 50;
    cfg.optimizer.batch_size = 64;
    cfg.empty_fraction_max = 0.0;
    cfg.exec = exec_of(state);
    for (auto _ : state) {
        TabularDenoiser model(in.sched, in.vocab, 8);
        benchmark::DoNotOptimize(train_tabular(model, in.data, cfg).final_nelbo);
    }
}

} // namespace

BENCHMARK(BM_DatasetQuadrature)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MonteCarlo)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AncestralSampling)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Bootstrap)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainTabular)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
