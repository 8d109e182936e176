// Serial vs OpenMP timings of the parallel kernels. The benchmark argument
// selects the mode: 0 = Serial, 1 = Parallel.

#include <benchmark/benchmark.h>

#include <random>

#include "prunability/geometry.hpp"
#include "prunability/nets.hpp"
#include "prunability/pruning.hpp"
#include "prunability/spectral.hpp"

using namespace prunability;

namespace {

Exec mode(const benchmark::State& state) { return state.range(0) ? Exec::Parallel : Exec::Serial; }

DenseSymmetric random_spd(Eigen::Index n, std::uint64_t seed) {
  auto rng = make_rng(seed, 0);
  std::normal_distribution<double> g;
  Matrix a(n, n);
  for (auto& x : a.reshaped()) x = g(rng);
  return DenseSymmetric(a * a.transpose() / static_cast<double>(n) + Matrix::Identity(n, n));
}

struct Trained {
  FeedforwardNet net;
  Dataset train, test;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.train = make_blobs(500, 2, 4.0, 1);
    r.test = make_blobs(2000, 2, 4.0, 2, Split::Test);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.lambda_l1 = 1e-3;
    r.net = train_l1(init_kaiming({2, 32, 32, 2}, 1), r.train, cfg).net;
    return r;
  }();
  return t;
}

void BM_DenseApply(benchmark::State& state) {
  auto op = make_dense_operator(random_spd(1500, 1), mode(state));
  Vector v = Vector::Ones(1500);
  for (auto _ : state) benchmark::DoNotOptimize(op.apply(v));
}

void BM_McWidth(benchmark::State& state) {
  const DenseSymmetric h = random_spd(200, 2);
  for (auto _ : state) benchmark::DoNotOptimize(mc_width_oracle(h, 1.0, 20000, 3, mode(state)));
}

void BM_Escape(benchmark::State& state) {
  const DenseSymmetric h = random_spd(100, 4);
  const Vector w0 = Vector::Zero(100), wp = Vector::Constant(100, 0.2);
  for (auto _ : state) benchmark::DoNotOptimize(escape_mc(h, 0.5, w0, wp, 40, 200, 5, mode(state)));
}

void BM_Grad(benchmark::State& state) {
  const auto& t = trained();
  for (auto _ : state) benchmark::DoNotOptimize(grad(t.net, t.test, mode(state)));
}

void BM_Sweep(benchmark::State& state) {
  const auto& t = trained();
  std::vector<double> grid;
  for (int i = 1; i <= 50; ++i) grid.push_back(i / 50.0);
  for (auto _ : state) benchmark::DoNotOptimize(sweep(t.net, t.train, t.test, grid, 1.0, mode(state)));
}

void BM_Slq(benchmark::State& state) {
  auto op = make_dense_operator(random_spd(1000, 6), mode(state));
  SlqParams p;
  p.iters = 64;
  p.runs = 4;
  for (auto _ : state) benchmark::DoNotOptimize(slq_density(op, p, 7, mode(state)));
}

void BM_ExactHessian(benchmark::State& state) {
  const auto& t = trained();
  for (auto _ : state) benchmark::DoNotOptimize(exact_hessian(t.net, t.train, mode(state)));
}

}  // namespace

BENCHMARK(BM_DenseApply)->Arg(0)->Arg(1);
BENCHMARK(BM_McWidth)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Escape)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Grad)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Sweep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Slq)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ExactHessian)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(2);

BENCHMARK_MAIN();
