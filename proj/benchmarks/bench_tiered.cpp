#include <benchmark/benchmark.h>

#include "tiered/oracle.hpp"
#include "tiered/specio.hpp"

#include <random>
#include <string>

using namespace tiered;

namespace {

const char* const kSpecs[] = {"meatloaves", "cotton", "sensory", "wheat", "small"};

std::string spec(int i) { return std::string(TIERED_SPEC_DIR) + "/" + kSpecs[i] + ".spec"; }

struct Loaded {
  ExperimentChain chain;
  Decomposition d;
  AnovaTable table;
};

Loaded load(int i) {
  Loaded x{parse_design_spec(spec(i)), {}, {}};
  x.d = chain_decompose(x.chain);
  x.table = canonical_ems(skeleton_table(x.d, x.chain), x.chain);
  return x;
}

Vec sample(const Loaded& x, std::uint64_t seed) {
  const Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  const int nt = x.chain.tier(x.chain.levels() - 1).units();
  std::mt19937_64 rng(seed);
  return ResponseModel(x.chain, x.table, c, Vec::LinSpaced(nt, 0.0, 1.0)).draw(rng);
}

}  // namespace

// Spec parsing, strata and push-forward of every tier.
static void BM_ParseChain(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(parse_design_spec(spec(static_cast<int>(state.range(0)))));
  state.SetLabel(kSpecs[state.range(0)]);
}
BENCHMARK(BM_ParseChain)->DenseRange(0, 4)->Unit(benchmark::kMillisecond);

static void BM_Decompose(benchmark::State& state) {
  const auto chain = parse_design_spec(spec(static_cast<int>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(chain_decompose(chain));
  state.SetLabel(kSpecs[state.range(0)]);
}
BENCHMARK(BM_Decompose)->DenseRange(0, 4)->Unit(benchmark::kMillisecond);

static void BM_SkeletonTable(benchmark::State& state) {
  const auto x = load(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(canonical_ems(skeleton_table(x.d, x.chain), x.chain));
  state.SetLabel(kSpecs[state.range(0)]);
}
BENCHMARK(BM_SkeletonTable)->DenseRange(0, 4)->Unit(benchmark::kMicrosecond);

static void BM_AnovaFit(benchmark::State& state) {
  const auto x = load(0);
  const Vec y = sample(x, 1);
  for (auto _ : state) benchmark::DoNotOptimize(anova_fit(y, x.chain, x.d, x.table));
}
BENCHMARK(BM_AnovaFit)->Unit(benchmark::kMillisecond);

static void BM_CombineInformation(benchmark::State& state) {
  const auto x = load(static_cast<int>(state.range(0)));
  const Vec y = sample(x, 2);
  for (auto _ : state) benchmark::DoNotOptimize(combine_information(y, x.chain, x.d, x.table));
  state.SetLabel(kSpecs[state.range(0)]);
}
BENCHMARK(BM_CombineInformation)->Arg(0)->Arg(3)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_GlsKnownComponents(benchmark::State& state) {
  const auto x = load(static_cast<int>(state.range(0)));
  const Vec y = sample(x, 3);
  const Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(gls_fit(y, x.chain, x.d, x.table, c));
  state.SetLabel(kSpecs[state.range(0)]);
}
BENCHMARK(BM_GlsKnownComponents)->Arg(0)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_RandomPermutation(benchmark::State& state) {
  const auto x = load(0);
  const RandomizationScheme scheme(x.chain.tier(0).structure);
  std::mt19937_64 rng(4);
  for (auto _ : state) benchmark::DoNotOptimize(scheme.draw(rng));
}
BENCHMARK(BM_RandomPermutation);

// Oracle throughput on the small pseudofactor example.
static void BM_Simulate(benchmark::State& state) {
  const auto x = load(4);
  const Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  SimulationOptions opt;
  opt.draws = state.range(0);
  opt.threads = 1;
  for (auto _ : state) benchmark::DoNotOptimize(simulate(x.chain, x.d, x.table, c, Vec::Zero(2), opt));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Simulate)->Arg(10000)->Arg(100000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
