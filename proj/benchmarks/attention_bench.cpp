// Divided (intra+inter) vs joint attention forward cost across view and
// patch counts. The CSV-oriented counterpart lives in `g3dk bench`.

#include <benchmark/benchmark.h>

#include "g3dk/attention.hpp"
#include "g3dk/rng.hpp"

namespace {

using namespace g3dk;

struct BenchInputs {
  Tensor f;
  std::vector<std::uint8_t> valid;
  AttentionParams attn;
};

BenchInputs make_inputs(std::int64_t views, std::int64_t patches, std::int64_t dim) {
  Rng rng(1234);
  BenchInputs in;
  in.f = randn(rng, {1, views, patches, dim});
  in.valid.assign(static_cast<std::size_t>(views * patches), 1);
  in.attn = init_attention(rng, dim, 4);
  return in;
}

void BM_DividedAttention(benchmark::State& state) {
  const auto in = make_inputs(state.range(0), state.range(1), 64);
  Tape tape(false);
  for (auto _ : state) {
    benchmark::DoNotOptimize(intra_view_attention(tape, in.f, in.valid, in.attn));
    benchmark::DoNotOptimize(inter_view_attention(tape, in.f, in.valid, in.attn));
  }
  state.SetLabel("macs=" + std::to_string(static_cast<long long>(
                     flops_estimate(state.range(0), state.range(1), 64, AttentionMode::divided))));
}

void BM_JointAttention(benchmark::State& state) {
  const auto in = make_inputs(state.range(0), state.range(1), 64);
  Tape tape(false);
  for (auto _ : state) {
    benchmark::DoNotOptimize(joint_attention(tape, in.f, in.valid, in.attn));
  }
  state.SetLabel("macs=" + std::to_string(static_cast<long long>(
                     flops_estimate(state.range(0), state.range(1), 64, AttentionMode::joint))));
}

}  // namespace

BENCHMARK(BM_DividedAttention)->Args({4, 64})->Args({8, 64})->Args({8, 256})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_JointAttention)->Args({4, 64})->Args({8, 64})->Args({8, 256})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
