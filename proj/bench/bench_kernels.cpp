// Serial reference vs OpenMP kernels, plus one full attention pass.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "maxsr/attention.hpp"
#include "maxsr/blocks.hpp"
#include "maxsr/kernels.hpp"

using namespace maxsr;

namespace {

std::vector<float> noise(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-1, 1);
  std::vector<float> v(n);
  for (auto& e : v) e = d(rng);
  return v;
}

kernels::ConvGeometry conv_geometry(benchmark::State& st) {
  kernels::ConvGeometry g;
  g.in_channels = g.out_channels = st.range(0);
  g.in_h = g.in_w = 48;
  g.kernel_h = g.kernel_w = 3;
  g.pad = 1;
  return g;
}

template <bool Parallel>
void BM_Conv3x3(benchmark::State& st) {
  const auto g = conv_geometry(st);
  const auto x = noise(static_cast<size_t>(g.in_channels * g.in_h * g.in_w), 1);
  const auto w = noise(static_cast<size_t>(g.out_channels * g.in_channels * 9), 2);
  const auto b = noise(static_cast<size_t>(g.out_channels), 3);
  std::vector<float> y(static_cast<size_t>(g.out_channels * g.out_h() * g.out_w()));
  for (auto _ : st) {
    if constexpr (Parallel) kernels::parallel::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
    else kernels::serial::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * g.out_channels * g.out_h() * g.out_w() * g.in_channels * 9);
}

template <bool Parallel>
void BM_BatchedGemm(benchmark::State& st) {
  kernels::GemmShape s;
  s.batch = 64;
  s.m = s.n = st.range(0);
  s.k = 32;
  s.trans_b = true;
  const auto a = noise(static_cast<size_t>(s.batch * s.m * s.k), 4);
  const auto b = noise(static_cast<size_t>(s.batch * s.n * s.k), 5);
  std::vector<float> c(static_cast<size_t>(s.batch * s.m * s.n));
  for (auto _ : st) {
    if constexpr (Parallel) kernels::parallel::gemm(s, a.data(), b.data(), c.data());
    else kernels::serial::gemm(s, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * s.batch * s.m * s.n * s.k);
}

template <bool Parallel>
void BM_Softmax(benchmark::State& st) {
  const int64_t rows = 4096, cols = st.range(0);
  const auto x = noise(static_cast<size_t>(rows * cols), 6);
  std::vector<float> y(x.size());
  for (auto _ : st) {
    if constexpr (Parallel) kernels::parallel::softmax_rows(rows, cols, x.data(), y.data());
    else kernels::serial::softmax_rows(rows, cols, x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_MaxAttention(benchmark::State& st) {
  const int64_t s = st.range(0), width = 32;
  ParamInit init(0);
  const auto params = init.attention<float>(width, 4, false, 0, 0);
  const Tensor x(Shape{1, width, s, s}, noise(static_cast<size_t>(width * s * s), 7));
  const auto mode = AttentionMode::exact();
  NoGradGuard ng;
  for (auto _ : st) {
    auto y = adaptive_grid_attention(adaptive_block_attention(x, params, mode), params, mode);
    benchmark::DoNotOptimize(y.data().data());
  }
}

}  // namespace

BENCHMARK_TEMPLATE(BM_Conv3x3, false)->Arg(32)->Arg(64);
BENCHMARK_TEMPLATE(BM_Conv3x3, true)->Arg(32)->Arg(64);
BENCHMARK_TEMPLATE(BM_BatchedGemm, false)->Arg(64)->Arg(256);
BENCHMARK_TEMPLATE(BM_BatchedGemm, true)->Arg(64)->Arg(256);
BENCHMARK_TEMPLATE(BM_Softmax, false)->Arg(64)->Arg(1024);
BENCHMARK_TEMPLATE(BM_Softmax, true)->Arg(64)->Arg(1024);
BENCHMARK(BM_MaxAttention)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
