// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "expx/kernels.hpp"

namespace k = expx::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Args: spatial size, in channels, out channels.
struct ConvCase {
  k::ConvGeom g;
  std::vector<float> in, w, b, out, grad_out, grad_in, grad_w, grad_b;

  explicit ConvCase(const benchmark::State& st) {
    const auto s = st.range(0), ci = st.range(1), co = st.range(2);
    g = k::make_conv_geom(4, ci, s, s, co, 3, 1, 1);
    in = noise(static_cast<std::size_t>(4 * ci * s * s), 1);
    w = noise(static_cast<std::size_t>(co * ci * 9), 2);
    b = noise(static_cast<std::size_t>(co), 3);
    out.resize(static_cast<std::size_t>(4 * co * g.out_h * g.out_w));
    grad_out = noise(out.size(), 4);
    grad_in.assign(in.size(), 0.0f);
    grad_w.assign(w.size(), 0.0f);
    grad_b.assign(b.size(), 0.0f);
  }
};

template <void (*Fwd)(const k::ConvGeom&, const float*, const float*, const float*, float*)>
void conv_forward(benchmark::State& st) {
  ConvCase c(st);
  for (auto _ : st) {
    Fwd(c.g, c.in.data(), c.w.data(), c.b.data(), c.out.data());
    benchmark::DoNotOptimize(c.out.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(c.out.size()));
}

template <void (*BwdIn)(const k::ConvGeom&, const float*, const float*, float*),
          void (*BwdW)(const k::ConvGeom&, const float*, const float*, float*, float*)>
void conv_backward(benchmark::State& st) {
  ConvCase c(st);
  for (auto _ : st) {
    BwdIn(c.g, c.grad_out.data(), c.w.data(), c.grad_in.data());
    BwdW(c.g, c.grad_out.data(), c.in.data(), c.grad_w.data(), c.grad_b.data());
    benchmark::DoNotOptimize(c.grad_w.data());
  }
}

template <void (*Min)(const k::MinFilterGeom&, const float*, float*, std::int32_t*)>
void min_filter(benchmark::State& st) {
  const auto s = st.range(0);
  const k::MinFilterGeom g{s, s, 7, 8};
  const auto src = noise(static_cast<std::size_t>(s * s), 5);
  std::vector<float> dst(src.size());
  std::vector<std::int32_t> arg(src.size());
  for (auto _ : st) {
    Min(g, src.data(), dst.data(), arg.data());
    benchmark::DoNotOptimize(dst.data());
  }
  st.SetItemsProcessed(st.iterations() * s * s);
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({64, 32, 32})->Args({128, 32, 64})->Args({64, 64, 64})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<k::serial::conv2d_forward>)->Name("conv2d_forward/serial")->Apply(conv_args);
BENCHMARK(conv_forward<k::parallel::conv2d_forward>)->Name("conv2d_forward/parallel")->Apply(conv_args);
BENCHMARK(conv_backward<k::serial::conv2d_backward_input, k::serial::conv2d_backward_weight>)
    ->Name("conv2d_backward/serial")
    ->Apply(conv_args);
BENCHMARK(conv_backward<k::parallel::conv2d_backward_input, k::parallel::conv2d_backward_weight>)
    ->Name("conv2d_backward/parallel")
    ->Apply(conv_args);
BENCHMARK(min_filter<k::serial::min_filter>)->Name("min_filter/serial")->Arg(128)->Arg(512);
BENCHMARK(min_filter<k::parallel::min_filter>)->Name("min_filter/parallel")->Arg(128)->Arg(512);

BENCHMARK_MAIN();
