// Serial reference kernels vs the blocked/OpenMP ones, on the shapes the
// decoder and denoiser actually hit (64×64 patches, widths 16–96).

#include <benchmark/benchmark.h>

#include <vector>

#include "dtseg/kernels.hpp"
#include "dtseg/nn.hpp"

namespace k = dtseg::kernels;

namespace {

std::vector<double> filled(size_t n, uint64_t seed) {
    dtseg::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
}

template <bool Reference>
void BM_gemm(benchmark::State& state) {
    const int M = int(state.range(0)), N = int(state.range(1)), K = int(state.range(2));
    auto A = filled(size_t(M) * K, 1), B = filled(size_t(K) * N, 2);
    std::vector<double> C(size_t(M) * N);
    for (auto _ : state) {
        if constexpr (Reference)
            k::reference::gemm(M, N, K, A, B, C, false);
        else
            k::gemm(M, N, K, A, B, C, false);
        benchmark::DoNotOptimize(C.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_conv3x3(benchmark::State& state) {
    const int c = int(state.range(0)), hw = int(state.range(1));
    const k::ConvGeometry g{c, hw, hw, 3, 1, 1};
    auto img = filled(size_t(c) * hw * hw, 3), w = filled(size_t(c) * g.patch(), 4), b = filled(size_t(c), 5);
    std::vector<double> out(size_t(c) * hw * hw);
    for (auto _ : state) {
        if constexpr (Reference)
            k::reference::conv2d(g, c, img, w, b, out);
        else
            k::conv2d(g, c, img, w, b, out);
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Reference>
void BM_upsample(benchmark::State& state) {
    const int c = int(state.range(0)), in = int(state.range(1)), out = 64;
    auto src = filled(size_t(c) * in * in, 6);
    std::vector<double> dst(size_t(c) * out * out);
    for (auto _ : state) {
        if constexpr (Reference)
            k::reference::upsample_bilinear(c, in, in, out, out, src, dst);
        else
            k::upsample_bilinear(c, in, in, out, out, src, dst);
        benchmark::DoNotOptimize(dst.data());
    }
}

template <bool Reference>
void BM_softmax(benchmark::State& state) {
    const int rows = int(state.range(0)), cols = int(state.range(1));
    const auto base = filled(size_t(rows) * cols, 7);
    std::vector<double> data;
    for (auto _ : state) {
        data = base;
        if constexpr (Reference)
            k::reference::softmax_rows(rows, cols, data);
        else
            k::softmax_rows(rows, cols, data);
        benchmark::DoNotOptimize(data.data());
    }
}

}  // namespace

BENCHMARK(BM_gemm<true>)->Name("gemm/reference")->Args({16, 4096, 144})->Args({96, 1024, 96})->Args({256, 256, 256});
BENCHMARK(BM_gemm<false>)->Name("gemm/parallel")->Args({16, 4096, 144})->Args({96, 1024, 96})->Args({256, 256, 256});
BENCHMARK(BM_conv3x3<true>)->Name("conv3x3/reference")->Args({16, 64})->Args({32, 32});
BENCHMARK(BM_conv3x3<false>)->Name("conv3x3/parallel")->Args({16, 64})->Args({32, 32});
BENCHMARK(BM_upsample<true>)->Name("upsample/reference")->Args({96, 16})->Args({48, 32});
BENCHMARK(BM_upsample<false>)->Name("upsample/parallel")->Args({96, 16})->Args({48, 32});
BENCHMARK(BM_softmax<true>)->Name("softmax/reference")->Args({256, 256})->Args({4096, 3});
BENCHMARK(BM_softmax<false>)->Name("softmax/parallel")->Args({256, 256})->Args({4096, 3});

BENCHMARK_MAIN();
