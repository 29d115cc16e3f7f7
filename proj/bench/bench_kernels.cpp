#include "sdsae/kernels.hpp"
#include "sdsae/train.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

using namespace sdsae;

namespace {

struct Setup {
    SaeParams params;
    std::vector<float> batch;
    DeadTracker tracker;
};

Setup make_setup(uint32_t d, uint32_t n_f, uint32_t k, uint32_t n) {
    Setup s;
    s.params = init_tied(SaeConfig{d, n_f, k, std::min<uint32_t>(256, n_f), 1.0f / 32.0f}, 1);
    std::mt19937_64 rng(2);
    std::normal_distribution<float> g(0.0f, 1.0f);
    s.batch.resize(size_t(n) * d);
    for (auto& x : s.batch) x = g(rng);
    // A quarter of the features are dead so the auxiliary path is exercised.
    s.tracker = DeadTracker(n_f, 1);
    std::vector<uint32_t> alive;
    for (uint32_t r = 0; r < n_f; ++r)
        if (r % 4) alive.push_back(r);
    SparseCoeffs fire{alive, std::vector<float>(alive.size(), 1.0f), n_f};
    s.tracker.update(std::vector<SparseCoeffs>{fire}, 1);
    return s;
}

void bm_encode(benchmark::State& state) {
    const auto s = make_setup(uint32_t(state.range(0)), uint32_t(state.range(1)), 32, 1024);
    for (auto _ : state) benchmark::DoNotOptimize(encode_batch(s.params, s.batch, 32));
    state.SetItemsProcessed(state.iterations() * 1024);
}

void bm_encode_reference(benchmark::State& state) {
    const auto s = make_setup(uint32_t(state.range(0)), uint32_t(state.range(1)), 32, 1024);
    for (auto _ : state) benchmark::DoNotOptimize(reference::encode_batch(s.params, s.batch, 32));
    state.SetItemsProcessed(state.iterations() * 1024);
}

void bm_loss(benchmark::State& state) {
    const auto s = make_setup(uint32_t(state.range(0)), uint32_t(state.range(1)), 32, 512);
    for (auto _ : state) benchmark::DoNotOptimize(compute_loss(s.params, s.batch, s.tracker));
    state.SetItemsProcessed(state.iterations() * 512);
}

void bm_loss_reference(benchmark::State& state) {
    const auto s = make_setup(uint32_t(state.range(0)), uint32_t(state.range(1)), 32, 512);
    for (auto _ : state) benchmark::DoNotOptimize(reference::compute_loss(s.params, s.batch, s.tracker));
    state.SetItemsProcessed(state.iterations() * 512);
}

}  // namespace

BENCHMARK(bm_encode)->Args({128, 1024})->Args({320, 4096})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_encode_reference)->Args({128, 1024})->Args({320, 4096})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_loss)->Args({128, 1024})->Args({320, 4096})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_loss_reference)->Args({128, 1024})->Args({320, 4096})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
