#include "ibdd/ib_loss.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

// N = 9 classes x n_support rows, d columns; prototypes at the class means.
ibdd::EmbeddingBatch make_batch(int n_per_class, int d) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g;
    ibdd::EmbeddingBatch b;
    b.num_classes = 9;
    b.z.resize(9 * n_per_class, d);
    for (int i = 0; i < b.z.rows(); ++i) {
        b.y.push_back(i % 9);
        for (int j = 0; j < d; ++j) b.z(i, j) = g(rng) + (i % 9);
    }
    return b;
}

void BM_IbLossWithGrad(benchmark::State& state) {
    const auto batch = make_batch(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    const auto protos = ibdd::ClassPrototypes::from_class_means(batch);
    const ibdd::IBLossConfig cfg;
    for (auto _ : state) {
        auto r = ibdd::ib_loss_with_grad(batch, protos, cfg);
        benchmark::DoNotOptimize(r.value.total);
        benchmark::DoNotOptimize(r.grad.z.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_IbLossWithGrad)->ArgsProduct({{10, 50}, {128, 3136}});

void BM_CompressionOnly(benchmark::State& state) {
    const auto batch = make_batch(static_cast<int>(state.range(0)), 128);
    const ibdd::IBLossConfig cfg;
    for (auto _ : state) benchmark::DoNotOptimize(ibdd::compression_term(batch, cfg));
}
BENCHMARK(BM_CompressionOnly)->RangeMultiplier(4)->Range(10, 640);

}  // namespace
