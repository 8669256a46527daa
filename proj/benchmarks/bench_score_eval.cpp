#include "ibdd/score_eval.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

ibdd::Matrix gaussian(int rows, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    ibdd::Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = g(rng);
    return m;
}

// 90 support points against the 1000-image test split.
void BM_KdeAnomalyScore(benchmark::State& state) {
    const int d = static_cast<int>(state.range(0));
    const auto model = ibdd::fit_kde(gaussian(90, d, 1), ibdd::BandwidthPolicy::scott());
    const auto queries = gaussian(1000, d, 2);
    for (auto _ : state) benchmark::DoNotOptimize(ibdd::anomaly_score(model, queries));
    state.SetItemsProcessed(state.iterations() * queries.rows());
}
BENCHMARK(BM_KdeAnomalyScore)->Arg(128)->Arg(3136);

void BM_Auprc(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        pos[i] = i % 10 == 0;
        scores[i] = g(rng) + pos[i];
    }
    for (auto _ : state) benchmark::DoNotOptimize(ibdd::auprc(scores, pos).area);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Auprc)->RangeMultiplier(10)->Range(1000, 100000);

}  // namespace
