// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rammerge/dtype.hpp"
#include "rammerge/merge_kernels.hpp"
#include "rammerge/overlap.hpp"
#include "rammerge/rescale.hpp"
#include "rammerge/task_vector.hpp"
#include "rammerge/trim_plan.hpp"

using namespace rammerge;

namespace {

std::vector<float> sparse_delta(std::size_t n, double density, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 0.01f);
    std::bernoulli_distribution on(density);
    std::vector<float> v(n, 0.0f);
    for (auto& x : v) {
        if (on(rng)) x = g(rng);
    }
    return v;
}

void BM_EncodeBF16(benchmark::State& state) {
    const auto values = sparse_delta(static_cast<std::size_t>(state.range(0)), 1.0, 1);
    std::vector<std::byte> raw(values.size() * 2);
    for (auto _ : state) {
        encode_from_f32(DType::BF16, values, raw);
        benchmark::DoNotOptimize(raw.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeBF16)->Arg(1 << 20);

void BM_DecodeF16(benchmark::State& state) {
    const auto values = sparse_delta(static_cast<std::size_t>(state.range(0)), 1.0, 2);
    std::vector<std::byte> raw(values.size() * 2);
    encode_from_f32(DType::F16, values, raw);
    std::vector<float> out(values.size());
    for (auto _ : state) {
        decode_to_f32(DType::F16, raw, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeF16)->Arg(1 << 20);

void BM_MaskAndOverlap(benchmark::State& state) {
    const std::size_t n = 1 << 20;
    const auto models = static_cast<std::size_t>(state.range(0));
    std::vector<std::vector<float>> taus;
    for (std::size_t t = 0; t < models; ++t) taus.push_back(sparse_delta(n, 0.3, 10 + t));
    std::vector<Mask> masks(models, Mask(n));
    std::vector<MaskView> views(masks.begin(), masks.end());
    std::vector<std::uint8_t> counts(n);
    for (auto _ : state) {
        for (std::size_t t = 0; t < models; ++t) mask_into(taus[t], kDefaultEpsilon, masks[t]);
        overlap_counts_into(views, counts);
        benchmark::DoNotOptimize(counts.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * models));
}
BENCHMARK(BM_MaskAndOverlap)->Arg(3)->Arg(8);

void BM_RamMergedDelta(benchmark::State& state) {
    const std::size_t n = 1 << 20;
    const auto models = static_cast<std::size_t>(state.range(0));
    std::vector<std::vector<float>> taus;
    std::vector<Mask> masks;
    for (std::size_t t = 0; t < models; ++t) {
        taus.push_back(sparse_delta(n, 0.3, 20 + t));
        masks.push_back(mask(taus.back(), kDefaultEpsilon));
    }
    std::vector<FloatView> tv(taus.begin(), taus.end());
    std::vector<MaskView> mv(masks.begin(), masks.end());
    const auto counts = overlap_counts(mv);
    const std::vector<double> lambdas(models, 1.1);
    std::vector<float> out(n);
    for (auto _ : state) {
        ram_merged_delta(tv, mv, counts, lambdas, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_RamMergedDelta)->Arg(3)->Arg(8);

void BM_TiesTrim(benchmark::State& state) {
    const auto tau = sparse_delta(static_cast<std::size_t>(state.range(0)), 0.9, 30);
    for (auto _ : state) {
        auto t = ties_trim(tau, 0.2);
        benchmark::DoNotOptimize(t.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TiesTrim)->Arg(1 << 16)->Arg(1 << 20);

void BM_DareApply(benchmark::State& state) {
    const auto tau = sparse_delta(static_cast<std::size_t>(state.range(0)), 1.0, 40);
    std::vector<float> work(tau.size());
    std::uint64_t seed = 0;
    for (auto _ : state) {
        work = tau;
        benchmark::DoNotOptimize(dare_apply(work, 0.9, seed++, 0, 0x1234, 0));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DareApply)->Arg(1 << 20);

}  // namespace
