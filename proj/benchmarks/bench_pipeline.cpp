// SPDX-License-Identifier: Apache-2.0

// End-to-end streaming merge over a small on-disk checkpoint set.

#include <benchmark/benchmark.h>

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rammerge/pipeline.hpp"
#include "rammerge/tensor_store.hpp"

using namespace rammerge;
namespace fs = std::filesystem;

namespace {

struct BenchSet {
    fs::path dir;
    std::optional<MergeInputs> inputs;

    BenchSet() {
        std::string tmpl = (fs::temp_directory_path() / "rammerge-bench-XXXXXX").string();
        dir = ::mkdtemp(tmpl.data());
        std::mt19937_64 rng(1);
        std::normal_distribution<float> g(0.0f, 0.05f);
        std::bernoulli_distribution on(0.3);
        std::vector<TensorEntry> base;
        for (int k = 0; k < 8; ++k) {
            TensorEntry e;
            e.meta.name = "layer." + std::to_string(k);
            e.meta.dtype = DType::BF16;
            e.meta.shape = {512, 512};
            e.values.resize(512 * 512);
            for (auto& v : e.values) v = g(rng);
            base.push_back(std::move(e));
        }
        Checkpoint base_ckpt = write_checkpoint(dir / "base.st", base);
        std::vector<Checkpoint> models;
        for (int t = 0; t < 4; ++t) {
            auto model = base;
            for (auto& e : model) {
                for (auto& v : e.values) {
                    if (on(rng)) v += g(rng) * 0.1f;
                }
            }
            models.push_back(write_checkpoint(dir / ("m" + std::to_string(t) + ".st"), model));
        }
        inputs.emplace(MergeInputs{std::move(base_ckpt), std::move(models), {}});
    }
    ~BenchSet() { fs::remove_all(dir); }
};

BenchSet& bench_set() {
    static BenchSet set;
    return set;
}

void BM_Merge(benchmark::State& state) {
    auto& set = bench_set();
    MergeConfig config;
    config.method.kind = static_cast<MethodKind>(state.range(0));
    RunOptions options;
    options.workers = static_cast<std::size_t>(state.range(1));
    std::uint64_t params = 0;
    for (auto _ : state) {
        const auto result = run_merge(*set.inputs, config, set.dir / "out.st", options);
        params = result.analysis.stats.total;
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(params));
}
BENCHMARK(BM_Merge)
    ->ArgsProduct({{static_cast<long>(MethodKind::Ram), static_cast<long>(MethodKind::Ties),
                    static_cast<long>(MethodKind::DareTies)},
                   {1, 4}})
    ->Unit(benchmark::kMillisecond);

}  // namespace
