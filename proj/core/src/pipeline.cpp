// SPDX-License-Identifier: Apache-2.0

#include "rammerge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <exception>
#include <thread>

#include <fcntl.h>
#include <sys/resource.h>
#include <unistd.h>

#include <fmt/core.h>

#include "rammerge/error.hpp"
#include "rammerge/hash.hpp"
#include "rammerge/trim_plan.hpp"

namespace rammerge {

namespace fs = std::filesystem;

std::string to_string(MethodKind kind) {
    switch (kind) {
        case MethodKind::Ram: return "ram";
        case MethodKind::TaskArithmetic: return "ta";
        case MethodKind::Fisher: return "fisher";
        case MethodKind::Ties: return "ties";
        case MethodKind::DareTa: return "dare-ta";
        case MethodKind::DareTies: return "dare-ties";
    }
    return "?";
}

std::string to_string(TiesScope scope) {
    return scope == TiesScope::Tensor ? "tensor" : "global";
}

std::string to_string(DilutionRegion region) {
    return region == DilutionRegion::UniqueOnly ? "unique" : "full";
}

std::uint64_t peak_rss_bytes() {
    rusage usage{};
    if (::getrusage(RUSAGE_SELF, &usage) != 0) return 0;
    return static_cast<std::uint64_t>(usage.ru_maxrss) * 1024;  // Linux reports KiB
}

void validate(const MergeConfig& config, std::size_t model_count) {
    if (model_count == 0 || model_count > kMaxModels) {
        throw ConfigError(fmt::format("need between 1 and {} models, got {}", kMaxModels, model_count));
    }
    if (!(config.epsilon >= 0.0f) || !std::isfinite(config.epsilon)) {
        throw ConfigError(fmt::format("epsilon must be a finite value >= 0, got {}", config.epsilon));
    }
    const MergeMethod& m = config.method;
    auto finite = [](double v) { return std::isfinite(v); };
    switch (m.kind) {
        case MethodKind::Ram:
            if (!finite(m.rescale.r) || m.rescale.r < 0.0) {
                throw ConfigError(fmt::format("r must be >= 0, got {}", m.rescale.r));
            }
            if (m.rescale.kind == RescaleRule::Kind::ClippedLinear && (!finite(m.rescale.alpha) || m.rescale.alpha < 0.0)) {
                throw ConfigError(fmt::format("alpha must be >= 0, got {}", m.rescale.alpha));
            }
            break;
        case MethodKind::Ties:
        case MethodKind::DareTies:
            if (!(m.ties_trim > 0.0 && m.ties_trim <= 1.0)) {
                throw ConfigError(fmt::format("TIES trim ratio must be in (0, 1], got {}", m.ties_trim));
            }
            [[fallthrough]];
        case MethodKind::TaskArithmetic:
        case MethodKind::DareTa:
            if (!finite(m.scale)) throw ConfigError(fmt::format("scale must be finite, got {}", m.scale));
            break;
        case MethodKind::Fisher:
            break;
    }
    if (m.kind == MethodKind::DareTa || m.kind == MethodKind::DareTies) {
        if (!(m.drop_p >= 0.0 && m.drop_p < 1.0)) {
            throw ConfigError(fmt::format("DARE drop rate must be in [0, 1), got {}", m.drop_p));
        }
    }
}

namespace {

struct Unit {
    std::size_t tensor = 0;
    std::uint64_t start = 0;
    std::uint64_t length = 0;
};

struct UnitRange {
    std::size_t first = 0;
    std::size_t last = 0;  // exclusive
};

/// Run fn(0..count) on up to `workers` threads. Rethrows the exception of the
/// lowest failing index so errors are reported deterministically.
template <class Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
    if (count == 0) return;
    if (workers <= 1 || count == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> threads;
        const std::size_t n = std::min(workers, count);
        threads.reserve(n);
        for (std::size_t w = 0; w < n; ++w) {
            threads.emplace_back([&] {
                for (std::size_t i = next++; i < count; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// Process units in windows of `workers`: each window computes in parallel
/// into reusable result slots, then `consume` sees the slots in unit order.
template <class Result, class Work, class Consume>
void run_windows(UnitRange range, std::size_t workers, std::vector<Result>& slots, Work&& work,
                 Consume&& consume) {
    for (std::size_t begin = range.first; begin < range.last; begin += workers) {
        const std::size_t n = std::min(workers, range.last - begin);
        parallel_for(n, workers, [&](std::size_t k) { work(begin + k, slots[k]); });
        for (std::size_t k = 0; k < n; ++k) consume(begin + k, slots[k]);
    }
}

/// Base and model checkpoints with per-tensor metas resolved once.
struct Sources {
    const Checkpoint& base;
    std::span<const Checkpoint> models;
    std::span<const Checkpoint> fisher;
    std::vector<std::vector<const TensorMeta*>> model_metas;   // [tensor][model]
    std::vector<std::vector<const TensorMeta*>> fisher_metas;  // [tensor][model]
    std::vector<std::uint64_t> name_hashes;

    Sources(const Checkpoint& b, std::span<const Checkpoint> m, std::span<const Checkpoint> f = {})
        : base(b), models(m), fisher(f) {
        for (const auto& meta : base.tensors()) {
            std::vector<const TensorMeta*> row;
            for (const auto& model : models) row.push_back(&model.meta(meta.name));
            model_metas.push_back(std::move(row));
            std::vector<const TensorMeta*> frow;
            for (const auto& weights : fisher) frow.push_back(&weights.meta(meta.name));
            fisher_metas.push_back(std::move(frow));
            name_hashes.push_back(fnv1a64(meta.name));
        }
    }

    const TensorMeta& base_meta(std::size_t tensor) const { return base.tensors()[tensor]; }
};

std::vector<Unit> plan_units(const Checkpoint& base, std::uint64_t chunk, std::vector<UnitRange>* per_tensor) {
    std::vector<Unit> units;
    for (std::size_t t = 0; t < base.tensors().size(); ++t) {
        const std::uint64_t n = base.tensors()[t].numel();
        UnitRange range{units.size(), units.size()};
        for (std::uint64_t start = 0; start < n; start += chunk) {
            units.push_back({t, start, std::min(chunk, n - start)});
        }
        range.last = units.size();
        if (per_tensor) per_tensor->push_back(range);
    }
    return units;
}

std::uint64_t effective_chunk(const RunOptions& options) {
    if (options.workers == 0) throw ConfigError("worker count must be at least 1");
    const std::uint64_t chunk = std::max<std::uint64_t>(options.chunk_elements, 8);
    return (chunk + 7) / 8 * 8;
}

void check_finite(std::span<const float> values, const Checkpoint& file, const TensorMeta& meta,
                  std::uint64_t start) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NonFiniteInput(fmt::format("'{}': tensor '{}' has non-finite value {} at element {}",
                                             file.path().string(), meta.name, values[i], start + i));
        }
    }
}

/// Base values and the N task-vector slices of one unit.
struct Slab {
    std::vector<float> base;
    std::vector<std::vector<float>> taus;

    std::vector<FloatView> tau_views() const { return {taus.begin(), taus.end()}; }
};

void load_slab(const Sources& src, const Unit& unit, Slab& slab) {
    const TensorMeta& bmeta = src.base_meta(unit.tensor);
    const std::size_t len = static_cast<std::size_t>(unit.length);
    slab.base.resize(len);
    src.base.read_f32(bmeta, unit.start, slab.base);
    check_finite(slab.base, src.base, bmeta, unit.start);

    slab.taus.resize(src.models.size());
    for (std::size_t t = 0; t < src.models.size(); ++t) {
        auto& tau = slab.taus[t];
        tau.resize(len);
        const TensorMeta& mmeta = *src.model_metas[unit.tensor][t];
        src.models[t].read_f32(mmeta, unit.start, tau);
        check_finite(tau, src.models[t], mmeta, unit.start);
        delta_into(slab.base, tau, tau);
        check_finite(tau, src.models[t], mmeta, unit.start);
    }
}

/// Masks and overlap counts of one unit.
struct Probe {
    std::vector<Mask> masks;
    std::vector<std::uint8_t> counts;

    std::vector<MaskView> views() const { return {masks.begin(), masks.end()}; }

    void compute(const Slab& slab, float epsilon) {
        masks.resize(slab.taus.size());
        for (std::size_t t = 0; t < slab.taus.size(); ++t) {
            masks[t].resize(slab.base.size());
            mask_into(slab.taus[t], epsilon, masks[t]);
        }
        counts.resize(slab.base.size());
        overlap_counts_into(views(), counts);
    }

    void recount() {
        counts.resize(masks.empty() ? 0 : masks.front().size());
        overlap_counts_into(views(), counts);
    }
};

/// Per-run bit-packed mask file: model-major, each tensor byte aligned.
class MaskCache {
public:
    MaskCache(const fs::path& dir, const Checkpoint& base, std::size_t models) : models_(models) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        path_ = dir / "masks.bin";
        for (const auto& meta : base.tensors()) {
            tensor_offsets_.push_back(stride_);
            stride_ += (meta.numel() + 7) / 8;
        }
        fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
        if (fd_ < 0) {
            throw IoError(fmt::format("cannot create mask cache '{}': {}", path_.string(), std::strerror(errno)));
        }
    }

    ~MaskCache() {
        if (fd_ >= 0) ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }

    MaskCache(const MaskCache&) = delete;
    MaskCache& operator=(const MaskCache&) = delete;

    void store(const Unit& unit, std::size_t model, MaskView bits) const {
        std::vector<std::uint8_t> packed((bits.size() + 7) / 8, 0);
        for (std::size_t i = 0; i < bits.size(); ++i) {
            packed[i / 8] = static_cast<std::uint8_t>(packed[i / 8] | (bits[i] << (i % 8)));
        }
        io(true, offset(unit, model), packed);
    }

    void load(const Unit& unit, std::size_t model, Mask& bits) const {
        std::vector<std::uint8_t> packed((unit.length + 7) / 8);
        io(false, offset(unit, model), packed);
        bits.resize(unit.length);
        for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
    }

private:
    std::uint64_t offset(const Unit& unit, std::size_t model) const {
        return model * stride_ + tensor_offsets_[unit.tensor] + unit.start / 8;
    }

    void io(bool write, std::uint64_t offset, std::span<std::uint8_t> buf) const {
        std::size_t done = 0;
        while (done < buf.size()) {
            const ssize_t n = write ? ::pwrite(fd_, buf.data() + done, buf.size() - done,
                                               static_cast<off_t>(offset + done))
                                    : ::pread(fd_, buf.data() + done, buf.size() - done,
                                              static_cast<off_t>(offset + done));
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) throw IoError(fmt::format("mask cache I/O failed on '{}'", path_.string()));
            done += static_cast<std::size_t>(n);
        }
    }

    fs::path path_;
    int fd_ = -1;
    std::size_t models_;
    std::uint64_t stride_ = 0;
    std::vector<std::uint64_t> tensor_offsets_;
};

/// Global and per-tensor overlap accumulators fed in unit order.
class AnalysisBuilder {
public:
    AnalysisBuilder(const Checkpoint& base, std::size_t models) : global_(models) {
        for (const auto& meta : base.tensors()) {
            tensors_.emplace_back(models);
            names_.push_back(meta.name);
            numels_.push_back(meta.numel());
        }
    }

    void add(const Unit& unit, const OverlapAccumulator& local) {
        global_.merge(local);
        tensors_[unit.tensor].merge(local);
    }

    Analysis finish(std::uint64_t d) const {
        Analysis a;
        a.stats = global_.finish(d);
        for (std::size_t t = 0; t < tensors_.size(); ++t) {
            a.tensors.push_back({names_[t], numels_[t], tensors_[t].partial().models});
        }
        return a;
    }

private:
    OverlapAccumulator global_;
    std::vector<OverlapAccumulator> tensors_;
    std::vector<std::string> names_;
    std::vector<std::uint64_t> numels_;
};

struct ProbeSlot {
    Slab slab;
    Probe probe;
    std::optional<OverlapAccumulator> acc;
};

Analysis probe_pass(const Sources& src, const std::vector<Unit>& units, float epsilon, std::size_t workers,
                    const MaskCache* cache) {
    const std::size_t n = src.models.size();
    AnalysisBuilder builder(src.base, n);
    std::vector<ProbeSlot> slots(workers);
    run_windows(
        UnitRange{0, units.size()}, workers, slots,
        [&](std::size_t u, ProbeSlot& slot) {
            load_slab(src, units[u], slot.slab);
            slot.probe.compute(slot.slab, epsilon);
            slot.acc.emplace(n);
            const auto views = slot.probe.views();
            slot.acc->add(views, slot.probe.counts);
            if (cache) {
                for (std::size_t t = 0; t < n; ++t) cache->store(units[u], t, views[t]);
            }
        },
        [&](std::size_t u, ProbeSlot& slot) { builder.add(units[u], *slot.acc); });
    return builder.finish(src.base.parameter_count());
}

std::vector<TensorSpec> output_layout(const Checkpoint& base, std::optional<DType> force) {
    std::vector<TensorSpec> layout;
    for (const auto& meta : base.tensors()) layout.push_back({meta.name, force.value_or(meta.dtype), meta.shape});
    return layout;
}

bool is_dare(MethodKind kind) {
    return kind == MethodKind::DareTa || kind == MethodKind::DareTies;
}

bool is_ties(MethodKind kind) {
    return kind == MethodKind::Ties || kind == MethodKind::DareTies;
}

/// Apply DARE to every task vector of a slab; adds drop counts to `dropped`.
void apply_dare(const Sources& src, const Unit& unit, const MergeMethod& method, Slab& slab,
                std::vector<std::uint64_t>* dropped) {
    for (std::size_t t = 0; t < slab.taus.size(); ++t) {
        const std::uint64_t n = dare_apply(slab.taus[t], method.drop_p, method.seed, static_cast<std::uint32_t>(t),
                                           src.name_hashes[unit.tensor], unit.start);
        if (dropped) (*dropped)[t] += n;
    }
}

/// Per-model top-k cutoffs over a run of units, plus each unit's count of
/// earlier cutoff-magnitude elements when ties are only partly kept.
struct TrimPlans {
    UnitRange range;
    std::vector<TrimCutoff> cutoffs;
    std::vector<std::vector<std::uint64_t>> ties_before;  // [model][unit - range.first]
};

struct HistogramSlot {
    Slab slab;
    std::vector<MagnitudeHistogram> hists;
    std::vector<std::uint64_t> ties;
};

TrimPlans plan_trims(const Sources& src, const std::vector<Unit>& units, UnitRange range, const MergeMethod& method,
                     std::size_t workers) {
    const std::size_t n = src.models.size();
    std::uint64_t length = 0;
    for (std::size_t u = range.first; u < range.last; ++u) length += units[u].length;
    const std::uint64_t keep = trim_keep_count(method.ties_trim, length);

    TrimPlans plans;
    plans.range = range;
    plans.cutoffs.resize(n);
    plans.ties_before.assign(n, {});
    if (keep >= length) {
        for (auto& c : plans.cutoffs) c.keep_all = true;
        return plans;
    }

    auto load = [&](std::size_t u, Slab& slab) {
        load_slab(src, units[u], slab);
        if (is_dare(method.kind)) apply_dare(src, units[u], method, slab, nullptr);
    };

    std::vector<HistogramSlot> slots(workers);
    for (auto& s : slots) s.hists.resize(n);

    std::vector<MagnitudeHistogram> high(n);
    run_windows(
        range, workers, slots,
        [&](std::size_t u, HistogramSlot& slot) {
            load(u, slot.slab);
            for (std::size_t t = 0; t < n; ++t) {
                slot.hists[t].clear();
                slot.hists[t].add_high(slot.slab.taus[t]);
            }
        },
        [&](std::size_t, HistogramSlot& slot) {
            for (std::size_t t = 0; t < n; ++t) high[t].merge(slot.hists[t]);
        });

    std::vector<HighSelection> selections;
    for (std::size_t t = 0; t < n; ++t) selections.push_back(select_high(high[t], keep));
    high.clear();

    std::vector<MagnitudeHistogram> low(n);
    run_windows(
        range, workers, slots,
        [&](std::size_t u, HistogramSlot& slot) {
            load(u, slot.slab);
            for (std::size_t t = 0; t < n; ++t) {
                slot.hists[t].clear();
                slot.hists[t].add_low(slot.slab.taus[t], selections[t].bin);
            }
        },
        [&](std::size_t, HistogramSlot& slot) {
            for (std::size_t t = 0; t < n; ++t) low[t].merge(slot.hists[t]);
        });

    bool any_partial = false;
    for (std::size_t t = 0; t < n; ++t) {
        plans.cutoffs[t] = select_low(low[t], selections[t], keep);
        any_partial = any_partial || plans.cutoffs[t].partial_ties();
    }
    if (!any_partial) return plans;

    for (auto& v : plans.ties_before) v.assign(range.last - range.first, 0);
    std::vector<std::uint64_t> running(n, 0);
    run_windows(
        range, workers, slots,
        [&](std::size_t u, HistogramSlot& slot) {
            load(u, slot.slab);
            slot.ties.assign(n, 0);
            for (std::size_t t = 0; t < n; ++t) {
                if (plans.cutoffs[t].partial_ties()) slot.ties[t] = count_at(slot.slab.taus[t], plans.cutoffs[t].bits);
            }
        },
        [&](std::size_t u, HistogramSlot& slot) {
            for (std::size_t t = 0; t < n; ++t) {
                plans.ties_before[t][u - range.first] = running[t];
                running[t] += slot.ties[t];
            }
        });
    return plans;
}

struct MergeSlot {
    Slab slab;
    Probe probe;
    std::vector<std::vector<float>> weights;
    std::vector<float> out;
    std::optional<OverlapAccumulator> acc;
    std::uint64_t conflicts = 0;
    std::vector<std::uint64_t> dropped;
};

std::uint64_t total_elements(const Checkpoint& base) {
    return base.parameter_count();
}

}  // namespace

Analysis analyze(const Checkpoint& base, std::span<const Checkpoint> models, float epsilon,
                 const RunOptions& options) {
    if (models.empty() || models.size() > kMaxModels) {
        throw ConfigError(fmt::format("need between 1 and {} models, got {}", kMaxModels, models.size()));
    }
    if (!(epsilon >= 0.0f) || !std::isfinite(epsilon)) {
        throw ConfigError(fmt::format("epsilon must be a finite value >= 0, got {}", epsilon));
    }
    validate_alignment(base, models);
    const Sources src(base, models);
    const auto units = plan_units(base, effective_chunk(options), nullptr);
    return probe_pass(src, units, epsilon, options.workers, nullptr);
}

MergeResult run_merge(const MergeInputs& inputs, const MergeConfig& config, const fs::path& out,
                      const RunOptions& options) {
    const std::size_t n = inputs.models.size();
    validate(config, n);
    validate_alignment(inputs.base, inputs.models);

    const MergeMethod& method = config.method;
    MergeResult result;
    result.output = out;

    std::span<const Checkpoint> fisher;
    if (method.kind == MethodKind::Fisher) {
        if (!inputs.fisher.empty()) {
            if (inputs.fisher.size() != n) {
                throw ConfigError(fmt::format("got Fisher weights for {} of {} models; give all or none",
                                              inputs.fisher.size(), n));
            }
            validate_alignment(inputs.base, inputs.fisher);
            fisher = inputs.fisher;
        } else {
            result.warnings.push_back("no Fisher weights given; falling back to uniform weights");
        }
    }

    const Sources src(inputs.base, inputs.models, fisher);
    std::vector<UnitRange> per_tensor;
    const auto units = plan_units(inputs.base, effective_chunk(options), &per_tensor);
    const std::size_t workers = options.workers;
    if (workers == 0) throw ConfigError("worker count must be at least 1");

    std::optional<MaskCache> cache;
    std::vector<double> lambdas;
    if (method.kind == MethodKind::Ram) {
        if (options.mask_cache_dir) cache.emplace(*options.mask_cache_dir, inputs.base, n);
        result.analysis = probe_pass(src, units, config.epsilon, workers, cache ? &*cache : nullptr);
        result.lambdas = assign_lambdas(result.analysis.stats, method.rescale);
        for (const auto& w : result.lambdas->warnings) result.warnings.push_back(w);
        for (const auto& e : result.lambdas->models) lambdas.push_back(e.lambda);
    }

    CheckpointWriter writer(out, output_layout(inputs.base, config.output_dtype), inputs.base.metadata());
    AnalysisBuilder builder(inputs.base, n);
    std::vector<std::uint64_t> dropped(n, 0);
    std::uint64_t conflicts = 0;

    std::vector<MergeSlot> slots(workers);
    std::optional<TrimPlans> plans;

    auto work = [&](std::size_t u, MergeSlot& slot) {
        const Unit& unit = units[u];
        Slab& slab = slot.slab;
        load_slab(src, unit, slab);
        slot.out.resize(unit.length);

        if (method.kind == MethodKind::Ram) {
            if (cache) {
                slot.probe.masks.resize(n);
                for (std::size_t t = 0; t < n; ++t) cache->load(unit, t, slot.probe.masks[t]);
                slot.probe.recount();
            } else {
                slot.probe.compute(slab, config.epsilon);
            }
            ram_merged_delta(slab.tau_views(), slot.probe.views(), slot.probe.counts, lambdas, slot.out);
            add_delta(slab.base, slot.out, slot.out);
            return;
        }

        // Baselines report the same probing statistics, taken on the raw task vectors.
        slot.probe.compute(slab, config.epsilon);
        slot.acc.emplace(n);
        slot.acc->add(slot.probe.views(), slot.probe.counts);

        slot.dropped.assign(n, 0);
        if (is_dare(method.kind)) apply_dare(src, unit, method, slab, &slot.dropped);

        switch (method.kind) {
            case MethodKind::TaskArithmetic:
            case MethodKind::DareTa:
                ta_merged_delta(slab.tau_views(), method.scale, slot.out);
                break;
            case MethodKind::Fisher: {
                slot.weights.resize(n);
                std::vector<FloatView> views;
                for (std::size_t t = 0; t < n; ++t) {
                    auto& w = slot.weights[t];
                    w.resize(unit.length);
                    if (fisher.empty()) {
                        std::fill(w.begin(), w.end(), 1.0f);
                    } else {
                        fisher[t].read_f32(*src.fisher_metas[unit.tensor][t], unit.start, w);
                    }
                    views.emplace_back(w);
                }
                fisher_merged_delta(slab.tau_views(), views, slot.out);
                break;
            }
            case MethodKind::Ties:
            case MethodKind::DareTies: {
                for (std::size_t t = 0; t < n; ++t) {
                    const auto& ties_before = plans->ties_before[t];
                    apply_trim(slab.taus[t], plans->cutoffs[t],
                               ties_before.empty() ? 0 : ties_before[u - plans->range.first]);
                }
                TiesDiagnostics diag;
                ties_merged_delta(slab.tau_views(), method.scale, slot.out, &diag);
                slot.conflicts = diag.sign_conflicts;
                break;
            }
            case MethodKind::Ram:
                break;
        }
        add_delta(slab.base, slot.out, slot.out);
    };

    auto consume = [&](std::size_t u, MergeSlot& slot) {
        writer.append(slot.out);
        if (method.kind == MethodKind::Ram) return;
        builder.add(units[u], *slot.acc);
        for (std::size_t t = 0; t < n; ++t) dropped[t] += slot.dropped[t];
        conflicts += slot.conflicts;
        slot.conflicts = 0;
    };

    if (is_ties(method.kind) && method.ties_scope == TiesScope::Global) {
        plans = plan_trims(src, units, UnitRange{0, units.size()}, method, workers);
        run_windows(UnitRange{0, units.size()}, workers, slots, work, consume);
    } else if (is_ties(method.kind)) {
        for (const UnitRange& range : per_tensor) {
            if (range.first == range.last) continue;
            plans = plan_trims(src, units, range, method, workers);
            run_windows(range, workers, slots, work, consume);
        }
    } else {
        run_windows(UnitRange{0, units.size()}, workers, slots, work, consume);
    }

    writer.finish();
    result.checksum = writer.checksum();
    result.output_bytes = writer.bytes_written();

    if (method.kind != MethodKind::Ram) {
        result.analysis = builder.finish(total_elements(inputs.base));
        for (std::size_t t = 0; t < n; ++t) {
            if (!result.analysis.stats.models[t].rho()) {
                result.warnings.push_back(fmt::format("model {} has no active elements", t));
            }
        }
    }
    if (is_ties(method.kind)) result.ties_sign_conflicts = conflicts;
    if (is_dare(method.kind)) result.dare_dropped = dropped;
    return result;
}

DilutionResult run_dilution(const Checkpoint& base, std::span<const Checkpoint> models, std::size_t target,
                            double scale, DilutionRegion region, float epsilon, std::optional<DType> output_dtype,
                            const fs::path& out, const RunOptions& options) {
    const std::size_t n = models.size();
    if (n == 0 || n > kMaxModels) {
        throw ConfigError(fmt::format("need between 1 and {} models, got {}", kMaxModels, n));
    }
    if (target >= n) throw ConfigError(fmt::format("target index {} out of range for {} models", target, n));
    if (!std::isfinite(scale)) throw ConfigError(fmt::format("scale must be finite, got {}", scale));
    if (!(epsilon >= 0.0f) || !std::isfinite(epsilon)) {
        throw ConfigError(fmt::format("epsilon must be a finite value >= 0, got {}", epsilon));
    }
    validate_alignment(base, models);

    const Sources src(base, models);
    const auto units = plan_units(base, effective_chunk(options), nullptr);
    const std::size_t workers = options.workers;

    struct Slot {
        Slab slab;
        Probe probe;
        std::vector<std::uint8_t> keep;
        std::vector<float> out;
        std::optional<OverlapAccumulator> acc;
        std::uint64_t edited = 0;
    };

    CheckpointWriter writer(out, output_layout(base, output_dtype), base.metadata());
    AnalysisBuilder builder(base, n);
    DilutionResult result;
    result.output = out;

    std::vector<Slot> slots(workers);
    run_windows(
        UnitRange{0, units.size()}, workers, slots,
        [&](std::size_t u, Slot& slot) {
            load_slab(src, units[u], slot.slab);
            slot.probe.compute(slot.slab, epsilon);
            slot.acc.emplace(n);
            slot.acc->add(slot.probe.views(), slot.probe.counts);

            const Mask& mine = slot.probe.masks[target];
            slot.keep.resize(mine.size());
            slot.edited = 0;
            for (std::size_t i = 0; i < mine.size(); ++i) {
                const bool in_region =
                    mine[i] && (region == DilutionRegion::Full || slot.probe.counts[i] == 1);
                slot.keep[i] = in_region ? 1 : 0;
                slot.edited += in_region;
            }
            slot.out.resize(mine.size());
            scaled_region_apply(slot.slab.base, slot.slab.taus[target], slot.keep, scale, slot.out);
        },
        [&](std::size_t u, Slot& slot) {
            writer.append(slot.out);
            builder.add(units[u], *slot.acc);
            result.edited += slot.edited;
        });

    writer.finish();
    result.checksum = writer.checksum();
    result.output_bytes = writer.bytes_written();
    result.analysis = builder.finish(base.parameter_count());
    return result;
}

}  // namespace rammerge
