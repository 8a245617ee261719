// SPDX-License-Identifier: Apache-2.0

#include "rammerge/overlap.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include <fmt/core.h>

#include "rammerge/error.hpp"

namespace rammerge {

namespace {

void check_model_count(std::size_t n) {
    if (n == 0 || n > kMaxModels) {
        throw ConfigError(fmt::format("model count must be in [1, {}], got {}", kMaxModels, n));
    }
}

}  // namespace

void overlap_counts_into(std::span<const MaskView> masks, std::span<std::uint8_t> counts) {
    check_model_count(masks.size());
    for (const auto& m : masks) {
        if (m.size() != counts.size()) {
            throw LengthMismatch(fmt::format("overlap_counts: mask of {} elements, expected {}", m.size(),
                                             counts.size()));
        }
    }
    std::fill(counts.begin(), counts.end(), std::uint8_t{0});
    for (const auto& m : masks) {
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = static_cast<std::uint8_t>(counts[i] + m[i]);
    }
}

std::vector<std::uint8_t> overlap_counts(std::span<const MaskView> masks) {
    std::vector<std::uint8_t> counts(masks.empty() ? 0 : masks.front().size());
    overlap_counts_into(masks, counts);
    return counts;
}

std::optional<double> ModelOverlap::rho() const noexcept {
    if (unique > 0) return static_cast<double>(shared) / static_cast<double>(unique);
    if (shared > 0) return std::numeric_limits<double>::infinity();
    return std::nullopt;
}

OverlapAccumulator::OverlapAccumulator(std::size_t model_count) {
    check_model_count(model_count);
    stats_.model_count = model_count;
    stats_.models.resize(model_count);
    for (auto& m : stats_.models) m.histogram.assign(model_count, 0);
    stats_.positions.assign(model_count + 1, 0);
}

void OverlapAccumulator::add(std::span<const MaskView> masks) {
    if (masks.size() != stats_.model_count) {
        throw CoverageMismatch(fmt::format("expected {} masks, got {}", stats_.model_count, masks.size()));
    }
    scratch_.resize(masks.front().size());
    overlap_counts_into(masks, scratch_);
    add(masks, scratch_);
}

void OverlapAccumulator::add(std::span<const MaskView> masks, std::span<const std::uint8_t> counts) {
    const std::size_t n = stats_.model_count;
    if (masks.size() != n) {
        throw CoverageMismatch(fmt::format("expected {} masks, got {}", n, masks.size()));
    }
    for (const auto& m : masks) {
        if (m.size() != counts.size()) {
            throw LengthMismatch(fmt::format("mask of {} elements with {} counts", m.size(), counts.size()));
        }
    }

    // Position histogram first, then per-model splits; counts[i] - 1 is the
    // number of other models active alongside an active model.
    std::vector<std::uint64_t> local_positions(n + 1, 0);
    for (std::uint8_t c : counts) ++local_positions[c];
    for (std::size_t k = 0; k <= n; ++k) stats_.positions[k] += local_positions[k];

    for (std::size_t t = 0; t < n; ++t) {
        ModelOverlap& model = stats_.models[t];
        const MaskView bits = masks[t];
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (bits[i]) ++model.histogram[counts[i] - 1];
        }
    }
    for (auto& model : stats_.models) {
        std::uint64_t nonzero = 0;
        for (auto h : model.histogram) nonzero += h;
        model.nonzero = nonzero;
        model.unique = model.histogram[0];
        model.shared = nonzero - model.unique;
    }
    stats_.total += counts.size();
}

void OverlapAccumulator::merge(const OverlapAccumulator& other) {
    if (other.stats_.model_count != stats_.model_count) {
        throw CoverageMismatch("cannot merge overlap accumulators with different model counts");
    }
    stats_.total += other.stats_.total;
    for (std::size_t k = 0; k < stats_.positions.size(); ++k) stats_.positions[k] += other.stats_.positions[k];
    for (std::size_t t = 0; t < stats_.model_count; ++t) {
        ModelOverlap& a = stats_.models[t];
        const ModelOverlap& b = other.stats_.models[t];
        a.nonzero += b.nonzero;
        a.shared += b.shared;
        a.unique += b.unique;
        for (std::size_t k = 0; k < a.histogram.size(); ++k) a.histogram[k] += b.histogram[k];
    }
}

GlobalOverlapStats OverlapAccumulator::finish(std::uint64_t d) const {
    if (stats_.total != d) {
        throw CoverageMismatch(fmt::format("masks cover {} elements, expected {}", stats_.total, d));
    }
    return stats_;
}

GlobalOverlapStats accumulate_overlap_stats(std::span<const TensorMasks> tensors, std::size_t model_count,
                                            std::uint64_t d) {
    OverlapAccumulator acc(model_count);
    std::vector<MaskView> ordered(model_count);
    for (const auto& tensor : tensors) {
        if (tensor.slices.size() != model_count) {
            throw CoverageMismatch(fmt::format("tensor contributes {} masks, expected {}", tensor.slices.size(),
                                               model_count));
        }
        std::vector<bool> present(model_count, false);
        const std::size_t length = tensor.slices.front().bits.size();
        for (const auto& slice : tensor.slices) {
            if (slice.model_index >= model_count || present[slice.model_index]) {
                throw CoverageMismatch(fmt::format("tensor '{}': model index {} missing or repeated",
                                                   slice.tensor_name, slice.model_index));
            }
            if (slice.tensor_name != tensor.slices.front().tensor_name || slice.bits.size() != length) {
                throw CoverageMismatch(fmt::format("tensor '{}': slices disagree on name or length",
                                                   slice.tensor_name));
            }
            present[slice.model_index] = true;
            ordered[slice.model_index] = slice.bits;
        }
        acc.add(ordered);
    }
    return acc.finish(d);
}

std::vector<std::optional<std::vector<double>>> overlap_histogram(const GlobalOverlapStats& stats) {
    std::vector<std::optional<std::vector<double>>> out;
    out.reserve(stats.models.size());
    for (const auto& model : stats.models) {
        if (model.nonzero == 0) {
            out.emplace_back(std::nullopt);
            continue;
        }
        std::vector<double> fractions;
        fractions.reserve(model.histogram.size());
        for (auto h : model.histogram) {
            fractions.push_back(static_cast<double>(h) / static_cast<double>(model.nonzero));
        }
        out.emplace_back(std::move(fractions));
    }
    return out;
}

}  // namespace rammerge
