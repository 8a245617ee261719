// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rammerge/task_vector.hpp"

namespace rammerge {

/// Count buffers are one byte per element, which caps the model count.
inline constexpr std::size_t kMaxModels = 255;

using MaskView = std::span<const std::uint8_t>;

/// c[i] = number of masks with bit i set. Throws LengthMismatch on unequal
/// lengths, ConfigError for zero or more than kMaxModels masks.
std::vector<std::uint8_t> overlap_counts(std::span<const MaskView> masks);
void overlap_counts_into(std::span<const MaskView> masks, std::span<std::uint8_t> counts);

/// Shared/unique split of one model's active elements.
struct ModelOverlap {
    std::uint64_t nonzero = 0;
    std::uint64_t shared = 0;  // active where c >= 2
    std::uint64_t unique = 0;  // active where c == 1
    /// histogram[k]: active elements shared with exactly k other models.
    std::vector<std::uint64_t> histogram;

    /// shared / unique; +inf when unique == 0 < shared; nullopt when the
    /// model has no active elements at all.
    std::optional<double> rho() const noexcept;
};

struct GlobalOverlapStats {
    std::size_t model_count = 0;
    std::uint64_t total = 0;  // d
    std::vector<ModelOverlap> models;
    /// positions[k]: elements with overlap count exactly k, k in [0, N].
    std::vector<std::uint64_t> positions;

    SparsityStats sparsity(std::size_t model) const noexcept {
        return {model, models[model].nonzero, total};
    }
};

/// Streaming reduction of per-element masks into GlobalOverlapStats. Feed it
/// any partition of the parameter space in any order; partial accumulators
/// combine with merge(), and all sums are integers so the result does not
/// depend on scheduling.
class OverlapAccumulator {
public:
    explicit OverlapAccumulator(std::size_t model_count);

    /// One slice of elements: N masks of equal length.
    void add(std::span<const MaskView> masks);
    /// Same, reusing counts already computed by overlap_counts().
    void add(std::span<const MaskView> masks, std::span<const std::uint8_t> counts);

    void merge(const OverlapAccumulator& other);

    std::size_t model_count() const noexcept { return stats_.model_count; }
    std::uint64_t elements() const noexcept { return stats_.total; }

    /// Throws CoverageMismatch unless exactly `d` elements were added.
    GlobalOverlapStats finish(std::uint64_t d) const;
    const GlobalOverlapStats& partial() const noexcept { return stats_; }

private:
    GlobalOverlapStats stats_;
    std::vector<std::uint8_t> scratch_;
};

/// All N mask slices of one tensor.
struct TensorMasks {
    std::vector<MaskSlice> slices;
};

/// Throws CoverageMismatch unless every tensor contributes each model index
/// exactly once with equal slice lengths, and the lengths sum to `d`.
GlobalOverlapStats accumulate_overlap_stats(std::span<const TensorMasks> tensors, std::size_t model_count,
                                            std::uint64_t d);

/// Per model, histogram[k] / nonzero. nullopt for a model with no active elements.
std::vector<std::optional<std::vector<double>>> overlap_histogram(const GlobalOverlapStats& stats);

}  // namespace rammerge
