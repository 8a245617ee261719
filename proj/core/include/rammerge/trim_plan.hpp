// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace rammerge {

/// Number of elements TIES keeps: ceil(ratio * length), capped at length.
std::uint64_t trim_keep_count(double ratio, std::uint64_t length);

/// 65536-bin histogram over one 16-bit half of |x|'s f32 bit pattern. For
/// non-negative floats the bit pattern orders like the value, so two passes
/// (high half, then low half within one high bin) locate the exact k-th
/// largest magnitude without sorting or holding the data.
class MagnitudeHistogram {
public:
    MagnitudeHistogram() : bins_(65536, 0) {}

    void add_high(std::span<const float> values) noexcept;
    /// Only elements whose high half equals `high_bin` are counted.
    void add_low(std::span<const float> values, std::uint32_t high_bin) noexcept;
    void merge(const MagnitudeHistogram& other) noexcept;
    void clear() noexcept;

    std::uint64_t operator[](std::size_t bin) const noexcept { return bins_[bin]; }

private:
    std::vector<std::uint64_t> bins_;
};

/// Result of top-k magnitude selection over an ordered element sequence:
/// element x survives iff bits(|x|) > cutoff, or bits(|x|) == cutoff and
/// fewer than ties_to_keep earlier elements also sat exactly at the cutoff.
struct TrimCutoff {
    std::uint32_t bits = 0;
    std::uint64_t ties_to_keep = 0;
    std::uint64_t ties_total = 0;
    bool keep_all = false;
    bool keep_none = false;

    /// True when some but not all elements at the cutoff survive, so callers
    /// need each chunk's count of earlier ties.
    bool partial_ties() const noexcept { return !keep_all && !keep_none && ties_to_keep < ties_total; }
};

struct HighSelection {
    std::uint32_t bin = 0;
    std::uint64_t above = 0;  // elements in strictly higher bins
};

HighSelection select_high(const MagnitudeHistogram& high, std::uint64_t keep);
TrimCutoff select_low(const MagnitudeHistogram& low, const HighSelection& high, std::uint64_t keep);

std::uint32_t magnitude_bits(float value) noexcept;

/// Elements of `values` whose magnitude bits equal `bits`.
std::uint64_t count_at(std::span<const float> values, std::uint32_t bits) noexcept;

/// Zero the elements the cutoff drops. `ties_before` is the number of
/// cutoff-magnitude elements that precede this span in sequence order.
/// Returns the number of cutoff-magnitude elements inside the span.
std::uint64_t apply_trim(std::span<float> values, const TrimCutoff& cutoff, std::uint64_t ties_before) noexcept;

}  // namespace rammerge
