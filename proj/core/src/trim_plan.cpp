// SPDX-License-Identifier: Apache-2.0

#include "rammerge/trim_plan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <fmt/core.h>

#include "rammerge/error.hpp"

namespace rammerge {

std::uint64_t trim_keep_count(double ratio, std::uint64_t length) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw ConfigError(fmt::format("TIES trim ratio must be in (0, 1], got {}", ratio));
    }
    const double keep = std::ceil(ratio * static_cast<double>(length));
    return keep >= static_cast<double>(length) ? length : static_cast<std::uint64_t>(keep);
}

std::uint32_t magnitude_bits(float value) noexcept {
    return std::bit_cast<std::uint32_t>(value) & 0x7fffffffu;
}

void MagnitudeHistogram::add_high(std::span<const float> values) noexcept {
    for (float v : values) ++bins_[magnitude_bits(v) >> 16];
}

void MagnitudeHistogram::add_low(std::span<const float> values, std::uint32_t high_bin) noexcept {
    for (float v : values) {
        const std::uint32_t bits = magnitude_bits(v);
        if ((bits >> 16) == high_bin) ++bins_[bits & 0xffffu];
    }
}

void MagnitudeHistogram::merge(const MagnitudeHistogram& other) noexcept {
    for (std::size_t i = 0; i < bins_.size(); ++i) bins_[i] += other.bins_[i];
}

void MagnitudeHistogram::clear() noexcept {
    std::fill(bins_.begin(), bins_.end(), 0);
}

HighSelection select_high(const MagnitudeHistogram& high, std::uint64_t keep) {
    HighSelection sel;
    if (keep == 0) return sel;
    std::uint64_t cumulative = 0;
    for (std::int64_t bin = 65535; bin >= 0; --bin) {
        const std::uint64_t n = high[static_cast<std::size_t>(bin)];
        if (cumulative + n >= keep) {
            sel.bin = static_cast<std::uint32_t>(bin);
            sel.above = cumulative;
            return sel;
        }
        cumulative += n;
    }
    throw CoverageMismatch(fmt::format("trim: asked to keep {} of only {} elements", keep, cumulative));
}

TrimCutoff select_low(const MagnitudeHistogram& low, const HighSelection& high, std::uint64_t keep) {
    TrimCutoff cut;
    if (keep == 0) {
        cut.keep_none = true;
        return cut;
    }
    std::uint64_t cumulative = high.above;
    for (std::int64_t bin = 65535; bin >= 0; --bin) {
        const std::uint64_t n = low[static_cast<std::size_t>(bin)];
        if (cumulative + n >= keep) {
            cut.bits = (high.bin << 16) | static_cast<std::uint32_t>(bin);
            cut.ties_total = n;
            cut.ties_to_keep = keep - cumulative;
            return cut;
        }
        cumulative += n;
    }
    throw CoverageMismatch("trim: low histogram does not match the high selection");
}

std::uint64_t count_at(std::span<const float> values, std::uint32_t bits) noexcept {
    std::uint64_t n = 0;
    for (float v : values) n += magnitude_bits(v) == bits;
    return n;
}

std::uint64_t apply_trim(std::span<float> values, const TrimCutoff& cutoff, std::uint64_t ties_before) noexcept {
    if (cutoff.keep_all) return 0;
    if (cutoff.keep_none) {
        for (float& v : values) v = 0.0f;
        return 0;
    }
    std::uint64_t ties = 0;
    for (float& v : values) {
        const std::uint32_t bits = magnitude_bits(v);
        if (bits > cutoff.bits) continue;
        if (bits == cutoff.bits) {
            if (ties_before + ties < cutoff.ties_to_keep) {
                ++ties;
                continue;
            }
            ++ties;
        }
        v = 0.0f;
    }
    return ties;
}

}  // namespace rammerge
