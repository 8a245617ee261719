// SPDX-License-Identifier: Apache-2.0

#include "rammerge/task_vector.hpp"

#include <cmath>

#include <fmt/core.h>

#include "rammerge/error.hpp"

namespace rammerge {

void delta_into(std::span<const float> base, std::span<const float> model, std::span<float> out) {
    if (base.size() != model.size() || out.size() != base.size()) {
        throw LengthMismatch(fmt::format("delta: base has {} elements, model {}, output {}", base.size(),
                                         model.size(), out.size()));
    }
    for (std::size_t i = 0; i < base.size(); ++i) out[i] = model[i] - base[i];
}

std::vector<float> delta(std::span<const float> base, std::span<const float> model) {
    std::vector<float> out(base.size());
    delta_into(base, model, out);
    return out;
}

void require_finite(std::span<const float> values, std::string_view what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NonFiniteInput(fmt::format("{}: non-finite value {} at element {}", what, values[i], i));
        }
    }
}

void mask_into(std::span<const float> tau, float epsilon, std::span<std::uint8_t> out) {
    if (!(epsilon >= 0.0f)) throw ConfigError(fmt::format("epsilon must be >= 0, got {}", epsilon));
    if (out.size() != tau.size()) {
        throw LengthMismatch(fmt::format("mask: {} values but {} output slots", tau.size(), out.size()));
    }
    for (std::size_t i = 0; i < tau.size(); ++i) {
        const float v = tau[i];
        if (!std::isfinite(v)) {
            throw NonFiniteInput(fmt::format("task vector has non-finite value {} at element {}", v, i));
        }
        out[i] = std::fabs(v) > epsilon ? 1 : 0;
    }
}

Mask mask(std::span<const float> tau, float epsilon) {
    Mask out(tau.size());
    mask_into(tau, epsilon, out);
    return out;
}

std::uint64_t count_active(std::span<const std::uint8_t> bits) noexcept {
    std::uint64_t n = 0;
    for (std::uint8_t b : bits) n += b;
    return n;
}

SparsityStats sparsity(std::span<const MaskSlice> masks, std::uint64_t d) {
    SparsityStats stats;
    stats.total = d;
    if (!masks.empty()) stats.model_index = masks.front().model_index;
    std::uint64_t covered = 0;
    for (const auto& slice : masks) {
        if (slice.model_index != stats.model_index) {
            throw LengthMismatch(fmt::format("sparsity: slices from models {} and {} mixed", stats.model_index,
                                             slice.model_index));
        }
        covered += slice.bits.size();
        stats.nonzero_count += count_active(slice.bits);
    }
    if (covered != d) {
        throw CoverageMismatch(fmt::format("sparsity: slices cover {} elements, expected {}", covered, d));
    }
    return stats;
}

}  // namespace rammerge
