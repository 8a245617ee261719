// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rammerge {

/// Default activity threshold: |tau| <= 1e-5 counts as "unchanged".
inline constexpr float kDefaultEpsilon = 1e-5f;

/// One byte per element, 0 or 1.
using Mask = std::vector<std::uint8_t>;

/// Element-wise `model - base` in f32. Throws LengthMismatch.
std::vector<float> delta(std::span<const float> base, std::span<const float> model);
void delta_into(std::span<const float> base, std::span<const float> model, std::span<float> out);

/// Throws NonFiniteInput naming `what` if any element is NaN or infinite.
void require_finite(std::span<const float> values, std::string_view what);

/// Activity mask `|tau[i]| > epsilon` (strict). Throws NonFiniteInput on a
/// non-finite element and ConfigError on a negative epsilon.
Mask mask(std::span<const float> tau, float epsilon);
void mask_into(std::span<const float> tau, float epsilon, std::span<std::uint8_t> out);

std::uint64_t count_active(std::span<const std::uint8_t> bits) noexcept;

struct MaskSlice {
    std::size_t model_index = 0;
    std::string tensor_name;
    std::span<const std::uint8_t> bits;
};

struct SparsityStats {
    std::size_t model_index = 0;
    std::uint64_t nonzero_count = 0;
    std::uint64_t total = 0;

    double density() const noexcept {
        return total == 0 ? 0.0 : static_cast<double>(nonzero_count) / static_cast<double>(total);
    }
    double sparsity() const noexcept {
        return total == 0 ? 1.0 : static_cast<double>(total - nonzero_count) / static_cast<double>(total);
    }
};

/// Count set bits over every slice of one model. Throws CoverageMismatch
/// unless the slices cover exactly `d` elements, LengthMismatch if slices
/// belong to different models.
SparsityStats sparsity(std::span<const MaskSlice> masks, std::uint64_t d);

}  // namespace rammerge
