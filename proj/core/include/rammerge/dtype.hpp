// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace rammerge {

/// Storage element type of a checkpoint tensor. All arithmetic happens in
/// f32; the dtype only decides how elements are laid out on disk.
enum class DType : std::uint8_t { F32, F16, BF16 };

constexpr std::size_t width(DType dtype) noexcept {
    return dtype == DType::F32 ? 4 : 2;
}

std::string_view to_string(DType dtype) noexcept;
std::optional<DType> parse_dtype(std::string_view tag) noexcept;

// Scalar conversions. Widening is exact; narrowing rounds to nearest even
// and preserves NaN (quieted) and infinities.
float f16_bits_to_f32(std::uint16_t bits) noexcept;
float bf16_bits_to_f32(std::uint16_t bits) noexcept;
std::uint16_t f32_to_f16_bits(float value) noexcept;
std::uint16_t f32_to_bf16_bits(float value) noexcept;

/// Round `value` through `dtype` and back, i.e. what a reader sees after a
/// write in that dtype.
float quantize(float value, DType dtype) noexcept;

/// Decode little-endian raw bytes of `dtype` into f32. `raw.size()` must be
/// `out.size() * width(dtype)`.
void decode_to_f32(DType dtype, std::span<const std::byte> raw, std::span<float> out);

/// Encode f32 values as little-endian raw bytes of `dtype`.
void encode_from_f32(DType dtype, std::span<const float> values, std::span<std::byte> raw);

}  // namespace rammerge
