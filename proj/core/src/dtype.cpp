// SPDX-License-Identifier: Apache-2.0

#include "rammerge/dtype.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace rammerge {

std::string_view to_string(DType dtype) noexcept {
    switch (dtype) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view tag) noexcept {
    if (tag == "F32") return DType::F32;
    if (tag == "F16") return DType::F16;
    if (tag == "BF16") return DType::BF16;
    return std::nullopt;
}

float f16_bits_to_f32(std::uint16_t bits) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exponent = (bits >> 10) & 0x1fu;
    const std::uint32_t mantissa = bits & 0x3ffu;

    if (exponent == 0) {
        // zero or subnormal: mantissa * 2^-24, exact in f32
        const float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
        return sign ? -magnitude : magnitude;
    }
    if (exponent == 0x1f) {
        return std::bit_cast<float>(sign | 0x7f800000u | (mantissa << 13));
    }
    return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

float bf16_bits_to_f32(std::uint16_t bits) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f32_to_f16_bits(float value) noexcept {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t magnitude = bits & 0x7fffffffu;

    if (magnitude > 0x7f800000u) return sign | 0x7e00u;   // NaN
    if (magnitude >= 0x477ff000u) return sign | 0x7c00u;  // >= 65520 rounds to inf

    if (magnitude < 0x38800000u) {
        // below the smallest normal half: scale to units of 2^-24 and round
        // to nearest even; 1024 carries into the smallest normal encoding
        const float scaled = std::bit_cast<float>(magnitude) * 16777216.0f;
        return sign | static_cast<std::uint16_t>(std::nearbyint(scaled));
    }

    std::uint32_t half = (magnitude >> 13) - (112u << 10);
    const std::uint32_t rest = magnitude & 0x1fffu;
    if (rest > 0x1000u || (rest == 0x1000u && (half & 1u))) ++half;
    return sign | static_cast<std::uint16_t>(half);
}

std::uint16_t f32_to_bf16_bits(float value) noexcept {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    bits += 0x7fffu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>(bits >> 16);
}

float quantize(float value, DType dtype) noexcept {
    switch (dtype) {
        case DType::F32: return value;
        case DType::F16: return f16_bits_to_f32(f32_to_f16_bits(value));
        case DType::BF16: return bf16_bits_to_f32(f32_to_bf16_bits(value));
    }
    return value;
}

namespace {

std::uint16_t load_u16(const std::byte* p) noexcept {
    return static_cast<std::uint16_t>(std::to_integer<unsigned>(p[0]) |
                                      (std::to_integer<unsigned>(p[1]) << 8));
}

std::uint32_t load_u32(const std::byte* p) noexcept {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint32_t>(p[i]);
    return v;
}

void store_u16(std::byte* p, std::uint16_t v) noexcept {
    p[0] = static_cast<std::byte>(v & 0xffu);
    p[1] = static_cast<std::byte>(v >> 8);
}

void store_u32(std::byte* p, std::uint32_t v) noexcept {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xffu);
}

}  // namespace

void decode_to_f32(DType dtype, std::span<const std::byte> raw, std::span<float> out) {
    if (raw.size() != out.size() * width(dtype)) {
        throw std::invalid_argument("decode_to_f32: byte count does not match element count");
    }
    const std::byte* p = raw.data();
    switch (dtype) {
        case DType::F32:
            if constexpr (std::endian::native == std::endian::little) {
                std::memcpy(out.data(), p, raw.size());
            } else {
                for (std::size_t i = 0; i < out.size(); ++i)
                    out[i] = std::bit_cast<float>(load_u32(p + 4 * i));
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = f16_bits_to_f32(load_u16(p + 2 * i));
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = bf16_bits_to_f32(load_u16(p + 2 * i));
            break;
    }
}

void encode_from_f32(DType dtype, std::span<const float> values, std::span<std::byte> raw) {
    if (raw.size() != values.size() * width(dtype)) {
        throw std::invalid_argument("encode_from_f32: byte count does not match element count");
    }
    std::byte* p = raw.data();
    switch (dtype) {
        case DType::F32:
            if constexpr (std::endian::native == std::endian::little) {
                std::memcpy(p, values.data(), raw.size());
            } else {
                for (std::size_t i = 0; i < values.size(); ++i)
                    store_u32(p + 4 * i, std::bit_cast<std::uint32_t>(values[i]));
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < values.size(); ++i) store_u16(p + 2 * i, f32_to_f16_bits(values[i]));
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < values.size(); ++i) store_u16(p + 2 * i, f32_to_bf16_bits(values[i]));
            break;
    }
}

}  // namespace rammerge
