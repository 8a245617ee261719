// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace rammerge {

/// Incremental 64-bit FNV-1a. Used for output checksums and as the stable
/// tensor-name hash that keys DARE's random stream.
class Fnv1a64 {
public:
    static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ull;
    static constexpr std::uint64_t kPrime = 0x100000001b3ull;

    void update(std::span<const std::byte> bytes) noexcept {
        std::uint64_t h = state_;
        for (std::byte b : bytes) {
            h ^= std::to_integer<std::uint64_t>(b);
            h *= kPrime;
        }
        state_ = h;
    }

    void update(std::string_view text) noexcept {
        update(std::as_bytes(std::span(text.data(), text.size())));
    }

    std::uint64_t value() const noexcept { return state_; }

private:
    std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a64(std::string_view text) noexcept {
    Fnv1a64 h;
    h.update(text);
    return h.value();
}

/// 16 lowercase hex digits.
std::string to_hex(std::uint64_t value);

}  // namespace rammerge
