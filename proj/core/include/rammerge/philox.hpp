// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>

namespace rammerge {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11). Each output
/// block is a pure function of (counter, key), so any element's random draw
/// can be recomputed independently of evaluation order.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr Counter generate(Counter ctr, Key key) noexcept {
        constexpr std::uint32_t kMul0 = 0xD2511F53u;
        constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
        constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
        constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kWeyl0;
                key[1] += kWeyl1;
            }
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        }
        return ctr;
    }
};

/// Uniform double in [0, 1) for element `index` of the tensor whose stable
/// name hash is `name_hash`, in model `model_index`'s stream under `seed`.
constexpr double keyed_uniform(std::uint64_t seed, std::uint32_t model_index, std::uint64_t name_hash,
                               std::uint64_t index) noexcept {
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                  model_index, static_cast<std::uint32_t>(name_hash ^ (name_hash >> 32))};
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    const auto out = Philox4x32::generate(ctr, key);
    const std::uint64_t bits = ((static_cast<std::uint64_t>(out[0]) << 32) | out[1]) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
}

}  // namespace rammerge
