// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "rammerge/error.hpp"
#include "rammerge/task_vector.hpp"

using namespace rammerge;

TEST_CASE("delta is model minus base") {
    CHECK(delta(std::vector<float>{1.0f, 2.0f}, std::vector<float>{1.0f, 2.5f}) == std::vector<float>{0.0f, 0.5f});
    const std::vector<float> b{0.3f, -7.0f, 1e-3f};
    for (float v : delta(b, b)) CHECK(v == 0.0f);
    CHECK_THROWS_AS(delta(std::vector<float>{1.0f}, std::vector<float>{1.0f, 2.0f}), LengthMismatch);
}

TEST_CASE("delta near the threshold is the exact f32 difference") {
    // 0.5 + 2e-5 rounds to 0.50002002716064453125 in f32; the subtraction is
    // exact (Sterbenz), leaving 2.002716064453125e-05, not the decimal 2e-5.
    const float model = 0.5f + 2e-5f;
    const auto tau = delta(std::vector<float>{0.5f}, std::vector<float>{model});
    CHECK(tau[0] == 2.002716064453125e-05f);
    CHECK(static_cast<double>(tau[0]) == static_cast<double>(model) - 0.5);
}

TEST_CASE("mask uses strict inequality") {
    CHECK(mask(std::vector<float>{0.0f, 2e-5f, -5e-6f, 1e-5f}, 1e-5f) == Mask{0, 1, 0, 0});
    CHECK(mask(std::vector<float>{-1e-5f}, 1e-5f) == Mask{0});
    CHECK(mask(std::vector<float>{-3.0f, 0.0f}, 0.0f) == Mask{1, 0});
    CHECK(mask(std::vector<float>{-0.0f}, 0.0f) == Mask{0});
}

TEST_CASE("mask guards") {
    CHECK_THROWS_AS(mask(std::vector<float>{0.0f, NAN}, 1e-5f), NonFiniteInput);
    CHECK_THROWS_AS(mask(std::vector<float>{INFINITY}, 1e-5f), NonFiniteInput);
    CHECK_THROWS_AS(mask(std::vector<float>{1.0f}, -1.0f), ConfigError);
    CHECK_THROWS_AS(require_finite(std::vector<float>{1.0f, -INFINITY}, "x"), NonFiniteInput);
}

TEST_CASE("threshold monotonicity and permutation locality") {
    std::mt19937 rng(3);
    std::normal_distribution<float> n(0.0f, 1e-4f);
    std::vector<float> base(2000), model(2000);
    for (std::size_t i = 0; i < base.size(); ++i) {
        base[i] = n(rng) * 100.0f;
        model[i] = base[i] + (i % 3 ? n(rng) : 0.0f);
    }
    const auto tau = delta(base, model);
    const auto loose = mask(tau, 1e-5f);
    const auto tight = mask(tau, 5e-5f);
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (tight[i]) CHECK(loose[i]);
    }

    std::vector<std::size_t> perm(base.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<float> pb(base.size()), pm(base.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        pb[i] = base[perm[i]];
        pm[i] = model[perm[i]];
    }
    const auto pmask = mask(delta(pb, pm), 1e-5f);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(pmask[i] == loose[perm[i]]);
}

TEST_CASE("sparsity counts set bits over all slices") {
    const Mask a{1, 0, 0, 1};
    const Mask b{0, 0, 0, 0};
    const std::vector<MaskSlice> slices{{0, "x", a}, {0, "y", b}};
    const auto s = sparsity(slices, 8);
    CHECK(s.nonzero_count == 2);
    CHECK(s.sparsity() == 0.75);
    CHECK(s.density() == 0.25);
    CHECK(s.sparsity() + s.density() == 1.0);

    const std::vector<MaskSlice> zeros{{0, "x", b}};
    CHECK(sparsity(zeros, 4).sparsity() == 1.0);

    CHECK_THROWS_AS(sparsity(slices, 9), CoverageMismatch);
    const std::vector<MaskSlice> mixed{{0, "x", a}, {1, "y", b}};
    CHECK_THROWS_AS(sparsity(mixed, 8), LengthMismatch);
}

TEST_CASE("sparsity reproduces constructed densities exactly") {
    // d = 1000 elements; 32, 462 and 543 of them active.
    for (std::uint64_t active : {32u, 462u, 543u}) {
        Mask m(1000, 0);
        for (std::uint64_t i = 0; i < active; ++i) m[(i * 7919) % 1000] = 1;
        const std::vector<MaskSlice> slices{{0, "w", m}};
        const auto s = sparsity(slices, 1000);
        CHECK(s.nonzero_count == active);
    }
    const Mask m32 = [] {
        Mask m(1000, 0);
        for (int i = 0; i < 32; ++i) m[i] = 1;
        return m;
    }();
    const std::vector<MaskSlice> slices{{0, "w", m32}};
    CHECK(sparsity(slices, 1000).density() == 0.032);
}
