// SPDX-License-Identifier: Apache-2.0

#include "rammerge/merge_kernels.hpp"

#include <cmath>

#include <fmt/core.h>

#include "rammerge/error.hpp"
#include "rammerge/hash.hpp"
#include "rammerge/overlap.hpp"
#include "rammerge/philox.hpp"
#include "rammerge/trim_plan.hpp"

namespace rammerge {

namespace {

void check_lengths(std::span<const FloatView> slices, std::size_t length, const char* what) {
    for (const auto& s : slices) {
        if (s.size() != length) {
            throw LengthMismatch(fmt::format("{}: slice of {} elements, expected {}", what, s.size(), length));
        }
    }
}

std::vector<std::vector<float>> taus_of(std::span<const FloatView> models, FloatView base) {
    std::vector<std::vector<float>> taus;
    taus.reserve(models.size());
    for (const auto& m : models) taus.push_back(delta(base, m));
    return taus;
}

std::vector<FloatView> views_of(const std::vector<std::vector<float>>& buffers) {
    return {buffers.begin(), buffers.end()};
}

}  // namespace

float merge_element_ram(std::span<const ActiveValue> active, const LambdaAssignment& lambdas) {
    if (active.empty()) return 0.0f;
    if (active.size() == 1) {
        const double lambda = lambdas.models.at(active.front().model_index).lambda;
        return static_cast<float>(lambda * static_cast<double>(active.front().tau));
    }
    double sum = 0.0;
    for (const auto& a : active) sum += static_cast<double>(a.tau);
    return static_cast<float>(sum / static_cast<double>(active.size()));
}

void ram_merged_delta(std::span<const FloatView> taus, std::span<const MaskView> masks,
                      std::span<const std::uint8_t> counts, std::span<const double> lambdas,
                      std::span<float> out) {
    const std::size_t n = taus.size();
    const std::size_t len = out.size();
    if (masks.size() != n || lambdas.size() != n || counts.size() != len) {
        throw LengthMismatch("ram_merged_delta: inconsistent model count or slice length");
    }
    check_lengths(taus, len, "ram_merged_delta");
    for (const auto& m : masks) {
        if (m.size() != len) throw LengthMismatch("ram_merged_delta: mask length differs");
    }

    for (std::size_t i = 0; i < len; ++i) {
        const std::uint8_t c = counts[i];
        if (c == 0) {
            out[i] = 0.0f;
        } else if (c == 1) {
            std::size_t t = 0;
            while (!masks[t][i]) ++t;
            out[i] = static_cast<float>(lambdas[t] * static_cast<double>(taus[t][i]));
        } else {
            double sum = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                if (masks[t][i]) sum += static_cast<double>(taus[t][i]);
            }
            out[i] = static_cast<float>(sum / static_cast<double>(c));
        }
    }
}

std::vector<float> merge_tensor_ram(FloatView base, std::span<const FloatView> models, float epsilon,
                                    const LambdaAssignment& lambdas) {
    check_lengths(models, base.size(), "merge_tensor_ram");
    if (lambdas.models.size() != models.size()) {
        throw LengthMismatch(fmt::format("merge_tensor_ram: {} lambdas for {} models", lambdas.models.size(),
                                         models.size()));
    }
    const auto taus = taus_of(models, base);
    std::vector<Mask> masks;
    std::vector<MaskView> mask_views;
    for (const auto& tau : taus) masks.push_back(mask(tau, epsilon));
    for (const auto& m : masks) mask_views.emplace_back(m);
    const auto counts = overlap_counts(mask_views);

    std::vector<double> factors;
    for (const auto& e : lambdas.models) factors.push_back(e.lambda);

    std::vector<float> merged(base.size());
    const auto tau_views = views_of(taus);
    ram_merged_delta(tau_views, mask_views, counts, factors, merged);
    add_delta(base, merged, merged);
    return merged;
}

void ta_merged_delta(std::span<const FloatView> taus, double scale, std::span<float> out) {
    check_lengths(taus, out.size(), "ta_merged_delta");
    for (std::size_t i = 0; i < out.size(); ++i) {
        double sum = 0.0;
        for (const auto& tau : taus) sum += static_cast<double>(tau[i]);
        out[i] = static_cast<float>(scale * sum);
    }
}

std::vector<float> merge_ta(std::span<const FloatView> models, FloatView base, double scale) {
    check_lengths(models, base.size(), "merge_ta");
    const auto taus = taus_of(models, base);
    std::vector<float> out(base.size());
    ta_merged_delta(views_of(taus), scale, out);
    add_delta(base, out, out);
    return out;
}

void fisher_merged_delta(std::span<const FloatView> taus, std::span<const FloatView> weights,
                         std::span<float> out) {
    if (weights.size() != taus.size()) {
        throw LengthMismatch(fmt::format("fisher: {} weight slices for {} models", weights.size(), taus.size()));
    }
    check_lengths(taus, out.size(), "fisher");
    check_lengths(weights, out.size(), "fisher weights");
    for (std::size_t t = 0; t < weights.size(); ++t) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const float w = weights[t][i];
            if (!std::isfinite(w)) {
                throw NonFiniteInput(fmt::format("fisher weight of model {} is {} at element {}", t, w, i));
            }
            if (w < 0.0f) {
                throw NegativeWeight(fmt::format("fisher weight of model {} is {} at element {}", t, w, i));
            }
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t t = 0; t < taus.size(); ++t) {
            const double w = static_cast<double>(weights[t][i]);
            num += w * static_cast<double>(taus[t][i]);
            den += w;
        }
        out[i] = den > 0.0 ? static_cast<float>(num / den) : 0.0f;
    }
}

std::vector<float> merge_fisher(std::span<const FloatView> models, FloatView base,
                                std::span<const FloatView> weights) {
    check_lengths(models, base.size(), "merge_fisher");
    const auto taus = taus_of(models, base);
    std::vector<float> out(base.size());
    fisher_merged_delta(views_of(taus), weights, out);
    add_delta(base, out, out);
    return out;
}

std::vector<float> ties_trim(FloatView tau, double trim_ratio) {
    const std::uint64_t keep = trim_keep_count(trim_ratio, tau.size());
    std::vector<float> out(tau.begin(), tau.end());
    if (keep >= tau.size()) return out;

    MagnitudeHistogram high;
    high.add_high(tau);
    const HighSelection sel = select_high(high, keep);
    MagnitudeHistogram low;
    low.add_low(tau, sel.bin);
    apply_trim(out, select_low(low, sel, keep), 0);
    return out;
}

void ties_merged_delta(std::span<const FloatView> trimmed, double scale, std::span<float> out,
                       TiesDiagnostics* diagnostics) {
    check_lengths(trimmed, out.size(), "ties");
    std::uint64_t conflicts = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double positive = 0.0;
        double negative = 0.0;
        for (const auto& tau : trimmed) {
            const double v = static_cast<double>(tau[i]);
            if (v > 0.0) positive += v;
            else if (v < 0.0) negative -= v;
        }
        if (positive == 0.0 && negative == 0.0) {
            out[i] = 0.0f;
            continue;
        }
        if (positive > 0.0 && negative > 0.0) ++conflicts;
        const bool elect_positive = positive >= negative;

        double sum = 0.0;
        std::size_t matching = 0;
        for (const auto& tau : trimmed) {
            const double v = static_cast<double>(tau[i]);
            if (elect_positive ? v > 0.0 : v < 0.0) {
                sum += v;
                ++matching;
            }
        }
        out[i] = static_cast<float>(scale * (sum / static_cast<double>(matching)));
    }
    if (diagnostics != nullptr) diagnostics->sign_conflicts += conflicts;
}

std::vector<float> ties_elect_and_mean(std::span<const FloatView> trimmed, double scale,
                                       TiesDiagnostics* diagnostics) {
    std::vector<float> out(trimmed.empty() ? 0 : trimmed.front().size());
    ties_merged_delta(trimmed, scale, out, diagnostics);
    return out;
}

std::uint64_t dare_apply(std::span<float> tau, double drop_p, std::uint64_t seed, std::uint32_t model_index,
                         std::uint64_t name_hash, std::uint64_t first_index) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) {
        throw ConfigError(fmt::format("DARE drop rate must be in [0, 1), got {}", drop_p));
    }
    if (drop_p == 0.0) return 0;
    const double keep_scale = 1.0 / (1.0 - drop_p);
    std::uint64_t dropped = 0;
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (keyed_uniform(seed, model_index, name_hash, first_index + i) < drop_p) {
            tau[i] = 0.0f;
            ++dropped;
        } else {
            tau[i] = static_cast<float>(static_cast<double>(tau[i]) * keep_scale);
        }
    }
    return dropped;
}

std::vector<float> dare_transform(FloatView tau, double drop_p, std::uint64_t seed, std::size_t model_index,
                                  std::string_view tensor_name) {
    std::vector<float> out(tau.begin(), tau.end());
    dare_apply(out, drop_p, seed, static_cast<std::uint32_t>(model_index), fnv1a64(tensor_name), 0);
    return out;
}

void scaled_region_apply(FloatView base, FloatView tau, std::span<const std::uint8_t> keep, double scale,
                         std::span<float> out) {
    if (tau.size() != base.size() || keep.size() != base.size() || out.size() != base.size()) {
        throw LengthMismatch("scaled_region_apply: slice lengths differ");
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
        const float d = keep[i] ? static_cast<float>(scale * static_cast<double>(tau[i])) : 0.0f;
        out[i] = d == 0.0f ? base[i] : base[i] + d;
    }
}

void add_delta(FloatView base, FloatView delta, std::span<float> out) {
    if (delta.size() != base.size() || out.size() != base.size()) {
        throw LengthMismatch("add_delta: slice lengths differ");
    }
    for (std::size_t i = 0; i < base.size(); ++i) out[i] = delta[i] == 0.0f ? base[i] : base[i] + delta[i];
}

}  // namespace rammerge
