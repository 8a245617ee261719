// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "rammerge/rescale.hpp"
#include "rammerge/task_vector.hpp"

// Element-wise merge kernels. Every kernel works on aligned slices of one
// tensor (a whole tensor or any contiguous chunk of it) and is a pure
// function of its inputs. Scalar factors (lambda, scales, weights) are applied
// in double and rounded once to f32; sums over models run in model order.

namespace rammerge {

using FloatView = std::span<const float>;

/// One active model at an element: its index and task-vector value.
struct ActiveValue {
    std::size_t model_index = 0;
    float tau = 0.0f;
};

/// Selective merge of a single element: 0 with no active model, lambda_t *
/// tau with exactly one, plain mean of the active values with two or more.
float merge_element_ram(std::span<const ActiveValue> active, const LambdaAssignment& lambdas);

/// Merged task-vector slice from precomputed taus, masks and overlap counts.
void ram_merged_delta(std::span<const FloatView> taus, std::span<const MaskView> masks,
                      std::span<const std::uint8_t> counts, std::span<const double> lambdas,
                      std::span<float> out);

/// base + selective merge. Masks are recomputed from the deltas with
/// `epsilon`; `lambdas` must come from statistics over the whole parameter
/// space, not just this slice.
std::vector<float> merge_tensor_ram(FloatView base, std::span<const FloatView> models, float epsilon,
                                    const LambdaAssignment& lambdas);

/// scale * sum(tau) per element.
void ta_merged_delta(std::span<const FloatView> taus, double scale, std::span<float> out);

/// base + scale * sum(model - base).
std::vector<float> merge_ta(std::span<const FloatView> models, FloatView base, double scale);

/// sum(F * tau) / sum(F), 0 where the weights sum to 0. Throws NegativeWeight
/// (or NonFiniteInput) on a bad weight.
void fisher_merged_delta(std::span<const FloatView> taus, std::span<const FloatView> weights,
                         std::span<float> out);

std::vector<float> merge_fisher(std::span<const FloatView> models, FloatView base,
                                std::span<const FloatView> weights);

/// Keep the ceil(k * len) largest magnitudes, zero the rest. At the cutoff
/// magnitude, lower indices win. Throws ConfigError unless 0 < k <= 1.
std::vector<float> ties_trim(FloatView tau, double trim_ratio);

struct TiesDiagnostics {
    /// Elements where trimmed values of both signs were present.
    std::uint64_t sign_conflicts = 0;
};

/// Sign election by summed magnitude (ties elect +), then the mean of the
/// values agreeing with the elected sign, times `scale`.
void ties_merged_delta(std::span<const FloatView> trimmed, double scale, std::span<float> out,
                       TiesDiagnostics* diagnostics = nullptr);

std::vector<float> ties_elect_and_mean(std::span<const FloatView> trimmed, double scale,
                                       TiesDiagnostics* diagnostics = nullptr);

/// Drop-and-rescale in place. Element `first_index + i` is dropped iff its
/// keyed uniform draw is < p; survivors are multiplied by 1 / (1 - p).
/// Returns the number of dropped elements. Throws ConfigError unless 0 <= p < 1.
std::uint64_t dare_apply(std::span<float> tau, double drop_p, std::uint64_t seed, std::uint32_t model_index,
                         std::uint64_t name_hash, std::uint64_t first_index);

std::vector<float> dare_transform(FloatView tau, double drop_p, std::uint64_t seed, std::size_t model_index,
                                  std::string_view tensor_name);

/// out = base + scale * tau where keep[i], else base (add_delta semantics).
void scaled_region_apply(FloatView base, FloatView tau, std::span<const std::uint8_t> keep, double scale,
                         std::span<float> out);

/// out[i] = base[i] + delta[i] in f32; where delta[i] is zero, base[i] is
/// copied unchanged so signed zeros in the base survive.
void add_delta(FloatView base, FloatView delta, std::span<float> out);

}  // namespace rammerge
