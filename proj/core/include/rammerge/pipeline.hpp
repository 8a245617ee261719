// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rammerge/dtype.hpp"
#include "rammerge/merge_kernels.hpp"
#include "rammerge/overlap.hpp"
#include "rammerge/rescale.hpp"
#include "rammerge/tensor_store.hpp"

namespace rammerge {

enum class MethodKind { Ram, TaskArithmetic, Fisher, Ties, DareTa, DareTies };
enum class TiesScope { Tensor, Global };

std::string to_string(MethodKind kind);
std::string to_string(TiesScope scope);

inline constexpr double kDefaultMergeScale = 0.5;
inline constexpr double kDefaultTiesTrim = 0.2;
inline constexpr double kDefaultDropRate = 0.5;

/// Method plus its hyperparameters. Fields a method does not use are ignored.
struct MergeMethod {
    MethodKind kind = MethodKind::Ram;
    RescaleRule rescale = RescaleRule::clipped(kDefaultRescaleStrength, kDefaultClipBound);
    double scale = kDefaultMergeScale;  // TA / TIES / DARE inner scaling term
    double ties_trim = kDefaultTiesTrim;
    TiesScope ties_scope = TiesScope::Tensor;
    double drop_p = kDefaultDropRate;
    std::uint64_t seed = 0;
};

struct MergeConfig {
    float epsilon = kDefaultEpsilon;
    MergeMethod method;
    /// nullopt: every output tensor keeps the base tensor's dtype.
    std::optional<DType> output_dtype;
};

/// Throws ConfigError for out-of-range hyperparameters.
void validate(const MergeConfig& config, std::size_t model_count);

/// Execution knobs that never change the output bytes.
struct RunOptions {
    std::size_t workers = 1;
    /// Elements per work unit; rounded up to a multiple of 8.
    std::uint64_t chunk_elements = 1u << 20;
    /// When set, probing writes a 1-bit-per-element mask file here and the
    /// merge pass reads it back instead of recomputing masks.
    std::optional<std::filesystem::path> mask_cache_dir;
};

/// Overlap split of one tensor, kept for diagnostics.
struct TensorOverlap {
    std::string name;
    std::uint64_t numel = 0;
    std::vector<ModelOverlap> models;
};

/// Probing result: global statistics plus per-tensor rows.
struct Analysis {
    GlobalOverlapStats stats;
    std::vector<TensorOverlap> tensors;
};

struct MergeResult {
    Analysis analysis;
    /// Set for Ram; empty otherwise.
    std::optional<LambdaAssignment> lambdas;
    std::optional<std::uint64_t> ties_sign_conflicts;
    /// Per model, elements dropped by DARE in the merge pass.
    std::optional<std::vector<std::uint64_t>> dare_dropped;
    std::filesystem::path output;
    std::uint64_t checksum = 0;
    std::uint64_t output_bytes = 0;
    std::vector<std::string> warnings;
};

struct MergeInputs {
    Checkpoint base;
    std::vector<Checkpoint> models;
    /// Fisher weights, one per model in model order, or empty for uniform.
    std::vector<Checkpoint> fisher;
};

/// Stage 1 only: masks, overlap counts and statistics over all tensors.
Analysis analyze(const Checkpoint& base, std::span<const Checkpoint> models, float epsilon,
                 const RunOptions& options = {});

/// Merge all models into `out`. Ram runs a probing pass then a merge pass;
/// the baselines run a single pass (plus magnitude pre-passes for TIES).
/// Output bytes depend only on inputs and config, never on RunOptions.
MergeResult run_merge(const MergeInputs& inputs, const MergeConfig& config, const std::filesystem::path& out,
                      const RunOptions& options = {});

enum class DilutionRegion { UniqueOnly, Full };

std::string to_string(DilutionRegion region);

struct DilutionResult {
    std::filesystem::path output;
    std::uint64_t checksum = 0;
    std::uint64_t output_bytes = 0;
    /// Elements of the target that were edited (region positions).
    std::uint64_t edited = 0;
    Analysis analysis;
};

/// out = base + scale * (tau_target restricted to the region): the target's
/// active elements (Full) or only those no other model touches (UniqueOnly).
/// `models` is the whole mask-source set; `target` indexes into it.
DilutionResult run_dilution(const Checkpoint& base, std::span<const Checkpoint> models, std::size_t target,
                            double scale, DilutionRegion region, float epsilon,
                            std::optional<DType> output_dtype, const std::filesystem::path& out,
                            const RunOptions& options = {});

/// Peak resident set size of this process so far, in bytes.
std::uint64_t peak_rss_bytes();

}  // namespace rammerge
