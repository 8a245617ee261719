// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rammerge/overlap.hpp"

namespace rammerge {

inline constexpr double kDefaultRescaleStrength = 0.1;
inline constexpr double kDefaultClipBound = 2.0;

/// How a model's overlap-unique ratio maps to its unique-region gain.
struct RescaleRule {
    enum class Kind { None, ClippedLinear, SoftSaturation };

    Kind kind = Kind::None;
    double r = 0.0;
    double alpha = 0.0;  // ClippedLinear only

    static RescaleRule none() { return {}; }
    static RescaleRule clipped(double r, double alpha) { return {Kind::ClippedLinear, r, alpha}; }
    static RescaleRule soft(double r) { return {Kind::SoftSaturation, r, 0.0}; }
};

std::string to_string(RescaleRule::Kind kind);

/// 1 + r * clamp(rho, 0, alpha). `rho` may be +inf (maps to 1 + r * alpha);
/// nullopt (model unchanged from base) maps to 1. Throws ConfigError for
/// negative or non-finite r or alpha.
double lambda_clipped(std::optional<double> rho, double r, double alpha);

/// 1 + r * rho / (1 + rho); +inf maps to 1 + r, nullopt to 1.
double lambda_soft(std::optional<double> rho, double r);

struct LambdaAssignment {
    struct Entry {
        double lambda = 1.0;
        std::optional<double> rho;
        bool clipped = false;  // rho exceeded alpha (ClippedLinear only)
    };
    std::vector<Entry> models;
    std::vector<std::string> warnings;
};

LambdaAssignment assign_lambdas(const GlobalOverlapStats& stats, const RescaleRule& rule);

}  // namespace rammerge
