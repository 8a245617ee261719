// SPDX-License-Identifier: Apache-2.0

#include "rammerge/rescale.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "rammerge/error.hpp"

namespace rammerge {

namespace {

void check_nonnegative(double value, const char* name) {
    if (!(value >= 0.0) || !std::isfinite(value)) {
        throw ConfigError(fmt::format("{} must be a finite value >= 0, got {}", name, value));
    }
}

}  // namespace

std::string to_string(RescaleRule::Kind kind) {
    switch (kind) {
        case RescaleRule::Kind::None: return "none";
        case RescaleRule::Kind::ClippedLinear: return "clip";
        case RescaleRule::Kind::SoftSaturation: return "soft";
    }
    return "?";
}

double lambda_clipped(std::optional<double> rho, double r, double alpha) {
    check_nonnegative(r, "r");
    check_nonnegative(alpha, "alpha");
    if (!rho) return 1.0;
    return 1.0 + r * std::clamp(*rho, 0.0, alpha);
}

double lambda_soft(std::optional<double> rho, double r) {
    check_nonnegative(r, "r");
    if (!rho) return 1.0;
    if (std::isinf(*rho)) return 1.0 + r;
    const double p = std::max(*rho, 0.0);
    return 1.0 + r * (p / (1.0 + p));
}

LambdaAssignment assign_lambdas(const GlobalOverlapStats& stats, const RescaleRule& rule) {
    LambdaAssignment out;
    out.models.reserve(stats.models.size());
    for (std::size_t t = 0; t < stats.models.size(); ++t) {
        LambdaAssignment::Entry entry;
        entry.rho = stats.models[t].rho();
        switch (rule.kind) {
            case RescaleRule::Kind::None:
                entry.lambda = 1.0;
                break;
            case RescaleRule::Kind::ClippedLinear:
                entry.lambda = lambda_clipped(entry.rho, rule.r, rule.alpha);
                entry.clipped = entry.rho.has_value() && *entry.rho > rule.alpha;
                break;
            case RescaleRule::Kind::SoftSaturation:
                entry.lambda = lambda_soft(entry.rho, rule.r);
                break;
        }
        if (!entry.rho) {
            out.warnings.push_back(
                fmt::format("model {} has no active elements; its rescale factor defaults to 1", t));
        }
        out.models.push_back(entry);
    }
    return out;
}

}  // namespace rammerge
