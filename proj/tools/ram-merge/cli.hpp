// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rammerge/pipeline.hpp"

namespace rammerge::cli {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolName = "ram-merge";
inline constexpr const char* kToolVersion = "0.1.0";

// Stable process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitAlignment = 2;
inline constexpr int kExitFormat = 3;
inline constexpr int kExitConfig = 4;

enum class Command { Analyze, Merge, Dilution };

struct ModelEntry {
    std::string name;
    std::filesystem::path path;
};

/// Everything one invocation needs. Model order on the command line fixes
/// model indices.
struct RunSpec {
    Command command = Command::Merge;
    std::filesystem::path base;
    std::vector<ModelEntry> models;
    std::vector<ModelEntry> fisher;
    /// As typed: ram, ram+, ta, fisher, ties, dare-ta, dare-ties.
    std::string method_name = "ram+";
    MergeConfig config;
    std::optional<std::filesystem::path> out;
    std::optional<std::filesystem::path> report;
    bool print_report = false;
    bool per_tensor = false;
    RunOptions options;

    // dilution
    std::string target;
    double dilution_scale = 1.0;
    DilutionRegion region = DilutionRegion::UniqueOnly;
};

/// Parse argv (without the program name). Throws ConfigError on bad input.
/// Returns nullopt after printing help to `out`.
std::optional<RunSpec> parse_command_line(const std::vector<std::string>& args, std::ostream& out);

/// Map a method name onto MergeMethod fields. Throws ConfigError.
MethodKind parse_method(const std::string& name);

/// The reproducibility-relevant part of a spec as JSON, and back.
nlohmann::json config_echo(const RunSpec& spec);
RunSpec spec_from_echo(const nlohmann::json& echo);

/// Run one command; returns the JSON document that was written.
nlohmann::json cmd_analyze(const RunSpec& spec, std::ostream& err);
nlohmann::json cmd_merge(const RunSpec& spec, std::ostream& err);
nlohmann::json cmd_dilution(const RunSpec& spec, std::ostream& err);

/// Full CLI entry point: parse, run, map errors to exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// JSON encoding of an overlap-unique ratio: number, "inf", or null.
nlohmann::json rho_to_json(const std::optional<double>& rho);

}  // namespace rammerge::cli
