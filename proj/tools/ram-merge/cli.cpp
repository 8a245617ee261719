// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "rammerge/error.hpp"

namespace rammerge::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

ModelEntry parse_entry(const std::string& text, const char* flag) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == text.size()) {
        throw ConfigError(fmt::format("{} expects name=path, got '{}'", flag, text));
    }
    return {text.substr(0, eq), fs::path(text.substr(eq + 1))};
}

std::optional<DType> parse_output_dtype(const std::string& text) {
    if (text == "inherit") return std::nullopt;
    if (auto d = parse_dtype(text)) return d;
    throw ConfigError(fmt::format("--output-dtype must be inherit, F32, F16 or BF16, got '{}'", text));
}

RescaleRule::Kind parse_rescale(const std::string& text) {
    if (text == "clip") return RescaleRule::Kind::ClippedLinear;
    if (text == "soft") return RescaleRule::Kind::SoftSaturation;
    if (text == "none") return RescaleRule::Kind::None;
    throw ConfigError(fmt::format("--rescale must be clip, soft or none, got '{}'", text));
}

TiesScope parse_scope(const std::string& text) {
    if (text == "tensor") return TiesScope::Tensor;
    if (text == "global") return TiesScope::Global;
    throw ConfigError(fmt::format("--ties-scope must be tensor or global, got '{}'", text));
}

DilutionRegion parse_region(const std::string& text) {
    if (text == "unique") return DilutionRegion::UniqueOnly;
    if (text == "full") return DilutionRegion::Full;
    throw ConfigError(fmt::format("--region must be unique or full, got '{}'", text));
}

std::size_t default_workers() {
    if (const char* env = std::getenv("RAM_MERGE_WORKERS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ConfigError(fmt::format("RAM_MERGE_WORKERS must be a positive integer, got '{}'", env));
        return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Raw flag values before semantic checks.
struct RawFlags {
    std::string base;
    std::vector<std::string> models;
    std::vector<std::string> fisher;
    std::string method = "ram+";
    double epsilon = kDefaultEpsilon;
    double r = kDefaultRescaleStrength;
    double alpha = kDefaultClipBound;
    std::string rescale = "clip";
    double scale = kDefaultMergeScale;
    double ties_trim = kDefaultTiesTrim;
    std::string ties_scope = "tensor";
    double p = kDefaultDropRate;
    std::uint64_t seed = 0;
    std::string out;
    std::string report;
    std::string replay;
    std::string output_dtype = "inherit";
    std::size_t workers = 0;
    std::uint64_t chunk = 1u << 20;
    std::string mask_cache;
    bool print_report = false;
    bool per_tensor = false;
    std::string target;
    double dilution_scale = 1.0;
    std::string region = "unique";
};

void add_common(CLI::App* sub, RawFlags& f) {
    sub->add_option("--base", f.base, "Base checkpoint (.safetensors)");
    sub->add_option("--model", f.models, "Fine-tuned model as name=path; repeat, order fixes model index")
        ->allow_extra_args(false);
    sub->add_option("--epsilon", f.epsilon, "Activity threshold: |tau| > epsilon is active");
    sub->add_option("--report", f.report, "Where to write the JSON report");
    sub->add_flag("--print-report", f.print_report, "Also print the report to stdout");
    sub->add_flag("--per-tensor", f.per_tensor, "Include per-tensor overlap rows in the report");
    sub->add_option("--workers", f.workers, "Worker threads (fallback: RAM_MERGE_WORKERS)");
    sub->add_option("--chunk-elements", f.chunk, "Elements per streaming work unit");
}

void add_rescale(CLI::App* sub, RawFlags& f) {
    sub->add_option("--r", f.r, "Rescale strength r");
    sub->add_option("--alpha", f.alpha, "Clip bound alpha");
    sub->add_option("--rescale", f.rescale, "Rescale rule: clip, soft or none");
}

void add_output(CLI::App* sub, RawFlags& f) {
    sub->add_option("--out", f.out, "Output checkpoint path");
    sub->add_option("--output-dtype", f.output_dtype, "inherit (base dtype per tensor), F32, F16 or BF16");
}

}  // namespace

MethodKind parse_method(const std::string& name) {
    if (name == "ram" || name == "ram+") return MethodKind::Ram;
    if (name == "ta") return MethodKind::TaskArithmetic;
    if (name == "fisher") return MethodKind::Fisher;
    if (name == "ties") return MethodKind::Ties;
    if (name == "dare-ta") return MethodKind::DareTa;
    if (name == "dare-ties") return MethodKind::DareTies;
    throw ConfigError(fmt::format("unknown --method '{}' (ram, ram+, ta, fisher, ties, dare-ta, dare-ties)", name));
}

json config_echo(const RunSpec& spec) {
    json models = json::array();
    for (std::size_t i = 0; i < spec.models.size(); ++i) {
        models.push_back({{"index", i}, {"name", spec.models[i].name}, {"path", spec.models[i].path.string()}});
    }
    json echo = {
        {"base", spec.base.string()},
        {"models", models},
        {"epsilon", std::stod(fmt::format("{}", spec.config.epsilon))},
        {"output_dtype", spec.config.output_dtype ? std::string(to_string(*spec.config.output_dtype)) : "inherit"},
    };
    const MergeMethod& m = spec.config.method;
    switch (spec.command) {
        case Command::Analyze:
            echo["command"] = "analyze";
            echo["rescale"] = to_string(m.rescale.kind);
            echo["r"] = m.rescale.r;
            echo["alpha"] = m.rescale.alpha;
            echo.erase("output_dtype");
            break;
        case Command::Merge: {
            echo["command"] = "merge";
            echo["method"] = spec.method_name;
            echo["rescale"] = to_string(m.rescale.kind);
            echo["r"] = m.rescale.r;
            echo["alpha"] = m.rescale.alpha;
            echo["scale"] = m.scale;
            echo["ties_trim"] = m.ties_trim;
            echo["ties_scope"] = to_string(m.ties_scope);
            echo["p"] = m.drop_p;
            echo["seed"] = m.seed;
            json fisher = json::array();
            for (const auto& f : spec.fisher) fisher.push_back({{"name", f.name}, {"path", f.path.string()}});
            echo["fisher"] = fisher;
            break;
        }
        case Command::Dilution:
            echo["command"] = "dilution";
            echo["target"] = spec.target;
            echo["scale"] = spec.dilution_scale;
            echo["region"] = to_string(spec.region);
            break;
    }
    if (spec.out) echo["out"] = spec.out->string();
    return echo;
}

RunSpec spec_from_echo(const json& echo) {
    try {
        RunSpec spec;
        const std::string command = echo.at("command").get<std::string>();
        if (command == "analyze") spec.command = Command::Analyze;
        else if (command == "merge") spec.command = Command::Merge;
        else if (command == "dilution") spec.command = Command::Dilution;
        else throw ConfigError(fmt::format("unknown command '{}' in report", command));

        spec.base = echo.at("base").get<std::string>();
        for (const auto& m : echo.at("models")) {
            spec.models.push_back({m.at("name").get<std::string>(), m.at("path").get<std::string>()});
        }
        spec.config.epsilon = static_cast<float>(echo.at("epsilon").get<double>());
        if (echo.contains("output_dtype")) {
            spec.config.output_dtype = parse_output_dtype(echo.at("output_dtype").get<std::string>());
        }
        if (echo.contains("out")) spec.out = fs::path(echo.at("out").get<std::string>());

        MergeMethod& m = spec.config.method;
        if (echo.contains("rescale")) {
            m.rescale.kind = parse_rescale(echo.at("rescale").get<std::string>());
            m.rescale.r = echo.at("r").get<double>();
            m.rescale.alpha = echo.at("alpha").get<double>();
        }
        if (spec.command == Command::Merge) {
            spec.method_name = echo.at("method").get<std::string>();
            m.kind = parse_method(spec.method_name);
            m.scale = echo.at("scale").get<double>();
            m.ties_trim = echo.at("ties_trim").get<double>();
            m.ties_scope = parse_scope(echo.at("ties_scope").get<std::string>());
            m.drop_p = echo.at("p").get<double>();
            m.seed = echo.at("seed").get<std::uint64_t>();
            for (const auto& f : echo.at("fisher")) {
                spec.fisher.push_back({f.at("name").get<std::string>(), f.at("path").get<std::string>()});
            }
        }
        if (spec.command == Command::Dilution) {
            spec.target = echo.at("target").get<std::string>();
            spec.dilution_scale = echo.at("scale").get<double>();
            spec.region = parse_region(echo.at("region").get<std::string>());
        }
        return spec;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("report config is incomplete: {}", e.what()));
    }
}

std::optional<RunSpec> parse_command_line(const std::vector<std::string>& args, std::ostream& out) {
    CLI::App app{"Merge fine-tuned checkpoints with distribution-aware selective merging and baselines",
                 kToolName};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    RawFlags f;
    auto* analyze = app.add_subcommand("analyze", "Probe task vectors and report sparsity/overlap statistics");
    add_common(analyze, f);
    add_rescale(analyze, f);

    auto* merge = app.add_subcommand("merge", "Merge models into one checkpoint");
    add_common(merge, f);
    add_rescale(merge, f);
    add_output(merge, f);
    merge->add_option("--method", f.method, "ram, ram+, ta, fisher, ties, dare-ta or dare-ties");
    merge->add_option("--ta-scale,--scale", f.scale, "Scaling term for ta, ties and dare-*");
    merge->add_option("--ties-trim,--trim", f.ties_trim, "TIES fraction of magnitudes kept, in (0, 1]");
    merge->add_option("--ties-scope", f.ties_scope, "TIES trimming scope: tensor or global");
    merge->add_option("--p", f.p, "DARE drop rate in [0, 1)");
    merge->add_option("--seed", f.seed, "DARE seed");
    merge->add_option("--fisher", f.fisher, "Fisher weights as name=path, one per model")->allow_extra_args(false);
    merge->add_option("--mask-cache", f.mask_cache, "Directory for a 1-bit-per-element mask cache (ram/ram+)");
    merge->add_option("--replay", f.replay, "Re-run the configuration echoed in a merge report");

    auto* dilution = app.add_subcommand("dilution", "Apply one model's (unique) task vector to the base, scaled");
    add_common(dilution, f);
    add_output(dilution, f);
    dilution->add_option("--target", f.target, "Name of the model whose task vector is applied");
    dilution->add_option("--scale", f.dilution_scale, "Scale applied to the kept task-vector elements");
    dilution->add_option("--region", f.region, "unique (only elements no other model touches) or full");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return std::nullopt;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return std::nullopt;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return std::nullopt;
    } catch (const CLI::ParseError& e) {
        throw ConfigError(e.what());
    }

    RunSpec spec;
    CLI::App* sub = nullptr;
    if (analyze->parsed()) {
        spec.command = Command::Analyze;
        sub = analyze;
    } else if (merge->parsed()) {
        spec.command = Command::Merge;
        sub = merge;
    } else {
        spec.command = Command::Dilution;
        sub = dilution;
    }

    if (spec.command == Command::Merge && !f.replay.empty()) {
        std::ifstream in(f.replay);
        if (!in) throw IoError(fmt::format("cannot open report '{}'", f.replay));
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(fmt::format("report '{}' is not valid JSON: {}", f.replay, e.what()));
        }
        if (!doc.contains("config")) throw ConfigError(fmt::format("report '{}' has no config echo", f.replay));
        spec = spec_from_echo(doc.at("config"));
        if (spec.command != Command::Merge) throw ConfigError("--replay needs a merge report");
    } else {
        if (f.base.empty()) throw ConfigError("--base is required");
        if (f.models.empty()) throw ConfigError("at least one --model name=path is required");
        spec.base = f.base;
        for (const auto& m : f.models) spec.models.push_back(parse_entry(m, "--model"));
        for (const auto& m : f.fisher) spec.fisher.push_back(parse_entry(m, "--fisher"));
        spec.config.epsilon = static_cast<float>(f.epsilon);
        if (!(f.epsilon >= 0.0) || !std::isfinite(f.epsilon)) {
            throw ConfigError(fmt::format("--epsilon must be >= 0, got {}", f.epsilon));
        }
        spec.config.output_dtype = parse_output_dtype(f.output_dtype);
        if (!f.out.empty()) spec.out = fs::path(f.out);

        MergeMethod& m = spec.config.method;
        m.rescale.kind = parse_rescale(f.rescale);
        m.rescale.r = f.r;
        m.rescale.alpha = f.alpha;
        if (spec.command == Command::Merge) {
            spec.method_name = f.method;
            m.kind = parse_method(f.method);
            if (f.method == "ram") {
                if (sub->count("--r") > 0 && f.r != 0.0) {
                    throw ConfigError(fmt::format("--method ram pins r = 0; use ram+ for --r {}", f.r));
                }
                m.rescale.r = 0.0;
            }
            m.scale = f.scale;
            m.ties_trim = f.ties_trim;
            m.ties_scope = parse_scope(f.ties_scope);
            m.drop_p = f.p;
            m.seed = f.seed;
        }
        if (spec.command == Command::Dilution) {
            if (f.target.empty()) throw ConfigError("--target is required");
            spec.target = f.target;
            spec.dilution_scale = f.dilution_scale;
            spec.region = parse_region(f.region);
        }
    }

    // Execution-only settings may override a replayed config.
    if (!f.out.empty()) spec.out = fs::path(f.out);
    if (!f.report.empty()) spec.report = fs::path(f.report);
    spec.print_report = f.print_report;
    spec.per_tensor = f.per_tensor;
    spec.options.workers = f.workers > 0 ? f.workers : default_workers();
    spec.options.chunk_elements = f.chunk;
    if (f.chunk == 0) throw ConfigError("--chunk-elements must be positive");
    if (!f.mask_cache.empty()) spec.options.mask_cache_dir = fs::path(f.mask_cache);

    std::set<std::string> names;
    for (const auto& m : spec.models) {
        if (!names.insert(m.name).second) throw ConfigError(fmt::format("duplicate model name '{}'", m.name));
    }
    for (const auto& fw : spec.fisher) {
        if (!names.contains(fw.name)) {
            throw ConfigError(fmt::format("--fisher names unknown model '{}'", fw.name));
        }
    }
    if (spec.command != Command::Analyze && !spec.out) throw ConfigError("--out is required");
    if (spec.command == Command::Analyze && !spec.report && !spec.print_report) {
        throw ConfigError("analyze needs --report or --print-report");
    }
    if (spec.command == Command::Merge) validate(spec.config, spec.models.size());
    return spec;
}

// ---------------------------------------------------------------------------

json rho_to_json(const std::optional<double>& rho) {
    if (!rho) return nullptr;
    if (std::isinf(*rho)) return "inf";
    return *rho;
}

namespace {

struct Loaded {
    Checkpoint base;
    std::vector<Checkpoint> models;
};

Loaded load(const RunSpec& spec) {
    Loaded l{Checkpoint::open(spec.base), {}};
    for (const auto& m : spec.models) l.models.push_back(Checkpoint::open(m.path));
    return l;
}

json model_rows(const RunSpec& spec, const GlobalOverlapStats& stats, const LambdaAssignment* lambdas) {
    const auto fractions = overlap_histogram(stats);
    json rows = json::array();
    for (std::size_t t = 0; t < stats.models.size(); ++t) {
        const ModelOverlap& m = stats.models[t];
        const SparsityStats s = stats.sparsity(t);
        json row = {
            {"index", t},
            {"name", spec.models[t].name},
            {"nonzero", m.nonzero},
            {"total", stats.total},
            {"density", s.density()},
            {"sparsity", s.sparsity()},
            {"shared_count", m.shared},
            {"unique_count", m.unique},
            {"rho", rho_to_json(m.rho())},
            {"histogram", {{"counts", m.histogram},
                           {"fractions", fractions[t] ? json(*fractions[t]) : json(nullptr)}}},
        };
        if (lambdas) {
            row["lambda"] = lambdas->models[t].lambda;
            row["clipped"] = lambdas->models[t].clipped;
        } else {
            row["lambda"] = nullptr;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

json tensor_rows(const Analysis& analysis) {
    json rows = json::array();
    for (const auto& t : analysis.tensors) {
        json models = json::array();
        for (const auto& m : t.models) {
            models.push_back({{"nonzero", m.nonzero}, {"shared", m.shared}, {"unique", m.unique},
                              {"rho", rho_to_json(m.rho())}});
        }
        rows.push_back({{"name", t.name}, {"numel", t.numel}, {"models", std::move(models)}});
    }
    return rows;
}

json document(const RunSpec& spec, const char* command) {
    json execution = {{"workers", spec.options.workers}, {"chunk_elements", spec.options.chunk_elements}};
    if (spec.options.mask_cache_dir) execution["mask_cache"] = spec.options.mask_cache_dir->string();
    return {{"schema", kSchemaVersion},
            {"tool", kToolName},
            {"version", kToolVersion},
            {"command", command},
            {"config", config_echo(spec)},
            {"execution", execution}};
}

void fill_analysis(json& doc, const RunSpec& spec, const Analysis& analysis, const LambdaAssignment* lambdas) {
    doc["parameters"] = analysis.stats.total;
    doc["model_count"] = analysis.stats.model_count;
    doc["overlap_positions"] = analysis.stats.positions;
    doc["models"] = model_rows(spec, analysis.stats, lambdas);
    if (spec.per_tensor) doc["tensors"] = tensor_rows(analysis);
}

void finish_document(json& doc, const RunSpec& spec, std::chrono::steady_clock::time_point start,
                     const std::vector<std::string>& warnings, std::ostream& err) {
    doc["warnings"] = warnings;
    doc["timing"] = {
        {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
        {"peak_rss_bytes", peak_rss_bytes()}};
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    if (spec.report) {
        std::ofstream f(*spec.report, std::ios::trunc);
        f << doc.dump(2) << '\n';
        if (!f) throw IoError(fmt::format("cannot write report '{}'", spec.report->string()));
    }
}

fs::path default_report_path(const fs::path& out) {
    fs::path p = out;
    p += ".report.json";
    return p;
}

}  // namespace

json cmd_analyze(const RunSpec& spec, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    const Loaded in = load(spec);
    const Analysis analysis = analyze(in.base, in.models, spec.config.epsilon, spec.options);
    const LambdaAssignment lambdas = assign_lambdas(analysis.stats, spec.config.method.rescale);

    json doc = document(spec, "analyze");
    fill_analysis(doc, spec, analysis, &lambdas);
    finish_document(doc, spec, start, lambdas.warnings, err);
    return doc;
}

json cmd_merge(const RunSpec& spec, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    validate(spec.config, spec.models.size());
    const Loaded in = load(spec);
    MergeInputs inputs{in.base, in.models, {}};
    if (!spec.fisher.empty()) {
        if (spec.config.method.kind != MethodKind::Fisher) {
            throw ConfigError("--fisher only applies to --method fisher");
        }
        for (const auto& m : spec.models) {
            auto it = std::find_if(spec.fisher.begin(), spec.fisher.end(),
                                   [&](const ModelEntry& f) { return f.name == m.name; });
            if (it == spec.fisher.end()) {
                throw ConfigError(fmt::format("no --fisher weights for model '{}'; give all or none", m.name));
            }
            inputs.fisher.push_back(Checkpoint::open(it->path));
        }
    }

    const MergeResult result = run_merge(inputs, spec.config, *spec.out, spec.options);

    RunSpec with_report = spec;
    if (!with_report.report) with_report.report = default_report_path(*spec.out);
    json doc = document(with_report, "merge");
    fill_analysis(doc, with_report, result.analysis, result.lambdas ? &*result.lambdas : nullptr);
    doc["output"] = {{"path", spec.out->string()},
                     {"checksum", "fnv1a64:" + to_hex(result.checksum)},
                     {"bytes", result.output_bytes}};
    json diagnostics = json::object();
    if (result.ties_sign_conflicts) diagnostics["ties_sign_conflicts"] = *result.ties_sign_conflicts;
    if (result.dare_dropped) {
        json fractions = json::array();
        for (auto dropped : *result.dare_dropped) {
            fractions.push_back(result.analysis.stats.total == 0
                                    ? 0.0
                                    : static_cast<double>(dropped) / static_cast<double>(result.analysis.stats.total));
        }
        diagnostics["dare_dropped"] = *result.dare_dropped;
        diagnostics["dare_drop_fraction"] = fractions;
    }
    doc["diagnostics"] = diagnostics;
    finish_document(doc, with_report, start, result.warnings, err);
    return doc;
}

json cmd_dilution(const RunSpec& spec, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    auto it = std::find_if(spec.models.begin(), spec.models.end(),
                           [&](const ModelEntry& m) { return m.name == spec.target; });
    if (it == spec.models.end()) {
        throw ConfigError(fmt::format("--target '{}' is not one of the --model names", spec.target));
    }
    const auto target = static_cast<std::size_t>(it - spec.models.begin());
    const Loaded in = load(spec);
    const DilutionResult result = run_dilution(in.base, in.models, target, spec.dilution_scale, spec.region,
                                               spec.config.epsilon, spec.config.output_dtype, *spec.out,
                                               spec.options);

    RunSpec with_report = spec;
    if (!with_report.report) with_report.report = default_report_path(*spec.out);
    json doc = document(with_report, "dilution");
    fill_analysis(doc, with_report, result.analysis, nullptr);
    doc["output"] = {{"path", spec.out->string()},
                     {"checksum", "fnv1a64:" + to_hex(result.checksum)},
                     {"bytes", result.output_bytes}};
    doc["edited_elements"] = result.edited;
    finish_document(doc, with_report, start, {}, err);
    return doc;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        const auto spec = parse_command_line(args, out);
        if (!spec) return kExitOk;
        json doc;
        switch (spec->command) {
            case Command::Analyze: doc = cmd_analyze(*spec, err); break;
            case Command::Merge: doc = cmd_merge(*spec, err); break;
            case Command::Dilution: doc = cmd_dilution(*spec, err); break;
        }
        if (spec->print_report) out << doc.dump(2) << '\n';
        return kExitOk;
    } catch (const AlignmentError& e) {
        err << "alignment error: " << e.what() << " (" << to_string(e.reason()) << ")\n";
        return kExitAlignment;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        switch (e.category()) {
            case Error::Category::Format:
            case Error::Category::Io:
            case Error::Category::Data: return kExitFormat;
            case Error::Category::Config: return kExitConfig;
            case Error::Category::Alignment: return kExitAlignment;
            case Error::Category::Internal: return kExitInternal;
        }
        return kExitInternal;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
}

}  // namespace rammerge::cli
