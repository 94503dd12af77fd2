#pragma once

// Stage dispatch and multi-stage experiment manifests.
//
// Manifest:
//   {"name": "...", "seed": 1, "output_root": "runs/x",
//    "defaults": {<RunConfig fields>},
//    "stages": [{"name": "data", "command": "gen-data", "config": {...}}, ...]}
//
// String values may reference ${out} (the output root) and ${stage.NAME}
// (the output directory of an earlier stage).

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "config.hpp"
#include "evaluate.hpp"
#include "harness.hpp"

namespace prefdiff {

inline const std::vector<std::string>& stage_commands() {
    static const std::vector<std::string> commands{"gen-data", "sft", "train-rm", "train-diff", "annotate", "align", "eval"};
    return commands;
}

/// Runs one pipeline stage. Returns the evaluation report for eval stages.
inline std::optional<EvalReport> run_stage(const std::string& command, const RunConfig& cfg) {
    if (command == "gen-data") run_gen_data(cfg);
    else if (command == "sft") run_sft(cfg);
    else if (command == "train-rm") run_scoring_training(cfg, ModelKind::reward);
    else if (command == "train-diff") run_scoring_training(cfg, ModelKind::difference);
    else if (command == "annotate") run_annotate(cfg);
    else if (command == "align") run_alignment(cfg);
    else if (command == "eval") return run_eval(cfg);
    else throw ConfigError("unknown stage command '" + command + "'");
    return std::nullopt;
}

struct ManifestStage {
    std::string name;
    std::string command;
    Json config = Json::object();
};

struct Manifest {
    std::string name;
    std::uint64_t seed = 0;
    std::string output_root;
    Json defaults = Json::object();
    std::vector<ManifestStage> stages;

    static Manifest from_json(const Json& j) {
        Manifest m;
        FieldReader r(j, "manifest");
        r.get("name", m.name);
        r.get("seed", m.seed);
        r.get("output_root", m.output_root);
        r.get("defaults", m.defaults);
        if (!m.defaults.is_object()) throw ConfigError("manifest.defaults: expected an object");
        if (!j.contains("stages") || !j["stages"].is_array()) throw ConfigError("manifest.stages: expected an array");
        Json stages;
        r.get("stages", stages);
        r.finish();
        std::set<std::string> names;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            ManifestStage s;
            FieldReader sr(stages[i], "manifest.stages[" + std::to_string(i) + "]");
            sr.get("name", s.name);
            sr.get("command", s.command);
            sr.get("config", s.config);
            sr.finish();
            if (s.name.empty()) throw ConfigError(sr.path("name") + ": required");
            if (!names.insert(s.name).second) throw ConfigError(sr.path("name") + ": duplicate stage '" + s.name + "'");
            if (std::find(stage_commands().begin(), stage_commands().end(), s.command) == stage_commands().end())
                throw ConfigError(sr.path("command") + ": unknown command '" + s.command + "'");
            if (!s.config.is_object()) throw ConfigError(sr.path("config") + ": expected an object");
            m.stages.push_back(std::move(s));
        }
        if (m.stages.empty()) throw ConfigError("manifest.stages: no stages");
        return m;
    }

    Json to_json() const {
        Json stages = Json::array();
        for (const auto& s : this->stages) stages.push_back({{"name", s.name}, {"command", s.command}, {"config", s.config}});
        return {{"name", name}, {"seed", seed}, {"output_root", output_root}, {"defaults", defaults}, {"stages", stages}};
    }

    /// Digest of the manifest content, independent of where outputs go.
    std::uint64_t digest() const {
        Json j = to_json();
        j.erase("output_root");
        return fnv1a(j.dump());
    }
};

namespace detail {

inline std::string substitute(const std::string& text, const std::string& root,
                              const std::map<std::string, std::string>& stage_dirs, const std::string& where) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t open = text.find("${", pos);
        if (open == std::string::npos) break;
        const std::size_t close = text.find('}', open);
        if (close == std::string::npos) throw ConfigError(where + ": unterminated ${...} in '" + text + "'");
        out += text.substr(pos, open - pos);
        const std::string ref = text.substr(open + 2, close - open - 2);
        if (ref == "out") {
            out += root;
        } else if (ref.rfind("stage.", 0) == 0) {
            auto it = stage_dirs.find(ref.substr(6));
            if (it == stage_dirs.end())
                throw ConfigError(where + ": '${" + ref + "}' does not name an earlier stage");
            out += it->second;
        } else {
            throw ConfigError(where + ": unknown reference '${" + ref + "}'");
        }
        pos = close + 1;
    }
    return out + text.substr(pos);
}

inline Json substitute_all(const Json& j, const std::string& root, const std::map<std::string, std::string>& dirs,
                           const std::string& where) {
    if (j.is_string()) return substitute(j.get<std::string>(), root, dirs, where);
    if (j.is_array()) {
        Json out = Json::array();
        for (const auto& e : j) out.push_back(substitute_all(e, root, dirs, where));
        return out;
    }
    if (j.is_object()) {
        Json out = Json::object();
        for (const auto& [k, v] : j.items()) out[k] = substitute_all(v, root, dirs, where + "." + k);
        return out;
    }
    return j;
}

inline void merge_into(Json& base, const Json& patch) {
    for (const auto& [k, v] : patch.items()) {
        if (v.is_object() && base.contains(k) && base[k].is_object()) merge_into(base[k], v);
        else base[k] = v;
    }
}

} // namespace detail

struct ExperimentResult {
    std::vector<std::pair<std::string, EvalReport>> reports; // (run label, report) in stage order
    std::string report_csv;
};

/// Runs every stage in order under `output_root`, then writes the
/// aggregated <root>/report.csv and <root>/manifest.json.
inline ExperimentResult run_experiment(Manifest m, std::optional<std::uint64_t> seed_override = std::nullopt,
                                       std::optional<std::string> out_override = std::nullopt,
                                       const std::function<void(const std::string&)>& progress = {}) {
    if (seed_override) m.seed = *seed_override;
    if (out_override) m.output_root = *out_override;
    if (m.output_root.empty()) throw ConfigError("manifest.output_root: required (or pass --out)");
    fs::create_directories(m.output_root);
    const std::string digest = hex_digest(m.digest());

    std::map<std::string, std::string> dirs;
    ExperimentResult result;
    std::string csv = csv_header;
    for (const auto& stage : m.stages) {
        const std::string where = "manifest.stages." + stage.name;
        Json merged = m.defaults;
        detail::merge_into(merged, stage.config);
        merged = detail::substitute_all(merged, m.output_root, dirs, where);
        const std::string dir = (fs::path(m.output_root) / stage.name).string();
        merged["seed"] = m.seed;
        merged["out"] = dir;
        RunConfig cfg;
        try {
            cfg = RunConfig::from_json(merged);
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
        if (progress) progress(stage.name);
        auto report = run_stage(stage.command, cfg);
        dirs[stage.name] = dir;
        if (report) {
            report->digests["manifest"] = digest;
            write_text_file((fs::path(dir) / "report.json").string(), report->to_json().dump(2) + "\n");
            const std::string label = cfg.label.empty() ? stage.name : cfg.label;
            csv += csv_rows(label, report->metrics());
            result.reports.emplace_back(label, *report);
        }
    }
    Json mj = m.to_json();
    mj["digest"] = digest;
    write_text_file((fs::path(m.output_root) / "manifest.json").string(), mj.dump(2) + "\n");
    write_text_file((fs::path(m.output_root) / "report.csv").string(), csv);
    result.report_csv = csv;
    return result;
}

inline Manifest load_manifest(const std::string& path) {
    Json j;
    try {
        j = Json::parse(read_text_file(path));
    } catch (const Json::parse_error& e) {
        throw ConfigError("manifest '" + path + "': " + e.what());
    }
    return Manifest::from_json(j);
}

} // namespace prefdiff
