// prefdiff: command-line front end for the preference-learning pipeline.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefdiff/prefdiff.hpp"

namespace {

using prefdiff::Json;

enum ExitCode : int { ok = 0, checks_failed = 1, usage = 2, config_error = 3, data_error = 4, diverged = 5, internal = 6 };

struct Override {
    std::string flag;
    std::string path;
    std::string help;
};

// Flags shared by every stage subcommand, then the per-stage extras.
const std::vector<Override>& common_overrides() {
    static const std::vector<Override> v{
        {"--label", "label", "run label used in report rows"},
        {"--vocab-size", "vocab_size", "vocabulary size"},
        {"--lr", "optim.lr", "Adam learning rate"},
        {"--epochs", "optim.epochs", "training epochs"},
        {"--batch-size", "optim.batch_size", "pairs per optimizer step"},
        {"--clip-norm", "optim.clip_norm", "global gradient-norm clip"},
        {"--layers", "model.layers", "transformer blocks"},
        {"--width", "model.width", "model width"},
        {"--heads", "model.heads", "attention heads"},
        {"--max-len", "model.max_len", "maximum input length"},
    };
    return v;
}

const std::map<std::string, std::vector<Override>>& stage_overrides() {
    static const std::map<std::string, std::vector<Override>> m{
        {"gen-data",
         {{"--train-queries", "corpus.train_queries", "training queries"},
          {"--test-queries", "corpus.test_queries", "test queries"},
          {"--responses", "corpus.responses_per_query", "responses per query"},
          {"--label-noise", "corpus.label_noise", "clean | bt"},
          {"--bt-temperature", "corpus.bt_temperature", "Bradley-Terry label temperature"},
          {"--hard-fraction", "corpus.hard_fraction", "fraction of hard pairs"},
          {"--policy", "policy", "optional policy used to sample extra responses"}}},
        {"sft", {{"--train", "train", "training JSONL"}}},
        {"train-rm", {{"--train", "train", "training JSONL"}}},
        {"train-diff",
         {{"--train", "train", "training JSONL"},
          {"--beta0", "diff.beta0", "duplication regularizer weight"},
          {"--beta1", "diff.beta1", "reverse regularizer weight"}}},
        {"annotate",
         {{"--train", "train", "dataset to annotate"},
          {"--scorer", "scorer", "reward or difference checkpoint"},
          {"--source", "coefficients.source", "none | reward_model | difference_model"},
          {"--alpha", "coefficients.alpha", "coefficient exponent"},
          {"--clamp-epsilon", "coefficients.clamp_epsilon", "lower clamp on the raw difference"}}},
        {"align",
         {{"--train", "train", "(annotated) training JSONL"},
          {"--policy", "policy", "initial policy checkpoint"},
          {"--reference", "reference", "reference checkpoint (defaults to --policy)"},
          {"--method", "align.method", "rrhf | dpo | kto"},
          {"--use-coefficients", "align.use_coefficients", "true for the +rc variant"},
          {"--dpo-beta", "align.dpo_beta", "DPO temperature"},
          {"--kto-beta", "align.kto_beta", "KTO temperature"},
          {"--rrhf-hinge", "align.rrhf_hinge_mode", "margin | rank"}}},
        {"eval",
         {{"--test", "test", "held-out JSONL"},
          {"--judge", "judge", "ground_truth.json"},
          {"--policy", "policy", "policy checkpoint to evaluate"},
          {"--baseline", "baseline", "baseline policy for win/tie/loss"},
          {"--scorer", "scorer", "scoring checkpoint or ground_truth"},
          {"--tie-delta", "eval.tie_delta", "tie band on the judge's reward gap"},
          {"--buckets", "eval.confidence_buckets", "confidence buckets"}}},
    };
    return m;
}

struct StageArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> sets;
    std::map<std::string, std::string> values; // dotted path -> text
};

Json load_json_file(const std::string& path) {
    try {
        return Json::parse(prefdiff::read_text_file(path));
    } catch (const Json::parse_error& e) {
        throw prefdiff::ConfigError("config '" + path + "': " + e.what());
    }
}

prefdiff::RunConfig build_config(const StageArgs& a) {
    Json j = a.config.empty() ? Json::object() : load_json_file(a.config);
    if (!j.is_object()) throw prefdiff::ConfigError("config: expected a JSON object");
    for (const auto& [path, text] : a.values) prefdiff::set_json_path(j, path, text);
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw prefdiff::ConfigError("--set '" + s + "': expected key=value");
        prefdiff::set_json_path(j, s.substr(0, eq), s.substr(eq + 1));
    }
    if (a.seed) j["seed"] = *a.seed;
    if (a.out) j["out"] = *a.out;
    return prefdiff::RunConfig::from_json(j);
}

void add_run_flags(CLI::App* sub, StageArgs& a, const std::vector<Override>& extras) {
    sub->add_option("--config", a.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seed, "run seed");
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--set", a.sets, "override any config field: key.path=value")->take_all();
    auto bind = [&](const Override& o) {
        sub->add_option_function<std::string>(o.flag, [&a, path = o.path](const std::string& v) { a.values[path] = v; },
                                              o.help);
    };
    for (const auto& o : common_overrides()) bind(o);
    for (const auto& o : extras) bind(o);
}

spdlog::level::level_enum log_level_from_env() {
    const char* env = std::getenv("PREFDIFF_LOG");
    if (!env || !*env) return spdlog::level::info;
    const std::string v = env;
    if (v == "error") return spdlog::level::err;
    if (v == "info") return spdlog::level::info;
    if (v == "debug") return spdlog::level::debug;
    throw prefdiff::ConfigError("PREFDIFF_LOG: invalid value '" + v + "' (expected error, info or debug)");
}

int report_error(const char* kind, const std::string& message, int code) {
    std::cerr << Json{{"error", kind}, {"message", message}}.dump() << '\n';
    return code;
}

void log_report(const prefdiff::EvalReport& r) {
    for (const auto& [name, value] : r.metrics()) spdlog::info("{} = {}", name, prefdiff::format_double(value));
}

} // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("prefdiff");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
    try {
        spdlog::set_level(log_level_from_env());
    } catch (const prefdiff::ConfigError& e) {
        return report_error("ConfigError", e.what(), config_error);
    }

    CLI::App app{"Preference-model training, annotation, alignment and evaluation"};
    app.require_subcommand(1);

    std::map<std::string, StageArgs> stage_args;
    std::map<std::string, CLI::App*> stage_apps;
    const std::map<std::string, std::string> descriptions{
        {"gen-data", "generate the synthetic preference corpus and its ground-truth reward"},
        {"sft", "supervised fine-tuning on top-reward demonstrations"},
        {"train-rm", "train a pointwise reward model"},
        {"train-diff", "train a pairwise difference model"},
        {"annotate", "write reward-difference coefficients into a dataset"},
        {"align", "offline alignment with RRHF, DPO or KTO (optionally +rc)"},
        {"eval", "evaluate a scorer and/or policy on the held-out split"},
    };
    for (const auto& name : prefdiff::stage_commands()) {
        auto* sub = app.add_subcommand(name, descriptions.at(name));
        add_run_flags(sub, stage_args[name], stage_overrides().at(name));
        stage_apps[name] = sub;
    }

    std::uint64_t verify_seed = 0;
    auto* verify = app.add_subcommand("verify", "run gradient, identity, reduction and regularizer checks");
    verify->add_option("--seed", verify_seed, "check seed");

    std::string manifest_path;
    std::optional<std::uint64_t> exp_seed;
    std::optional<std::string> exp_out;
    auto* experiment = app.add_subcommand("experiment", "run a manifest end to end");
    experiment->add_option("manifest", manifest_path, "manifest JSON")->required()->check(CLI::ExistingFile);
    experiment->add_option("--seed", exp_seed, "override the manifest seed");
    experiment->add_option("--out", exp_out, "override the manifest output root");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("UsageError", e.what(), usage);
    }

    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };
    try {
        if (verify->parsed()) {
            const bool passed = prefdiff::run_verify(verify_seed, std::cout);
            spdlog::info("verify finished in {:.2f}s", elapsed());
            return passed ? ok : checks_failed;
        }
        if (experiment->parsed()) {
            auto m = prefdiff::load_manifest(manifest_path);
            spdlog::info("experiment '{}' ({} stages)", m.name, m.stages.size());
            auto result = prefdiff::run_experiment(m, exp_seed, exp_out, [&](const std::string& stage) {
                spdlog::info("[{:.1f}s] stage {}", elapsed(), stage);
            });
            for (const auto& [label, report] : result.reports) {
                spdlog::debug("report {}", label);
                if (spdlog::should_log(spdlog::level::debug)) log_report(report);
            }
            std::cout << result.report_csv;
            spdlog::info("experiment finished in {:.1f}s", elapsed());
            return ok;
        }
        for (const auto& [name, sub] : stage_apps) {
            if (!sub->parsed()) continue;
            const auto cfg = build_config(stage_args[name]);
            spdlog::debug("config {}", cfg.to_json().dump());
            spdlog::info("{} -> {} (digest {})", name, cfg.out, prefdiff::hex_digest(cfg.digest()));
            auto report = prefdiff::run_stage(name, cfg);
            if (report) log_report(*report);
            spdlog::info("{} finished in {:.1f}s", name, elapsed());
            return ok;
        }
    } catch (const prefdiff::ConfigError& e) {
        return report_error("ConfigError", e.what(), config_error);
    } catch (const prefdiff::ShapeError& e) {
        return report_error("ShapeError", e.what(), config_error);
    } catch (const prefdiff::DataError& e) {
        return report_error("DataError", e.what(), data_error);
    } catch (const prefdiff::DivergenceError& e) {
        return report_error("DivergenceError", e.what(), diverged);
    } catch (const std::exception& e) {
        return report_error("InternalError", e.what(), internal);
    }
    return usage;
}
