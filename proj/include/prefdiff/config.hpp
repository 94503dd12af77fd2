#pragma once

// Run configuration shared by every pipeline stage, with strict JSON
// (de)serialization: unknown or mistyped fields are rejected by name.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "alignment_losses.hpp"
#include "checkpoint.hpp"
#include "coefficients.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "optim.hpp"
#include "params.hpp"
#include "scoring_losses.hpp"

namespace prefdiff {

/// Reads fields of one JSON object, tracking which keys were consumed so
/// leftovers can be reported as unknown.
class FieldReader {
public:
    FieldReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        const Json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
                    throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError(path(key) + ": invalid value " + v.dump());
        }
    }

    template <typename T>
    void get(const std::string& key, std::optional<T>& out) {
        seen_.push_back(key);
        if (!j_.contains(key) || j_.at(key).is_null()) {
            if (j_.contains(key)) out.reset();
            return;
        }
        T v{};
        seen_.pop_back();
        get(key, v);
        out = v;
    }

    /// Reads a nested object with `fn(FieldReader&)` when present.
    template <typename Fn>
    void section(const std::string& key, Fn&& fn) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        FieldReader sub(j_.at(key), path(key));
        fn(sub);
        sub.finish();
    }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
                throw ConfigError(path(key) + ": unknown field");
    }

    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

private:
    const Json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

struct TrainConfig {
    double lr = 1e-3;
    std::size_t epochs = 1;
    std::size_t batch_size = 8;
    double clip_norm = 1.0;

    AdamConfig adam() const {
        AdamConfig a;
        a.lr = lr;
        a.clip_norm = clip_norm;
        return a;
    }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("optim.lr must be positive");
        if (epochs == 0) throw ConfigError("optim.epochs must be positive");
        if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
        if (!(clip_norm >= 0.0)) throw ConfigError("optim.clip_norm must be nonnegative");
    }
};

struct EvalConfig {
    double tie_delta = 0.05;
    std::size_t confidence_buckets = 4;
    std::vector<std::string> strategies{"greedy", "temperature", "top_k"};
    double temperature = 1.0;
    std::size_t top_k = 8;
    std::size_t samples_per_query = 1;
    std::size_t max_new_tokens = 10;

    void validate() const {
        if (!(tie_delta >= 0.0)) throw ConfigError("eval.tie_delta must be nonnegative");
        if (confidence_buckets == 0) throw ConfigError("eval.confidence_buckets must be positive");
        if (!(temperature > 0.0)) throw ConfigError("eval.temperature must be positive");
        if (top_k == 0) throw ConfigError("eval.top_k must be positive");
        if (samples_per_query == 0) throw ConfigError("eval.samples_per_query must be positive");
        if (max_new_tokens == 0) throw ConfigError("eval.max_new_tokens must be positive");
        for (const auto& s : strategies)
            if (s != "greedy" && s != "temperature" && s != "top_k")
                throw ConfigError("eval.strategies: unknown strategy '" + s + "' (expected greedy|temperature|top_k)");
    }

    DecodeStrategy strategy(const std::string& name) const {
        if (name == "greedy") return DecodeStrategy::greedy();
        if (name == "temperature") return DecodeStrategy::with_temperature(temperature);
        return DecodeStrategy::top_k_sampling(top_k, temperature);
    }
};

/// Everything any stage reads. Each stage uses the subset it needs.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "runs/default";
    std::string label;

    std::size_t vocab_size = 64;
    BackboneConfig model{2, 32, 4, 40};
    TrainConfig optim;

    // data and checkpoint paths
    std::string train;
    std::string test;
    std::vector<std::string> train_paths; // every file a model was trained on, for eval disjointness
    std::string policy;                   // policy checkpoint (align init, eval, gen-data sampler)
    std::string reference;                // reference policy; defaults to `policy`
    std::string scorer;                   // reward or difference checkpoint, or "ground_truth"
    std::string baseline;                 // baseline policy for win/tie/loss
    std::string judge;                    // ground_truth.json

    CorpusConfig corpus;
    GroundTruthConfig ground_truth;
    DiffTrainConfig diff;
    CoefficientConfig coefficients;
    AlignConfig align;
    EvalConfig eval;

    Vocab vocab() const { return Vocab{vocab_size}; }

    void validate() const {
        vocab().validate();
        model.validate();
        optim.validate();
        diff.validate();
        coefficients.validate();
        align.validate();
        eval.validate();
    }

    Json to_json() const {
        Json c{{"train_queries", corpus.train_queries},
               {"test_queries", corpus.test_queries},
               {"responses_per_query", corpus.responses_per_query},
               {"query_len", {corpus.query_len.min, corpus.query_len.max}},
               {"response_len", {corpus.response_len.min, corpus.response_len.max}},
               {"label_noise", to_string(corpus.label_noise)},
               {"bt_temperature", corpus.bt_temperature},
               {"hard_fraction", corpus.hard_fraction ? Json(*corpus.hard_fraction) : Json(nullptr)},
               {"hard_gap_threshold", corpus.hard_gap_threshold},
               {"tilt", corpus.tilt},
               {"echo_probability", corpus.echo_probability},
               {"max_attempts", corpus.max_attempts}};
        return Json{
            {"seed", seed},
            {"out", out},
            {"label", label},
            {"vocab_size", vocab_size},
            {"model", config_to_json(model)},
            {"optim",
             {{"lr", optim.lr}, {"epochs", optim.epochs}, {"batch_size", optim.batch_size}, {"clip_norm", optim.clip_norm}}},
            {"train", train},
            {"test", test},
            {"train_paths", train_paths},
            {"policy", policy},
            {"reference", reference},
            {"scorer", scorer},
            {"baseline", baseline},
            {"judge", judge},
            {"corpus", c},
            {"ground_truth",
             {{"weight_scale", ground_truth.weight_scale},
              {"echo_bonus", ground_truth.echo_bonus},
              {"length_penalty", ground_truth.length_penalty},
              {"target_length", ground_truth.target_length}}},
            {"diff", {{"beta0", diff.beta0}, {"beta1", diff.beta1}}},
            {"coefficients",
             {{"source", to_string(coefficients.source)},
              {"alpha", coefficients.alpha},
              {"clamp_epsilon", coefficients.clamp_epsilon}}},
            {"align",
             {{"method", to_string(align.method)},
              {"use_coefficients", align.use_coefficients},
              {"dpo_beta", align.dpo_beta},
              {"rrhf_hinge_mode", to_string(align.rrhf_hinge_mode)},
              {"rrhf_sft_weight", align.rrhf_sft_weight},
              {"length_normalize_rrhf", align.length_normalize_rrhf},
              {"kto_beta", align.kto_beta},
              {"kto_lambda_desirable", align.kto_lambda_desirable},
              {"kto_lambda_undesirable", align.kto_lambda_undesirable}}},
            {"eval",
             {{"tie_delta", eval.tie_delta},
              {"confidence_buckets", eval.confidence_buckets},
              {"strategies", eval.strategies},
              {"temperature", eval.temperature},
              {"top_k", eval.top_k},
              {"samples_per_query", eval.samples_per_query},
              {"max_new_tokens", eval.max_new_tokens}}},
        };
    }

    /// Overlays the fields present in `j` onto this config.
    void merge_json(const Json& j) {
        FieldReader r(j, "");
        r.get("seed", seed);
        r.get("out", out);
        r.get("label", label);
        r.get("vocab_size", vocab_size);
        r.section("model", [&](FieldReader& s) {
            s.get("layers", model.layers);
            s.get("width", model.width);
            s.get("heads", model.heads);
            s.get("max_len", model.max_len);
        });
        r.section("optim", [&](FieldReader& s) {
            s.get("lr", optim.lr);
            s.get("epochs", optim.epochs);
            s.get("batch_size", optim.batch_size);
            s.get("clip_norm", optim.clip_norm);
        });
        r.get("train", train);
        r.get("test", test);
        r.get("train_paths", train_paths);
        r.get("policy", policy);
        r.get("reference", reference);
        r.get("scorer", scorer);
        r.get("baseline", baseline);
        r.get("judge", judge);
        r.section("corpus", [&](FieldReader& s) {
            s.get("train_queries", corpus.train_queries);
            s.get("test_queries", corpus.test_queries);
            s.get("responses_per_query", corpus.responses_per_query);
            std::vector<std::size_t> range;
            auto read_range = [&](const char* key, LengthRange& out) {
                range.clear();
                s.get(key, range);
                if (range.empty()) return;
                if (range.size() != 2) throw ConfigError(s.path(key) + ": expected [min, max]");
                out = {range[0], range[1]};
            };
            read_range("query_len", corpus.query_len);
            read_range("response_len", corpus.response_len);
            std::string noise = to_string(corpus.label_noise);
            s.get("label_noise", noise);
            if (noise == "clean") corpus.label_noise = LabelSource::clean;
            else if (noise == "bt") corpus.label_noise = LabelSource::bt;
            else throw ConfigError(s.path("label_noise") + ": expected clean|bt, got '" + noise + "'");
            s.get("bt_temperature", corpus.bt_temperature);
            s.get("hard_fraction", corpus.hard_fraction);
            s.get("hard_gap_threshold", corpus.hard_gap_threshold);
            s.get("tilt", corpus.tilt);
            s.get("echo_probability", corpus.echo_probability);
            s.get("max_attempts", corpus.max_attempts);
        });
        r.section("ground_truth", [&](FieldReader& s) {
            s.get("weight_scale", ground_truth.weight_scale);
            s.get("echo_bonus", ground_truth.echo_bonus);
            s.get("length_penalty", ground_truth.length_penalty);
            s.get("target_length", ground_truth.target_length);
        });
        r.section("diff", [&](FieldReader& s) {
            s.get("beta0", diff.beta0);
            s.get("beta1", diff.beta1);
        });
        r.section("coefficients", [&](FieldReader& s) {
            std::string src = to_string(coefficients.source);
            s.get("source", src);
            coefficients.source = parse_coefficient_source(src);
            s.get("alpha", coefficients.alpha);
            s.get("clamp_epsilon", coefficients.clamp_epsilon);
        });
        r.section("align", [&](FieldReader& s) {
            std::string method = to_string(align.method);
            s.get("method", method);
            align.method = parse_align_method(method);
            s.get("use_coefficients", align.use_coefficients);
            s.get("dpo_beta", align.dpo_beta);
            std::string hinge = to_string(align.rrhf_hinge_mode);
            s.get("rrhf_hinge_mode", hinge);
            align.rrhf_hinge_mode = parse_rrhf_hinge(hinge);
            s.get("rrhf_sft_weight", align.rrhf_sft_weight);
            s.get("length_normalize_rrhf", align.length_normalize_rrhf);
            s.get("kto_beta", align.kto_beta);
            s.get("kto_lambda_desirable", align.kto_lambda_desirable);
            s.get("kto_lambda_undesirable", align.kto_lambda_undesirable);
        });
        r.section("eval", [&](FieldReader& s) {
            s.get("tie_delta", eval.tie_delta);
            s.get("confidence_buckets", eval.confidence_buckets);
            s.get("strategies", eval.strategies);
            s.get("temperature", eval.temperature);
            s.get("top_k", eval.top_k);
            s.get("samples_per_query", eval.samples_per_query);
            s.get("max_new_tokens", eval.max_new_tokens);
        });
        r.finish();
    }

    static RunConfig from_json(const Json& j) {
        RunConfig c;
        c.merge_json(j);
        return c;
    }

    /// Digest of everything except the output location.
    std::uint64_t digest() const {
        Json j = to_json();
        j.erase("out");
        return fnv1a(j.dump());
    }
};

/// Sets one dotted-path field ("align.dpo_beta") from text. The text is read
/// as JSON when it parses, otherwise as a string.
inline void set_json_path(Json& j, const std::string& dotted, const std::string& text) {
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::parse_error&) {
        value = text;
    }
    Json* node = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("invalid field path '" + dotted + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        Json& next = (*node)[key];
        if (next.is_null()) next = Json::object();
        if (!next.is_object()) throw ConfigError("field path '" + dotted + "': '" + key + "' is not an object");
        node = &next;
        start = dot + 1;
    }
}

} // namespace prefdiff
