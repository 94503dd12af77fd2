#pragma once

// Held-out evaluation: pairwise accuracy with confidence buckets for a
// scorer, ground-truth reward of decoded responses for a policy, and
// win/tie/loss against a baseline policy.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "harness.hpp"
#include "transformer.hpp"

namespace prefdiff {

/// Signed preference for y1 over y2 under some scorer.
using PairScorer = std::function<double(const TokenSequence& x, const TokenSequence& y1, const TokenSequence& y2)>;

inline PairScorer ground_truth_scorer(const GroundTruthReward& gt) {
    return [gt](const TokenSequence& x, const TokenSequence& a, const TokenSequence& b) {
        return ground_truth_reward(gt, x, a) - ground_truth_reward(gt, x, b);
    };
}

inline PairScorer model_scorer(const ParameterStore& model) {
    if (model.kind() == ModelKind::reward)
        return [&model](const TokenSequence& x, const TokenSequence& a, const TokenSequence& b) {
            return reward_value(model, x, a) - reward_value(model, x, b);
        };
    if (model.kind() == ModelKind::difference)
        return [&model](const TokenSequence& x, const TokenSequence& a, const TokenSequence& b) {
            return difference_value(model, x, a, b);
        };
    throw ConfigError("scorer must be a reward or difference checkpoint, got a policy");
}

struct ConfidenceBucket {
    double lo = 0.0; // smallest |score| in the bucket
    double hi = 0.0; // largest |score| in the bucket
    std::size_t count = 0;
    double accuracy = 0.0;
};

struct WinTieLoss {
    std::size_t wins = 0;
    std::size_t ties = 0;
    std::size_t losses = 0;
};

struct ScorerEval {
    double accuracy = 0.0;
    std::size_t pairs = 0;
    std::vector<ConfidenceBucket> buckets;
};

struct EvalReport {
    std::string label;
    std::uint64_t seed = 0;
    std::optional<ScorerEval> scorer;
    std::optional<double> mean_abs_self_score; // difference scorers: mean |f(x, y, y)|
    std::optional<double> mean_abs_pair_score; // difference scorers: mean |f(x, y1, y2)|
    std::map<std::string, double> mean_gt_reward;
    std::optional<WinTieLoss> win_tie_loss;
    std::string baseline;
    std::size_t evaluated_queries = 0;
    std::map<std::string, std::string> digests;

    Json to_json() const {
        Json j{{"label", label}, {"seed", seed}, {"digests", digests}, {"evaluated_queries", evaluated_queries}};
        if (scorer) {
            Json buckets = Json::array();
            for (const auto& b : scorer->buckets)
                buckets.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"accuracy", b.accuracy}});
            j["pairwise_accuracy"] = scorer->accuracy;
            j["evaluated_pairs"] = scorer->pairs;
            j["confidence_buckets"] = buckets;
        }
        if (mean_abs_self_score) j["mean_abs_self_score"] = *mean_abs_self_score;
        if (mean_abs_pair_score) j["mean_abs_pair_score"] = *mean_abs_pair_score;
        if (!mean_gt_reward.empty()) j["mean_gt_reward"] = mean_gt_reward;
        if (win_tie_loss)
            j["win_tie_loss"] = {{"baseline", baseline},
                                 {"wins", win_tie_loss->wins},
                                 {"ties", win_tie_loss->ties},
                                 {"losses", win_tie_loss->losses}};
        return j;
    }

    /// One (metric, value) row per scalar, in a fixed order.
    std::vector<std::pair<std::string, double>> metrics() const {
        std::vector<std::pair<std::string, double>> rows;
        if (scorer) {
            rows.emplace_back("pairwise_accuracy", scorer->accuracy);
            rows.emplace_back("evaluated_pairs", static_cast<double>(scorer->pairs));
            for (std::size_t i = 0; i < scorer->buckets.size(); ++i) {
                const auto& b = scorer->buckets[i];
                const std::string p = "bucket" + std::to_string(i) + ".";
                rows.emplace_back(p + "lo", b.lo);
                rows.emplace_back(p + "hi", b.hi);
                rows.emplace_back(p + "count", static_cast<double>(b.count));
                rows.emplace_back(p + "accuracy", b.accuracy);
            }
        }
        if (mean_abs_self_score) rows.emplace_back("mean_abs_self_score", *mean_abs_self_score);
        if (mean_abs_pair_score) rows.emplace_back("mean_abs_pair_score", *mean_abs_pair_score);
        for (const auto& [k, v] : mean_gt_reward) rows.emplace_back("mean_gt_reward." + k, v);
        if (win_tie_loss) {
            rows.emplace_back("wins", static_cast<double>(win_tie_loss->wins));
            rows.emplace_back("ties", static_cast<double>(win_tie_loss->ties));
            rows.emplace_back("losses", static_cast<double>(win_tie_loss->losses));
        }
        return rows;
    }
};

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_rows(const std::string& run, const std::vector<std::pair<std::string, double>>& metrics) {
    std::string out;
    for (const auto& [metric, value] : metrics) out += run + "," + metric + "," + format_double(value) + "\n";
    return out;
}

inline const char* csv_header = "run,metric,value\n";

/// Accuracy of sign(score) against the label, each pair shown in a seeded
/// random orientation. Buckets split pairs into equal-count groups by |score|.
inline ScorerEval evaluate_scorer(const std::vector<PreferenceRecord>& test, const PairScorer& scorer,
                                  std::size_t n_buckets, std::uint64_t seed) {
    if (n_buckets == 0) throw ConfigError("eval.confidence_buckets must be positive");
    Rng rng(derive_seed(seed, "orientation"));
    std::vector<std::pair<double, bool>> scored; // (|score|, correct)
    for (const auto& p : to_pairs(test)) {
        const bool flip = rng.bernoulli(0.5);
        const double s = flip ? scorer(p.query, p.y_l, p.y_w) : scorer(p.query, p.y_w, p.y_l);
        const bool correct = flip ? s < 0.0 : s > 0.0;
        scored.emplace_back(std::abs(s), correct);
    }
    if (scored.empty()) throw DataError("evaluate: test set has no pairs");
    ScorerEval r;
    r.pairs = scored.size();
    std::size_t correct = 0;
    for (const auto& [_, c] : scored) correct += c ? 1 : 0;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.pairs);

    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t nb = std::min(n_buckets, scored.size());
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t lo = b * scored.size() / nb;
        const std::size_t hi = (b + 1) * scored.size() / nb;
        ConfidenceBucket bucket;
        bucket.lo = scored[lo].first;
        bucket.hi = scored[hi - 1].first;
        bucket.count = hi - lo;
        std::size_t ok = 0;
        for (std::size_t i = lo; i < hi; ++i) ok += scored[i].second ? 1 : 0;
        bucket.accuracy = static_cast<double>(ok) / static_cast<double>(bucket.count);
        r.buckets.push_back(bucket);
    }
    return r;
}

/// Queries of the test split, in record order, without duplicates.
inline std::vector<TokenSequence> test_queries(const std::vector<PreferenceRecord>& test) {
    std::vector<TokenSequence> out;
    std::set<std::vector<TokenId>> seen;
    for (const auto& r : test)
        if (seen.insert(r.query.ids).second) out.push_back(r.query);
    return out;
}

/// Mean ground-truth reward of decoded responses, per strategy name.
inline std::map<std::string, double> evaluate_policy(const ParameterStore& policy,
                                                     const std::vector<TokenSequence>& queries,
                                                     const GroundTruthReward& judge, const EvalConfig& cfg,
                                                     std::uint64_t seed) {
    std::map<std::string, double> out;
    for (const auto& name : cfg.strategies) {
        const DecodeStrategy strategy = cfg.strategy(name);
        const std::size_t samples = strategy.kind == DecodeStrategy::Kind::greedy ? 1 : cfg.samples_per_query;
        double total = 0.0;
        for (std::size_t q = 0; q < queries.size(); ++q)
            for (std::size_t s = 0; s < samples; ++s) {
                const std::uint64_t sseed = derive_seed(derive_seed(derive_seed(seed, name), q), s);
                const TokenSequence y = sample(policy, queries[q], strategy, cfg.max_new_tokens, sseed);
                total += ground_truth_reward(judge, queries[q], y);
            }
        out[name] = total / static_cast<double>(queries.size() * samples);
    }
    return out;
}

/// Greedy decodes of both policies judged per query; |difference| <= tie_delta is a tie.
inline WinTieLoss win_tie_loss(const ParameterStore& policy, const ParameterStore& baseline,
                               const std::vector<TokenSequence>& queries, const GroundTruthReward& judge,
                               const EvalConfig& cfg) {
    WinTieLoss w;
    for (const auto& x : queries) {
        const double a = ground_truth_reward(judge, x, sample(policy, x, DecodeStrategy::greedy(), cfg.max_new_tokens, 0));
        const double b =
            ground_truth_reward(judge, x, sample(baseline, x, DecodeStrategy::greedy(), cfg.max_new_tokens, 0));
        if (std::abs(a - b) <= cfg.tie_delta) ++w.ties;
        else if (a > b) ++w.wins;
        else ++w.losses;
    }
    return w;
}

/// Mean |f(x, y, y)| over every test response and mean |f(x, y_w, y_l)| over test pairs.
inline std::pair<double, double> difference_magnitudes(const ParameterStore& model,
                                                       const std::vector<PreferenceRecord>& test) {
    double self = 0.0, pair = 0.0;
    std::size_t ns = 0, np = 0;
    for (const auto& r : test) {
        for (const auto& y : r.responses) {
            self += std::abs(difference_value(model, r.query, y, y));
            ++ns;
        }
        for (const auto& p : r.pairs) {
            pair += std::abs(difference_value(model, r.query, r.responses[p.w], r.responses[p.l]));
            ++np;
        }
    }
    return {self / static_cast<double>(ns), pair / static_cast<double>(np)};
}

namespace detail {

inline bool same_file(const std::string& a, const std::string& b) {
    std::error_code ec;
    if (fs::exists(a, ec) && fs::exists(b, ec)) return fs::equivalent(a, b, ec);
    return fs::weakly_canonical(a, ec) == fs::weakly_canonical(b, ec);
}

} // namespace detail

/// Evaluates whatever the config names: a scorer (reward/difference
/// checkpoint or "ground_truth"), a policy, and a baseline policy.
/// Writes <out>/report.json and <out>/report.csv.
inline EvalReport run_eval(const RunConfig& cfg) {
    cfg.validate();
    detail::require_path(cfg.test, "test");
    std::vector<std::string> training = cfg.train_paths;
    if (!cfg.train.empty()) training.push_back(cfg.train);
    for (const auto& t : training)
        if (!t.empty() && detail::same_file(t, cfg.test))
            throw ConfigError("test: '" + cfg.test + "' is also a training file ('" + t +
                              "'); evaluation requires a disjoint test split");
    if (cfg.scorer.empty() && cfg.policy.empty()) throw ConfigError("eval: set scorer and/or policy");
    const auto test = ingest_jsonl(cfg.test, cfg.vocab(), cfg.model.max_len);

    EvalReport report;
    report.label = cfg.label.empty() ? "eval" : cfg.label;
    report.seed = cfg.seed;
    report.digests["config"] = hex_digest(cfg.digest());
    report.digests["test"] = hex_digest(fnv1a(read_text_file(cfg.test)));

    std::optional<GroundTruthReward> judge;
    if (!cfg.judge.empty()) {
        detail::require_path(cfg.judge, "judge");
        judge = GroundTruthReward::from_json(Json::parse(read_text_file(cfg.judge)));
        report.digests["judge"] = hex_digest(fnv1a(read_text_file(cfg.judge)));
    }

    const std::uint64_t eval_seed = derive_seed(cfg.seed, "eval");
    if (!cfg.scorer.empty()) {
        if (cfg.scorer == "ground_truth") {
            if (!judge) throw ConfigError("scorer: ground_truth requires judge");
            report.scorer = evaluate_scorer(test, ground_truth_scorer(*judge), cfg.eval.confidence_buckets, eval_seed);
        } else {
            detail::require_path(cfg.scorer, "scorer");
            const ParameterStore model = load_checkpoint(cfg.scorer);
            report.digests["scorer"] = hex_digest(checkpoint_digest(model));
            report.scorer = evaluate_scorer(test, model_scorer(model), cfg.eval.confidence_buckets, eval_seed);
            if (model.kind() == ModelKind::difference) {
                const auto [self, pair] = difference_magnitudes(model, test);
                report.mean_abs_self_score = self;
                report.mean_abs_pair_score = pair;
            }
        }
    }

    if (!cfg.policy.empty()) {
        if (!judge) throw ConfigError("judge: required to evaluate a policy");
        const ParameterStore policy = detail::load_kind(cfg.policy, ModelKind::policy, "policy");
        report.digests["policy"] = hex_digest(checkpoint_digest(policy));
        const auto queries = test_queries(test);
        report.evaluated_queries = queries.size();
        report.mean_gt_reward = evaluate_policy(policy, queries, *judge, cfg.eval, eval_seed);
        if (!cfg.baseline.empty()) {
            const ParameterStore base = detail::load_kind(cfg.baseline, ModelKind::policy, "baseline");
            report.digests["baseline"] = hex_digest(checkpoint_digest(base));
            report.baseline = cfg.baseline;
            report.win_tie_loss = win_tie_loss(policy, base, queries, *judge, cfg.eval);
        }
    }

    fs::create_directories(cfg.out);
    Json cj = cfg.to_json();
    cj["config_digest"] = hex_digest(cfg.digest());
    write_text_file((fs::path(cfg.out) / "config.json").string(), cj.dump(2) + "\n");
    write_text_file((fs::path(cfg.out) / "report.json").string(), report.to_json().dump(2) + "\n");
    write_text_file((fs::path(cfg.out) / "report.csv").string(),
                    std::string(csv_header) + csv_rows(report.label, report.metrics()));
    return report;
}

} // namespace prefdiff
