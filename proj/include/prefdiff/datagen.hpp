#pragma once

// Synthetic preference corpora with an exactly computable ground-truth reward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "transformer.hpp"
#include "vocab.hpp"

namespace prefdiff {

/// r*(x, y) = sum of per-token weights over y
///          + echo_bonus per response token that also occurs in x
///          - length_penalty per token beyond target_length.
struct GroundTruthReward {
    std::vector<double> token_weights; // indexed by token id; specials are 0
    double echo_bonus = 0.5;
    double length_penalty = 0.5;
    std::size_t target_length = 7;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"token_weights", token_weights},
                {"echo_bonus", echo_bonus},
                {"length_penalty", length_penalty},
                {"target_length", target_length},
                {"seed", seed}};
    }

    static GroundTruthReward from_json(const nlohmann::json& j) {
        try {
            GroundTruthReward gt;
            gt.token_weights = j.at("token_weights").get<std::vector<double>>();
            gt.echo_bonus = j.at("echo_bonus").get<double>();
            gt.length_penalty = j.at("length_penalty").get<double>();
            gt.target_length = j.at("target_length").get<std::size_t>();
            gt.seed = j.at("seed").get<std::uint64_t>();
            return gt;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("ground truth: ") + e.what());
        }
    }
};

struct GroundTruthConfig {
    double weight_scale = 1.0;
    double echo_bonus = 0.5;
    double length_penalty = 0.5;
    std::size_t target_length = 7;
};

inline GroundTruthReward make_ground_truth(const Vocab& vocab, const GroundTruthConfig& cfg, std::uint64_t seed) {
    GroundTruthReward gt;
    gt.token_weights.assign(vocab.size, 0.0);
    Rng rng(derive_seed(seed, "ground_truth"));
    for (TokenId id = Vocab::first_content; id < vocab.size; ++id) gt.token_weights[id] = rng.normal(0.0, cfg.weight_scale);
    gt.echo_bonus = cfg.echo_bonus;
    gt.length_penalty = cfg.length_penalty;
    gt.target_length = cfg.target_length;
    gt.seed = seed;
    return gt;
}

inline double ground_truth_reward(const GroundTruthReward& gt, const TokenSequence& x, const TokenSequence& y) {
    double r = 0.0;
    for (TokenId t : y.ids) {
        if (t < gt.token_weights.size()) r += gt.token_weights[t];
        if (std::find(x.ids.begin(), x.ids.end(), t) != x.ids.end()) r += gt.echo_bonus;
    }
    if (y.size() > gt.target_length) r -= gt.length_penalty * static_cast<double>(y.size() - gt.target_length);
    return r;
}

struct LengthRange {
    std::size_t min = 3;
    std::size_t max = 8;
};

struct CorpusConfig {
    std::size_t train_queries = 2000;
    std::size_t test_queries = 200;
    std::size_t responses_per_query = 2;
    LengthRange query_len{3, 6};
    LengthRange response_len{3, 10};
    LabelSource label_noise = LabelSource::clean;
    double bt_temperature = 1.0;
    /// Fraction of records whose first pair has |gap| < hard_gap_threshold.
    /// Unset means the natural gap distribution, with no constraint.
    std::optional<double> hard_fraction;
    double hard_gap_threshold = 1.0;
    /// Responses are drawn from softmax(tilt * w) with tilt uniform in [-tilt, tilt].
    double tilt = 1.5;
    double echo_probability = 0.15;
    std::size_t max_attempts = 2000;
    std::uint64_t seed = 0;

    void validate(const Vocab& vocab, std::size_t max_len) const {
        if (responses_per_query < 2) throw ConfigError("corpus.responses_per_query must be at least 2");
        if (train_queries == 0 && test_queries == 0) throw ConfigError("corpus: no queries requested");
        if (query_len.min == 0 || query_len.min > query_len.max) throw ConfigError("corpus.query_len: invalid range");
        if (response_len.min == 0 || response_len.min > response_len.max)
            throw ConfigError("corpus.response_len: invalid range");
        if (pairwise_length(query_len.max, response_len.max, response_len.max) > max_len)
            throw ConfigError("corpus: longest pairwise input (" +
                              std::to_string(pairwise_length(query_len.max, response_len.max, response_len.max)) +
                              ") exceeds model max_len " + std::to_string(max_len));
        if (label_noise == LabelSource::bt && !(bt_temperature > 0.0))
            throw ConfigError("corpus.bt_temperature must be positive");
        if (hard_fraction && (*hard_fraction < 0.0 || *hard_fraction > 1.0))
            throw ConfigError("corpus.hard_fraction must lie in [0, 1]");
        if (!(hard_gap_threshold > 0.0)) throw ConfigError("corpus.hard_gap_threshold must be positive");
        if (max_attempts == 0) throw ConfigError("corpus.max_attempts must be positive");
        vocab.validate();
    }
};

struct CorpusStats {
    std::size_t hard_requested = 0;
    std::size_t hard_achieved = 0;
    std::size_t easy_requested = 0;
    std::size_t easy_achieved = 0;
    std::size_t flipped_labels = 0;
};

struct Corpus {
    std::vector<PreferenceRecord> train;
    std::vector<PreferenceRecord> test;
    CorpusStats stats;
};

namespace detail {

inline TokenSequence random_query(Rng& rng, const Vocab& vocab, const LengthRange& len) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(len.min), static_cast<std::int64_t>(len.max)));
    std::vector<TokenId> ids(n);
    for (auto& id : ids)
        id = static_cast<TokenId>(rng.uniform_int(Vocab::first_content, static_cast<std::int64_t>(vocab.size) - 1));
    return query_seq(std::move(ids));
}

inline TokenSequence biased_response(Rng& rng, const Vocab& vocab, const GroundTruthReward& gt,
                                     const TokenSequence& query, const CorpusConfig& cfg) {
    const double tilt = rng.uniform(-cfg.tilt, cfg.tilt);
    std::vector<double> w(vocab.content_count());
    double mx = -1e300;
    for (std::size_t i = 0; i < w.size(); ++i) mx = std::max(mx, tilt * gt.token_weights[Vocab::first_content + i]);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(tilt * gt.token_weights[Vocab::first_content + i] - mx);
    const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.response_len.min),
                                                            static_cast<std::int64_t>(cfg.response_len.max)));
    std::vector<TokenId> ids(n);
    for (auto& id : ids) {
        if (rng.bernoulli(cfg.echo_probability))
            id = query.ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(query.size()) - 1))];
        else
            id = static_cast<TokenId>(Vocab::first_content + rng.categorical(w));
    }
    return response_seq(std::move(ids));
}

/// Generates one split. Records designated hard (by a seeded shuffle) need
/// |gap| < threshold on their first pair; the rest need |gap| >= threshold.
inline std::vector<PreferenceRecord> generate_split(const CorpusConfig& cfg, const GroundTruthReward& gt,
                                                    const Vocab& vocab, std::size_t count, const std::string& split,
                                                    bool noisy, std::set<std::vector<TokenId>>& seen_queries,
                                                    const ParameterStore* policy, CorpusStats& stats) {
    std::vector<PreferenceRecord> records;
    records.reserve(count);
    const std::uint64_t split_seed = derive_seed(cfg.seed, split);

    std::vector<char> hard(count, 0);
    if (cfg.hard_fraction) {
        std::vector<std::size_t> order(count);
        for (std::size_t i = 0; i < count; ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(split_seed, "hardness"));
        shuffle_rng.shuffle(std::span(order));
        const auto n_hard = static_cast<std::size_t>(std::llround(*cfg.hard_fraction * static_cast<double>(count)));
        for (std::size_t i = 0; i < n_hard; ++i) hard[order[i]] = 1;
        stats.hard_requested += n_hard;
        stats.easy_requested += count - n_hard;
    }

    std::size_t failures = 0;
    for (std::size_t q = 0; q < count; ++q) {
        const std::uint64_t rec_seed = derive_seed(split_seed, q);
        TokenSequence query;
        for (std::uint64_t retry = 0;; ++retry) {
            Rng qrng(derive_seed(rec_seed, 1000003ULL + retry));
            query = random_query(qrng, vocab, cfg.query_len);
            if (seen_queries.insert(query.ids).second) break;
            if (retry > 10000) throw DataError("corpus: cannot draw enough distinct queries for split " + split);
        }

        std::vector<TokenSequence> responses;
        std::vector<double> rewards;
        bool ok = false;
        for (std::size_t attempt = 0; attempt < cfg.max_attempts && !ok; ++attempt) {
            Rng rng(derive_seed(rec_seed, attempt));
            responses.clear();
            rewards.clear();
            for (std::size_t k = 0; k < cfg.responses_per_query; ++k) {
                if (k >= 2 && policy != nullptr) {
                    responses.push_back(sample(*policy, query, DecodeStrategy::with_temperature(1.0),
                                               cfg.response_len.max, rng.next_u64()));
                } else {
                    responses.push_back(biased_response(rng, vocab, gt, query, cfg));
                }
                rewards.push_back(ground_truth_reward(gt, query, responses.back()));
            }
            ok = true;
            for (std::size_t i = 0; i < responses.size() && ok; ++i)
                for (std::size_t j = i + 1; j < responses.size() && ok; ++j)
                    ok = !(responses[i] == responses[j]) && rewards[i] != rewards[j];
            if (ok && cfg.hard_fraction) {
                const bool is_hard = std::abs(rewards[0] - rewards[1]) < cfg.hard_gap_threshold;
                ok = is_hard == static_cast<bool>(hard[q]);
            }
        }
        if (!ok) {
            ++failures;
            continue;
        }
        if (cfg.hard_fraction) ++(hard[q] ? stats.hard_achieved : stats.easy_achieved);

        PreferenceRecord rec;
        rec.query = query;
        rec.responses = responses;
        Rng label_rng(derive_seed(rec_seed, "labels"));
        for (std::size_t i = 0; i < responses.size(); ++i)
            for (std::size_t j = i + 1; j < responses.size(); ++j) {
                const double gap = rewards[i] - rewards[j];
                bool i_wins = gap > 0.0;
                const bool clean_winner = i_wins;
                if (noisy) i_wins = label_rng.bernoulli(1.0 / (1.0 + std::exp(-gap / cfg.bt_temperature)));
                if (i_wins != clean_winner) ++stats.flipped_labels;
                PairLabel p;
                p.w = i_wins ? i : j;
                p.l = i_wins ? j : i;
                p.source = noisy ? LabelSource::bt : LabelSource::clean;
                p.gt_gap = rewards[p.w] - rewards[p.l];
                rec.pairs.push_back(p);
            }
        records.push_back(std::move(rec));
    }
    if (failures > 0)
        throw DataError("corpus: hardness mix infeasible for split " + split + ": achieved " +
                        std::to_string(stats.hard_achieved) + " of " + std::to_string(stats.hard_requested) +
                        " hard and " + std::to_string(stats.easy_achieved) + " of " +
                        std::to_string(stats.easy_requested) + " easy records within " +
                        std::to_string(cfg.max_attempts) + " attempts each");
    return records;
}

} // namespace detail

/// Seeded, reproducible train/test corpus. Train labels follow cfg.label_noise;
/// test labels are always the ground-truth ordering. Optionally responses
/// beyond the first two are sampled from a policy checkpoint.
inline Corpus generate_corpus(const CorpusConfig& cfg, const GroundTruthReward& gt, const Vocab& vocab,
                              std::size_t max_len, const ParameterStore* policy = nullptr) {
    cfg.validate(vocab, max_len);
    if (gt.token_weights.size() != vocab.size)
        throw ConfigError("ground truth has " + std::to_string(gt.token_weights.size()) +
                          " token weights but the vocabulary has " + std::to_string(vocab.size));
    if (policy != nullptr && policy->kind() != ModelKind::policy)
        throw ConfigError("corpus: response sampler must be a policy checkpoint");
    Corpus corpus;
    std::set<std::vector<TokenId>> seen;
    corpus.train = detail::generate_split(cfg, gt, vocab, cfg.train_queries, "train",
                                          cfg.label_noise == LabelSource::bt, seen, policy, corpus.stats);
    corpus.test = detail::generate_split(cfg, gt, vocab, cfg.test_queries, "test", false, seen, policy, corpus.stats);
    return corpus;
}

} // namespace prefdiff
