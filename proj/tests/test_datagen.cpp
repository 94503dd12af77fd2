#include <cmath>
#include <set>
#include <unordered_set>

#include "test_util.hpp"

using namespace prefdiff;
using testutil::query;
using testutil::seq;

namespace {

// Second scorer written without reference to the library's: a hash-set echo
// lookup and an index loop. Additions happen in the same order (per token,
// weight then echo, then the length term), so results must agree bitwise.
double reference_reward(const GroundTruthReward& gt, const std::vector<TokenId>& x, const std::vector<TokenId>& y) {
    const std::unordered_set<TokenId> in_query(x.begin(), x.end());
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        total += gt.token_weights.at(y[i]);
        if (in_query.count(y[i]) > 0) total += gt.echo_bonus;
    }
    const long excess = static_cast<long>(y.size()) - static_cast<long>(gt.target_length);
    if (excess > 0) total -= gt.length_penalty * static_cast<double>(excess);
    return total;
}

CorpusConfig small_corpus(std::size_t train, std::size_t test, std::uint64_t seed) {
    CorpusConfig c;
    c.train_queries = train;
    c.test_queries = test;
    c.seed = seed;
    return c;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

TEST(GroundTruth, AgreesBitwiseWithIndependentScorer) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 17);
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto x = detail::random_query(rng, vocab, LengthRange{1, 6});
        const auto y = detail::random_query(rng, vocab, LengthRange{1, 14});
        EXPECT_EQ(ground_truth_reward(gt, x, response_seq(y.ids)), reference_reward(gt, x.ids, y.ids));
    }
}

TEST(GroundTruth, ZeroConfigScoresZero) {
    GroundTruthConfig cfg;
    cfg.weight_scale = 0.0;
    cfg.echo_bonus = 0.0;
    cfg.length_penalty = 0.0;
    const auto gt = make_ground_truth(Vocab{32}, cfg, 1);
    EXPECT_EQ(ground_truth_reward(gt, query({6, 7}), seq({6, 7, 8, 9, 10, 11, 12, 13, 14, 15})), 0.0);
}

TEST(GroundTruth, EchoTermVanishesWhenQueryIsDisjoint) {
    const auto gt = make_ground_truth(Vocab{32}, GroundTruthConfig{}, 2);
    const auto y = seq({8, 9, 10});
    const double with_echo = ground_truth_reward(gt, query({8, 20}), y);
    const double without = ground_truth_reward(gt, query({20, 21}), y);
    EXPECT_NEAR(with_echo - without, gt.echo_bonus, 1e-12);
}

TEST(GroundTruth, SpecialsCarryNoWeightAndJsonRoundTrips) {
    const auto gt = make_ground_truth(Vocab{32}, GroundTruthConfig{}, 3);
    for (TokenId id = 0; id < Vocab::first_content; ++id) EXPECT_EQ(gt.token_weights[id], 0.0);
    const auto back = GroundTruthReward::from_json(Json::parse(gt.to_json().dump()));
    EXPECT_EQ(back.token_weights, gt.token_weights);
    EXPECT_THROW(GroundTruthReward::from_json(Json{{"echo_bonus", 1}}), DataError);
}

TEST(Corpus, CleanLabelsFollowTheGroundTruth) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 4);
    auto cfg = small_corpus(300, 50, 4);
    cfg.responses_per_query = 3;
    const auto corpus = generate_corpus(cfg, gt, vocab, 40);
    for (const auto* split : {&corpus.train, &corpus.test})
        for (const auto& r : *split) {
            ASSERT_EQ(r.pairs.size(), 3u);
            for (const auto& p : r.pairs) {
                const double rw = ground_truth_reward(gt, r.query, r.responses[p.w]);
                const double rl = ground_truth_reward(gt, r.query, r.responses[p.l]);
                EXPECT_GT(rw, rl);
                EXPECT_EQ(p.gt_gap, rw - rl);
            }
        }
}

TEST(Corpus, BradleyTerryFlipRateMatchesClosedForm) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 5);
    auto cfg = small_corpus(10000, 1, 5);
    cfg.label_noise = LabelSource::bt;
    const auto corpus = generate_corpus(cfg, gt, vocab, 40);
    double expected = 0.0;
    std::size_t flips = 0, n = 0;
    for (const auto& r : corpus.train)
        for (const auto& p : r.pairs) {
            expected += 1.0 - sigmoid(std::abs(p.gt_gap));
            flips += p.gt_gap < 0.0;
            ++n;
        }
    ASSERT_EQ(n, 10000u);
    EXPECT_NEAR(static_cast<double>(flips) / n, expected / n, 0.03);
    EXPECT_EQ(corpus.stats.flipped_labels, flips);
    for (const auto& r : corpus.test)
        for (const auto& p : r.pairs) EXPECT_GT(p.gt_gap, 0.0);
}

TEST(Corpus, ColdBradleyTerryApproachesCleanLabels) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 6);
    auto cfg = small_corpus(500, 1, 6);
    cfg.label_noise = LabelSource::bt;
    cfg.bt_temperature = 1e-6;
    const auto corpus = generate_corpus(cfg, gt, vocab, 40);
    for (const auto& r : corpus.train)
        for (const auto& p : r.pairs)
            if (std::abs(p.gt_gap) > 1e-3) EXPECT_GT(p.gt_gap, 0.0);
}

TEST(Corpus, HardFractionIsMetExactly) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 7);
    auto cfg = small_corpus(400, 100, 7);
    cfg.hard_fraction = 0.3;
    const auto corpus = generate_corpus(cfg, gt, vocab, 40);
    std::size_t hard = 0;
    for (const auto& r : corpus.train) hard += std::abs(r.pairs[0].gt_gap) < cfg.hard_gap_threshold;
    EXPECT_EQ(hard, 120u);
    EXPECT_EQ(corpus.stats.hard_achieved, corpus.stats.hard_requested);
    EXPECT_EQ(corpus.stats.easy_achieved, corpus.stats.easy_requested);
}

TEST(Corpus, InfeasibleHardnessReportsAchievedCounts) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 8);
    auto cfg = small_corpus(20, 1, 8);
    cfg.hard_fraction = 1.0;
    cfg.hard_gap_threshold = 1e-9;
    cfg.max_attempts = 3;
    try {
        generate_corpus(cfg, gt, vocab, 40);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("achieved"), std::string::npos);
    }
}

TEST(Corpus, SplitsAreDisjointAndSeeded) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 9);
    const auto a = generate_corpus(small_corpus(300, 100, 9), gt, vocab, 40);
    const auto b = generate_corpus(small_corpus(300, 100, 9), gt, vocab, 40);
    const auto c = generate_corpus(small_corpus(300, 100, 10), gt, vocab, 40);
    EXPECT_EQ(records_to_jsonl(a.train), records_to_jsonl(b.train));
    EXPECT_EQ(records_to_jsonl(a.test), records_to_jsonl(b.test));
    EXPECT_NE(records_to_jsonl(a.train), records_to_jsonl(c.train));
    std::set<std::vector<TokenId>> train_queries;
    for (const auto& r : a.train) train_queries.insert(r.query.ids);
    for (const auto& r : a.test) EXPECT_EQ(train_queries.count(r.query.ids), 0u);
}

TEST(Corpus, PolicySampledResponsesAreUsedBeyondTheFirstTwo) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 11);
    const auto policy = init_model(ModelKind::policy, vocab, BackboneConfig{1, 8, 2, 40}, 2);
    auto cfg = small_corpus(20, 5, 11);
    cfg.responses_per_query = 3;
    const auto with = generate_corpus(cfg, gt, vocab, 40, &policy);
    const auto without = generate_corpus(cfg, gt, vocab, 40);
    EXPECT_NE(records_to_jsonl(with.train), records_to_jsonl(without.train));
    const auto rm = init_model(ModelKind::reward, vocab, BackboneConfig{1, 8, 2, 40}, 2);
    EXPECT_THROW(generate_corpus(cfg, gt, vocab, 40, &rm), ConfigError);
}

TEST(Corpus, ConfigValidationNamesTheField) {
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 1);
    auto cfg = small_corpus(10, 10, 1);
    cfg.responses_per_query = 1;
    EXPECT_THROW(generate_corpus(cfg, gt, vocab, 40), ConfigError);
    cfg = small_corpus(10, 10, 1);
    cfg.response_len = {3, 30};
    try {
        generate_corpus(cfg, gt, vocab, 40);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("max_len"), std::string::npos);
    }
}

TEST(Jsonl, GeneratedCorpusRoundTrips) {
    testutil::TempDir dir;
    const Vocab vocab{64};
    const auto gt = make_ground_truth(vocab, GroundTruthConfig{}, 12);
    auto cfg = small_corpus(100, 20, 12);
    cfg.label_noise = LabelSource::bt;
    cfg.responses_per_query = 3;
    auto corpus = generate_corpus(cfg, gt, vocab, 40);
    corpus.train[0].pairs[0].raw_difference = 0.1 + 0.2;
    corpus.train[0].pairs[0].coefficient = std::sqrt(0.3);
    write_jsonl(dir / "train.jsonl", corpus.train);
    const auto back = ingest_jsonl(dir / "train.jsonl", vocab, 40);
    EXPECT_EQ(back, corpus.train);
    write_jsonl(dir / "again.jsonl", back);
    EXPECT_EQ(testutil::slurp(dir / "train.jsonl"), testutil::slurp(dir / "again.jsonl"));
}

TEST(Jsonl, WinnerEqualToLoserIsRejectedAtItsLine) {
    const std::string good = R"({"query":[6,7],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1.0}]})";
    const std::string bad = R"({"query":[6,7],"responses":[[8],[9]],"pairs":[{"w":1,"l":1,"source":"clean","gt_gap":0.0}]})";
    try {
        parse_jsonl(good + "\n" + bad + "\n", Vocab{64}, 40, "data.jsonl");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("data.jsonl:2"), std::string::npos) << e.what();
    }
}

TEST(Jsonl, TruncatedFinalLineRejectsWholeFile) {
    const std::string good = R"({"query":[6,7],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1.0}]})";
    const std::string text = good + "\n" + good.substr(0, 30);
    try {
        parse_jsonl(text, Vocab{64}, 40, "d");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    }
}

TEST(Jsonl, MalformedRecordsAreRejected) {
    const Vocab v{64};
    auto reject = [&](const std::string& line) { EXPECT_THROW(parse_jsonl(line + "\n", v, 40, "d"), DataError) << line; };
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"tie","gt_gap":0}]})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":0,"tie":true}]})");
    reject(R"({"query":[6],"responses":[[8],[8]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1}]})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":5,"source":"clean","gt_gap":1}]})");
    reject(R"({"query":[6],"responses":[[8],[99]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1}]})");
    reject(R"({"query":[2],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1}]})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[]})");
    reject(R"({"query":[6],"responses":[[8]],"pairs":[{"w":0,"l":0,"source":"clean","gt_gap":1}]})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1}],"extra":1})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"source":"clean","gt_gap":1,"coefficient":-1}]})");
    reject(R"({"query":[6],"responses":[[8],[9]],"pairs":[{"w":0,"l":1,"gt_gap":1}]})");
    EXPECT_THROW(parse_jsonl("\n\n", v, 40, "d"), DataError);
    EXPECT_THROW(ingest_jsonl("/nonexistent/file.jsonl", v, 40), DataError);
}
