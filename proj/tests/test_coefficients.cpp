#include <cmath>

#include "test_util.hpp"

using namespace prefdiff;
using testutil::query;
using testutil::seq;

namespace {

CoefficientConfig alpha(double a, double eps = 1e-2) {
    CoefficientConfig c;
    c.alpha = a;
    c.clamp_epsilon = eps;
    return c;
}

std::vector<PreferenceRecord> small_records() {
    PreferenceRecord r;
    r.query = query({6, 7, 8});
    r.responses = {seq({9, 10}), seq({11, 12, 13}), seq({14})};
    r.pairs = {{0, 1, LabelSource::clean, 1.5}, {2, 1, LabelSource::clean, 0.25}};
    PreferenceRecord s;
    s.query = query({8, 9});
    s.responses = {seq({15, 6}), seq({7, 7, 7})};
    s.pairs = {{1, 0, LabelSource::bt, -0.5}};
    return {r, s};
}

} // namespace

TEST(ApplyAlpha, Values) {
    EXPECT_NEAR(apply_alpha(0.5, alpha(0.5)), 0.70711, 1e-5);
    EXPECT_EQ(apply_alpha(-2.0, alpha(1.0)), 0.01);
    EXPECT_EQ(apply_alpha(3.7, alpha(1.0)), 3.7);
}

TEST(ApplyAlpha, ZeroExponentIsExactlyOne) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(apply_alpha(rng.normal(0, 100), alpha(0.0)), 1.0);
    EXPECT_EQ(apply_alpha(0.0, alpha(0.0)), 1.0);
}

TEST(ApplyAlpha, MonotoneInRaw) {
    for (double a : {0.25, 0.5, 1.0}) {
        double prev = 0.0;
        for (double raw = -1.0; raw < 10.0; raw += 0.125) {
            const double c = apply_alpha(raw, alpha(a));
            EXPECT_GT(c, 0.0);
            EXPECT_GE(c, prev);
            prev = c;
        }
    }
}

TEST(CoefficientConfig, Validation) {
    EXPECT_THROW(alpha(1.5).validate(), ConfigError);
    EXPECT_THROW(alpha(-0.1).validate(), ConfigError);
    EXPECT_THROW(alpha(0.5, 0.0).validate(), ConfigError);
    EXPECT_EQ(parse_coefficient_source("difference-model"), CoefficientSource::difference_model);
    EXPECT_EQ(parse_coefficient_source("reward"), CoefficientSource::reward_model);
    EXPECT_THROW(parse_coefficient_source("oracle"), ConfigError);
}

TEST(RawDifference, RewardModelSubtractsScores) {
    const auto rm = init_model(ModelKind::reward, Vocab{20}, BackboneConfig{1, 8, 2, 32}, 3);
    const PreferencePair p{query({6, 7}), seq({8, 9}), seq({10}), LabelSource::clean, 1.0};
    const double expect = reward_value(rm, p.query, p.y_w) - reward_value(rm, p.query, p.y_l);
    EXPECT_EQ(raw_difference(p, CoefficientSource::reward_model, &rm), expect);
    const PreferencePair same{query({6, 7}), seq({8, 9}), seq({8, 9}), LabelSource::clean, 0.0};
    EXPECT_EQ(raw_difference(same, CoefficientSource::reward_model, &rm), 0.0);
}

TEST(RawDifference, DifferenceModelScoresThePair) {
    const auto dm = init_model(ModelKind::difference, Vocab{20}, BackboneConfig{1, 8, 2, 32}, 3);
    const PreferencePair p{query({6, 7}), seq({8, 9}), seq({10}), LabelSource::clean, 1.0};
    EXPECT_EQ(raw_difference(p, CoefficientSource::difference_model, &dm), difference_value(dm, p.query, p.y_w, p.y_l));
}

TEST(RawDifference, WrongOrMissingModelIsRejected) {
    const auto rm = init_model(ModelKind::reward, Vocab{20}, BackboneConfig{1, 8, 2, 32}, 3);
    const PreferencePair p{query({6, 7}), seq({8, 9}), seq({10}), LabelSource::clean, 1.0};
    EXPECT_THROW(raw_difference(p, CoefficientSource::difference_model, &rm), ConfigError);
    EXPECT_THROW(raw_difference(p, CoefficientSource::reward_model, nullptr), ConfigError);
    try {
        raw_difference(p, CoefficientSource::difference_model, &rm);
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("difference"), std::string::npos);
    }
}

TEST(Annotate, NoSourceWritesUnitCoefficientsAndKeepsEverythingElse) {
    const auto records = small_records();
    const auto out = annotate_dataset(records, CoefficientConfig{}, nullptr);
    ASSERT_EQ(out.size(), records.size());
    for (std::size_t r = 0; r < out.size(); ++r) {
        EXPECT_EQ(out[r].query, records[r].query);
        EXPECT_EQ(out[r].responses, records[r].responses);
        for (std::size_t k = 0; k < out[r].pairs.size(); ++k) {
            EXPECT_EQ(out[r].pairs[k].coefficient, 1.0);
            EXPECT_EQ(out[r].pairs[k].w, records[r].pairs[k].w);
            EXPECT_EQ(out[r].pairs[k].gt_gap, records[r].pairs[k].gt_gap);
        }
    }
    EXPECT_FALSE(records[0].pairs[0].coefficient.has_value()); // input untouched
}

TEST(Annotate, IsPureAndCountsClampedPairs) {
    const auto dm = init_model(ModelKind::difference, Vocab{20}, BackboneConfig{1, 8, 2, 32}, 5);
    CoefficientConfig cfg = alpha(0.5);
    cfg.source = CoefficientSource::difference_model;
    AnnotationStats s1, s2;
    const auto a = annotate_dataset(small_records(), cfg, &dm, &s1);
    const auto b = annotate_dataset(small_records(), cfg, &dm, &s2);
    EXPECT_EQ(records_to_jsonl(a), records_to_jsonl(b));
    EXPECT_EQ(s1.pair_count, 3u);
    std::size_t clamped = 0;
    for (const auto& r : a)
        for (const auto& p : r.pairs) {
            ASSERT_TRUE(p.raw_difference && p.coefficient);
            EXPECT_EQ(*p.coefficient, apply_alpha(*p.raw_difference, cfg));
            clamped += *p.raw_difference < cfg.clamp_epsilon;
        }
    EXPECT_EQ(s1.clamped_pair_count, clamped);
}

TEST(Annotate, MissingCheckpointIsAConfigError) {
    CoefficientConfig cfg;
    cfg.source = CoefficientSource::reward_model;
    EXPECT_THROW(annotate_dataset(small_records(), cfg, nullptr), ConfigError);
}
