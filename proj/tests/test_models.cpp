#include <cmath>

#include "test_util.hpp"

using namespace prefdiff;
using testutil::query;
using testutil::seq;

namespace {

const BackboneConfig kSmall{1, 8, 2, 32};

} // namespace

TEST(Policy, UniformLogitsGiveUniformLogProb) {
    const auto p = testutil::uniform_policy(64);
    const auto x = query({7, 8, 9});
    const auto y = seq({10, 11, 12, 13, 14});
    EXPECT_NEAR(logprob_value(p, x, y, false), -5.0 * std::log(64.0), 1e-12);
    EXPECT_NEAR(logprob_value(p, x, y, true), -std::log(64.0), 1e-12);
}

TEST(Policy, LastOnlyBackboneMatchesFullForward) {
    const auto store = init_model(ModelKind::policy, Vocab{32}, BackboneConfig{2, 16, 4, 32}, 11);
    const ModelInput in = policy_input(query({6, 7, 8}), seq({9, 10, 11, 12}));
    ad::Tape t1, t2;
    const BoundModel m1(store, t1, false), m2(store, t2, false);
    const ad::Var full = backbone(m1, in, false);
    const ad::Var last = backbone(m2, in, true);
    const std::size_t w = 16, rows = in.size();
    for (std::size_t j = 0; j < w; ++j) EXPECT_NEAR(full.value()[(rows - 1) * w + j], last.value()[j], 1e-12);
}

TEST(Policy, GreedyDecodeIsDeterministicAndTopOneMatchesIt) {
    const auto store = init_model(ModelKind::policy, Vocab{32}, kSmall, 4);
    const auto x = query({6, 9, 12});
    const auto a = sample(store, x, DecodeStrategy::greedy(), 8, 1);
    const auto b = sample(store, x, DecodeStrategy::greedy(), 8, 2);
    EXPECT_EQ(a.ids, b.ids);
    for (double t : {0.3, 1.0, 5.0})
        EXPECT_EQ(sample(store, x, DecodeStrategy::top_k_sampling(1, t), 8, 7).ids, a.ids);
    EXPECT_EQ(sample(store, x, DecodeStrategy::with_temperature(1e-6), 8, 3).ids, a.ids);
}

TEST(Policy, SampledResponsesAreContentOnlyAndBounded) {
    const auto store = init_model(ModelKind::policy, Vocab{32}, kSmall, 5);
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto y = sample(store, query({6, 7}), DecodeStrategy::with_temperature(1.0), 6, s);
        EXPECT_GE(y.size(), 1u);
        EXPECT_LE(y.size(), 6u);
        for (TokenId id : y.ids) EXPECT_TRUE(Vocab{32}.is_content(id));
    }
}

TEST(Policy, SamplingRejectsBadStrategies) {
    const auto store = init_model(ModelKind::policy, Vocab{32}, kSmall, 5);
    EXPECT_THROW(sample(store, query({6}), DecodeStrategy::with_temperature(0.0), 4, 0), ConfigError);
    EXPECT_THROW(sample(store, query({6}), DecodeStrategy::top_k_sampling(0, 1.0), 4, 0), ConfigError);
    const auto rm = init_model(ModelKind::reward, Vocab{32}, kSmall, 5);
    EXPECT_THROW(sample(rm, query({6}), DecodeStrategy::greedy(), 4, 0), Error);
}

TEST(RewardModel, ScoresAreFiniteAndPure) {
    const auto rm = init_model(ModelKind::reward, Vocab{32}, kSmall, 6);
    const auto x = query({6, 7, 8});
    const double a = reward_value(rm, x, seq({9, 10}));
    const double b = reward_value(rm, x, seq({11, 12, 13}));
    EXPECT_TRUE(std::isfinite(a));
    EXPECT_TRUE(std::isfinite(b));
    EXPECT_EQ(a, reward_value(rm, x, seq({9, 10})));
}

TEST(DifferenceModel, SelfComparisonIsFiniteAndGenerallyNonzero) {
    const auto dm = init_model(ModelKind::difference, Vocab{32}, kSmall, 8);
    const auto x = query({6, 7, 8});
    const auto y = seq({9, 10, 11});
    const double s = difference_value(dm, x, y, y);
    EXPECT_TRUE(std::isfinite(s));
    EXPECT_NE(s, 0.0);
    EXPECT_EQ(s, difference_value(dm, x, y, y));
}

TEST(Models, OverlongInputIsRejected) {
    const auto rm = init_model(ModelKind::reward, Vocab{32}, BackboneConfig{1, 8, 2, 8}, 1);
    EXPECT_THROW(reward_value(rm, query({6, 7, 8}), seq({9, 10, 11, 12, 13})), DataError);
}

TEST(Models, OutOfVocabularyTokenIsRejected) {
    const auto rm = init_model(ModelKind::reward, Vocab{16}, kSmall, 1);
    EXPECT_THROW(reward_value(rm, query({6}), seq({40})), DataError);
}

TEST(Models, WrongHeadForKindIsRejected) {
    const auto p = init_model(ModelKind::policy, Vocab{16}, kSmall, 1);
    EXPECT_THROW(reward_value(p, query({6}), seq({7})), Error);
}

TEST(Config, BackboneValidation) {
    EXPECT_THROW((BackboneConfig{0, 8, 2, 32}.validate()), ConfigError);
    EXPECT_THROW((BackboneConfig{1, 10, 3, 32}.validate()), ConfigError);
    EXPECT_THROW((BackboneConfig{1, 8, 2, 4}.validate()), ConfigError);
    EXPECT_THROW((Vocab{4}.validate()), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    testutil::TempDir dir;
    for (auto kind : {ModelKind::policy, ModelKind::reward, ModelKind::difference}) {
        auto store = init_model(kind, Vocab{20}, kSmall, 17);
        store.get("tok_emb")[3] = 0.1 + 0.2; // a value with no short decimal form
        const std::string path = dir / (std::string(to_string(kind)) + ".json");
        save_checkpoint(store, path);
        const auto back = load_checkpoint(path);
        EXPECT_EQ(back.meta(), store.meta());
        ASSERT_EQ(back.params().size(), store.params().size());
        for (const auto& [name, a] : store.params()) EXPECT_EQ(back.get(name).values(), a.values()) << name;
        EXPECT_EQ(checkpoint_digest(back), checkpoint_digest(store));
        save_checkpoint(back, path + ".again");
        EXPECT_EQ(testutil::slurp(path), testutil::slurp(path + ".again"));
    }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    testutil::TempDir dir;
    const auto store = init_model(ModelKind::reward, Vocab{20}, kSmall, 1);
    const std::string path = dir / "m.json";
    save_checkpoint(store, path);
    std::string text = testutil::slurp(path);
    write_text_file(dir / "truncated.json", text.substr(0, text.size() / 2));
    EXPECT_THROW(load_checkpoint(dir / "truncated.json"), DataError);
    EXPECT_THROW(load_checkpoint(dir / "missing.json"), Error);
}

TEST(Checkpoint, Base64RoundTrip) {
    for (std::size_t n = 0; n < 10; ++n) {
        std::vector<std::uint8_t> bytes(n);
        for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(37 * i + 200);
        EXPECT_EQ(base64::decode(base64::encode(bytes)), bytes);
    }
    EXPECT_EQ(base64::encode({'M', 'a', 'n'}), "TWFu");
    EXPECT_THROW(base64::decode("T!Fu"), DataError);
}

TEST(Init, SameSeedSameParameters) {
    const auto a = init_model(ModelKind::difference, Vocab{20}, kSmall, 3);
    const auto b = init_model(ModelKind::difference, Vocab{20}, kSmall, 3);
    const auto c = init_model(ModelKind::difference, Vocab{20}, kSmall, 4);
    EXPECT_EQ(checkpoint_digest(a), checkpoint_digest(b));
    EXPECT_NE(checkpoint_digest(a), checkpoint_digest(c));
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
    Rng r1(42), r2(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(r1.next_u64(), r2.next_u64());
}
