#pragma once

// Training loops for the policy (SFT, alignment) and the two scoring models,
// plus the file-level stages that read configs and write run directories:
//   <out>/config.json, <out>/checkpoints/, <out>/logs/steps.jsonl

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alignment_losses.hpp"
#include "checkpoint.hpp"
#include "coefficients.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "loss_bundle.hpp"
#include "optim.hpp"
#include "scoring_losses.hpp"
#include "transformer.hpp"

namespace prefdiff {

namespace fs = std::filesystem;

/// Appends one JSON object per line. Lines are flushed as written so a
/// crashed run keeps the steps it completed.
class StepLogger {
public:
    StepLogger() = default;
    explicit StepLogger(const std::string& path) : out_(std::make_unique<std::ofstream>(path, std::ios::binary)) {
        if (!*out_) throw Error("cannot open step log '" + path + "'");
    }

    void write(const Json& record) {
        records_.push_back(record);
        if (out_) {
            *out_ << record.dump() << '\n';
            out_->flush();
        }
    }

    const std::vector<Json>& records() const noexcept { return records_; }

private:
    std::unique_ptr<std::ofstream> out_;
    std::vector<Json> records_;
};

struct StepInfo {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double grad_norm = 0.0;
};

using BatchLoss = std::function<Loss(const BoundModel&, std::span<const std::size_t> indices, std::size_t epoch)>;
using StepHook = std::function<void(const StepInfo&, const LossBundle&)>;

/// Minibatch Adam over `n` items. Each epoch visits the items in an order
/// shuffled by a seed derived from (seed, epoch). A non-finite loss aborts
/// with the step index.
inline void train_loop(ParameterStore& store, std::size_t n, const TrainConfig& cfg, std::uint64_t seed,
                       const BatchLoss& loss_fn, const StepHook& on_step,
                       const std::function<void(std::size_t)>& on_epoch = {}) {
    cfg.validate();
    if (n == 0) throw DataError("training set is empty");
    Adam adam(cfg.adam());
    std::vector<std::size_t> order(n);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, "epoch/" + std::to_string(epoch)));
        rng.shuffle(std::span(order));
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
            ad::Tape tape;
            const BoundModel m(store, tape, true);
            const Loss loss = loss_fn(m, idx, epoch);
            if (!std::isfinite(loss.bundle.total))
                throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step));
            const auto grads = m.gradients(tape.backward(loss.value));
            const double norm = adam.step(store, grads);
            if (!std::isfinite(norm))
                throw DivergenceError("training diverged: non-finite gradient at step " + std::to_string(step));
            if (on_step) on_step({step, epoch, norm}, loss.bundle);
            ++step;
        }
        if (on_epoch) on_epoch(epoch);
    }
}

template <typename T>
std::vector<T> gather_items(const std::vector<T>& items, std::span<const std::size_t> idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(items[i]);
    return out;
}

/// Response with the highest ground-truth reward in each record, recovered
/// from the recorded gaps: over a complete comparison set, summing signed
/// gaps per response ranks responses exactly as the reward does.
inline std::vector<std::pair<TokenSequence, TokenSequence>> demonstrations(const std::vector<PreferenceRecord>& records) {
    std::vector<std::pair<TokenSequence, TokenSequence>> out;
    for (const auto& r : records) {
        std::vector<double> score(r.responses.size(), 0.0);
        for (const auto& p : r.pairs) {
            score[p.w] += p.gt_gap;
            score[p.l] -= p.gt_gap;
        }
        const auto best = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
        out.emplace_back(r.query, r.responses[best]);
    }
    return out;
}

inline Json step_record(const StepInfo& s, const LossBundle& b) {
    return {{"step", s.step},
            {"epoch", s.epoch},
            {"loss_total", b.total},
            {"loss_components", b.components},
            {"grad_norm", s.grad_norm}};
}

// ---------------------------------------------------------------------------
// In-memory trainers
// ---------------------------------------------------------------------------

inline void train_sft(ParameterStore& policy, const std::vector<std::pair<TokenSequence, TokenSequence>>& demos,
                      const TrainConfig& cfg, std::uint64_t seed, StepLogger& log) {
    train_loop(
        policy, demos.size(), cfg, seed,
        [&](const BoundModel& m, std::span<const std::size_t> idx, std::size_t) {
            const auto batch = gather_items(demos, idx);
            return sft_loss(m, batch);
        },
        [&](const StepInfo& s, const LossBundle& b) {
            Json rec = step_record(s, b);
            rec["stage"] = "sft";
            rec["seed"] = seed;
            log.write(rec);
        });
}

inline void train_reward_model(ParameterStore& model, const std::vector<PreferencePair>& pairs, const TrainConfig& cfg,
                               std::uint64_t seed, StepLogger& log) {
    train_loop(
        model, pairs.size(), cfg, seed,
        [&](const BoundModel& m, std::span<const std::size_t> idx, std::size_t) {
            const auto batch = gather_items(pairs, idx);
            return bt_reward_loss(m, batch);
        },
        [&](const StepInfo& s, const LossBundle& b) {
            Json rec = step_record(s, b);
            rec["stage"] = "train-rm";
            rec["seed"] = seed;
            log.write(rec);
        });
}

/// The regularizer sampling plan is redrawn every epoch from (cfg.seed, epoch).
inline void train_difference_model(ParameterStore& model, const std::vector<PreferencePair>& pairs,
                                   const TrainConfig& optim, const DiffTrainConfig& cfg, StepLogger& log) {
    cfg.validate();
    std::vector<PairSampling> plan;
    std::size_t plan_epoch = static_cast<std::size_t>(-1);
    TrainConfig t = optim;
    t.epochs = cfg.epochs;
    train_loop(
        model, pairs.size(), t, cfg.seed,
        [&](const BoundModel& m, std::span<const std::size_t> idx, std::size_t epoch) {
            if (epoch != plan_epoch) {
                plan = sampling_plan(pairs.size(), derive_seed(cfg.seed, "sampling/" + std::to_string(epoch)));
                plan_epoch = epoch;
            }
            const auto batch = gather_items(pairs, idx);
            const auto batch_plan = gather_items(plan, idx);
            return diff_total_loss(m, batch, batch_plan, cfg);
        },
        [&](const StepInfo& s, const LossBundle& b) {
            Json rec = step_record(s, b);
            rec["stage"] = "train-diff";
            rec["seed"] = cfg.seed;
            log.write(rec);
        });
}

struct AlignLogContext {
    std::optional<double> alpha;
    std::size_t clamped_pair_count = 0;
};

inline void train_alignment(ParameterStore& policy, const ReferenceSnapshot& ref,
                            const std::vector<AnnotatedPair>& pairs, const TrainConfig& optim, const AlignConfig& cfg,
                            std::uint64_t seed, const AlignLogContext& ctx, StepLogger& log) {
    cfg.validate();
    ref.check_compatible(policy);
    if (cfg.use_coefficients)
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (!pairs[i].annotated)
                throw ConfigError(cfg.method_name() + " needs annotated coefficients, but pair " + std::to_string(i) +
                                  " has none; run annotate first");
    train_loop(
        policy, pairs.size(), optim, seed,
        [&](const BoundModel& m, std::span<const std::size_t> idx, std::size_t) {
            const auto batch = gather_items(pairs, idx);
            return alignment_loss(m, ref, batch, cfg);
        },
        [&](const StepInfo& s, const LossBundle& b) {
            log.write({{"step", s.step},
                       {"epoch", s.epoch},
                       {"method", cfg.method_name()},
                       {"alpha", ctx.alpha ? Json(*ctx.alpha) : Json(nullptr)},
                       {"loss_total", b.total},
                       {"loss_components", b.components},
                       {"clamped_pair_count", ctx.clamped_pair_count},
                       {"seed", seed}});
        });
}

// ---------------------------------------------------------------------------
// File-level stages
// ---------------------------------------------------------------------------

namespace detail {

inline void prepare_run_dir(const RunConfig& cfg) {
    fs::create_directories(fs::path(cfg.out) / "checkpoints");
    fs::create_directories(fs::path(cfg.out) / "logs");
    Json j = cfg.to_json();
    j["config_digest"] = hex_digest(cfg.digest());
    write_text_file((fs::path(cfg.out) / "config.json").string(), j.dump(2) + "\n");
}

inline std::string step_log_path(const RunConfig& cfg) { return (fs::path(cfg.out) / "logs" / "steps.jsonl").string(); }
inline std::string checkpoint_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out) / "checkpoints" / name).string();
}

inline void require_path(const std::string& value, const char* field) {
    if (value.empty()) throw ConfigError(std::string(field) + ": required path is not set");
    if (!fs::exists(value)) throw ConfigError(std::string(field) + ": path '" + value + "' does not exist");
}

inline ParameterStore load_kind(const std::string& path, ModelKind kind, const char* field) {
    require_path(path, field);
    ParameterStore s = load_checkpoint(path);
    if (s.kind() != kind)
        throw ConfigError(std::string(field) + ": expected a " + to_string(kind) + " checkpoint, got " +
                          to_string(s.kind()));
    return s;
}

} // namespace detail

/// Writes <out>/train.jsonl, test.jsonl, ground_truth.json and stats.json.
inline Corpus run_gen_data(const RunConfig& cfg) {
    cfg.validate();
    CorpusConfig c = cfg.corpus;
    c.seed = derive_seed(cfg.seed, "corpus");
    const GroundTruthReward gt = make_ground_truth(cfg.vocab(), cfg.ground_truth, derive_seed(cfg.seed, "judge"));
    std::optional<ParameterStore> sampler;
    if (!cfg.policy.empty()) sampler = detail::load_kind(cfg.policy, ModelKind::policy, "policy");
    const Corpus corpus = generate_corpus(c, gt, cfg.vocab(), cfg.model.max_len, sampler ? &*sampler : nullptr);
    fs::create_directories(cfg.out);
    Json j = cfg.to_json();
    j["config_digest"] = hex_digest(cfg.digest());
    write_text_file((fs::path(cfg.out) / "config.json").string(), j.dump(2) + "\n");
    write_jsonl((fs::path(cfg.out) / "train.jsonl").string(), corpus.train);
    write_jsonl((fs::path(cfg.out) / "test.jsonl").string(), corpus.test);
    write_text_file((fs::path(cfg.out) / "ground_truth.json").string(), gt.to_json().dump() + "\n");
    const Json stats{{"train_records", corpus.train.size()},
                     {"test_records", corpus.test.size()},
                     {"hard_requested", corpus.stats.hard_requested},
                     {"hard_achieved", corpus.stats.hard_achieved},
                     {"easy_requested", corpus.stats.easy_requested},
                     {"easy_achieved", corpus.stats.easy_achieved},
                     {"flipped_labels", corpus.stats.flipped_labels}};
    write_text_file((fs::path(cfg.out) / "stats.json").string(), stats.dump(2) + "\n");
    return corpus;
}

/// Trains the SFT policy; writes checkpoints/policy.json and the frozen
/// reference copy checkpoints/reference.json.
inline ParameterStore run_sft(const RunConfig& cfg) {
    cfg.validate();
    detail::require_path(cfg.train, "train");
    const auto records = ingest_jsonl(cfg.train, cfg.vocab(), cfg.model.max_len);
    detail::prepare_run_dir(cfg);
    ParameterStore policy = init_model(ModelKind::policy, cfg.vocab(), cfg.model, derive_seed(cfg.seed, "init/policy"));
    StepLogger log(detail::step_log_path(cfg));
    train_sft(policy, demonstrations(records), cfg.optim, derive_seed(cfg.seed, "train/sft"), log);
    save_checkpoint(policy, detail::checkpoint_path(cfg, "policy.json"));
    save_checkpoint(policy, detail::checkpoint_path(cfg, "reference.json"));
    return policy;
}

/// Trains a reward (BT) or difference model; writes checkpoints/model.json.
inline ParameterStore run_scoring_training(const RunConfig& cfg, ModelKind kind) {
    cfg.validate();
    if (kind == ModelKind::policy) throw ConfigError("scoring training needs a reward or difference model kind");
    detail::require_path(cfg.train, "train");
    const auto records = ingest_jsonl(cfg.train, cfg.vocab(), cfg.model.max_len);
    detail::prepare_run_dir(cfg);
    ParameterStore model = init_model(kind, cfg.vocab(), cfg.model, derive_seed(cfg.seed, "init/scorer"));
    StepLogger log(detail::step_log_path(cfg));
    const auto pairs = to_pairs(records);
    if (kind == ModelKind::reward) {
        train_reward_model(model, pairs, cfg.optim, derive_seed(cfg.seed, "train/scorer"), log);
    } else {
        DiffTrainConfig d = cfg.diff;
        d.epochs = cfg.optim.epochs;
        d.seed = derive_seed(cfg.seed, "train/scorer");
        train_difference_model(model, pairs, cfg.optim, d, log);
    }
    save_checkpoint(model, detail::checkpoint_path(cfg, "model.json"));
    return model;
}

inline std::string annotation_meta_path(const std::string& dataset) { return dataset + ".meta.json"; }

/// Writes <out>/annotated.jsonl and its sidecar <out>/annotated.jsonl.meta.json.
inline AnnotationStats run_annotate(const RunConfig& cfg) {
    cfg.validate();
    detail::require_path(cfg.train, "train");
    const auto records = ingest_jsonl(cfg.train, cfg.vocab(), cfg.model.max_len);
    std::optional<ParameterStore> scorer;
    if (cfg.coefficients.source != CoefficientSource::none)
        scorer = detail::load_kind(cfg.scorer, required_kind(cfg.coefficients.source), "scorer");
    AnnotationStats stats;
    const auto annotated = annotate_dataset(records, cfg.coefficients, scorer ? &*scorer : nullptr, &stats);
    fs::create_directories(cfg.out);
    Json j = cfg.to_json();
    j["config_digest"] = hex_digest(cfg.digest());
    write_text_file((fs::path(cfg.out) / "config.json").string(), j.dump(2) + "\n");
    const std::string path = (fs::path(cfg.out) / "annotated.jsonl").string();
    write_jsonl(path, annotated);
    write_text_file(annotation_meta_path(path), stats.to_json(cfg.coefficients).dump(2) + "\n");
    return stats;
}

/// Aligns the policy from its SFT checkpoint; writes checkpoints/policy.json.
inline ParameterStore run_alignment(const RunConfig& cfg) {
    cfg.validate();
    detail::require_path(cfg.train, "train");
    ParameterStore policy = detail::load_kind(cfg.policy, ModelKind::policy, "policy");
    const std::string ref_path = cfg.reference.empty() ? cfg.policy : cfg.reference;
    const ReferenceSnapshot ref(detail::load_kind(ref_path, ModelKind::policy, "reference"));
    ref.check_compatible(policy);
    const auto records = ingest_jsonl(cfg.train, policy.vocab(), policy.config().max_len);
    const auto pairs = to_annotated_pairs(records);
    if (cfg.align.use_coefficients)
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (!pairs[i].annotated)
                throw ConfigError(cfg.align.method_name() + " needs annotated coefficients, but pair " +
                                  std::to_string(i) + " of '" + cfg.train + "' has none; run annotate first");

    AlignLogContext ctx;
    if (fs::exists(annotation_meta_path(cfg.train))) {
        const Json meta = Json::parse(read_text_file(annotation_meta_path(cfg.train)));
        if (cfg.align.use_coefficients) ctx.alpha = meta.value("alpha", 0.0);
        ctx.clamped_pair_count = meta.value("clamped_pair_count", std::size_t{0});
    }
    if (!cfg.align.use_coefficients) ctx.clamped_pair_count = 0;

    detail::prepare_run_dir(cfg);
    StepLogger log(detail::step_log_path(cfg));
    train_alignment(policy, ref, pairs, cfg.optim, cfg.align, derive_seed(cfg.seed, "train/align"), ctx, log);
    save_checkpoint(policy, detail::checkpoint_path(cfg, "policy.json"));
    return policy;
}

} // namespace prefdiff
