#pragma once

// Objectives for the pointwise reward model (Bradley-Terry) and the pairwise
// difference model (logistic main term plus duplication and reverse
// regularizers).

#include <cstdint>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "loss_bundle.hpp"
#include "rng.hpp"
#include "transformer.hpp"

namespace prefdiff {

struct DiffTrainConfig {
    double beta0 = 0.01; // duplication weight
    double beta1 = 0.01; // reverse weight
    std::size_t epochs = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(beta0 >= 0.0)) throw ConfigError("diff.beta0 must be nonnegative");
        if (!(beta1 >= 0.0)) throw ConfigError("diff.beta1 must be nonnegative");
        if (epochs == 0) throw ConfigError("diff.epochs must be positive");
    }
};

// ---------------------------------------------------------------------------
// Formula level: losses over precomputed score vectors of length N.
// ---------------------------------------------------------------------------

/// -(1/N) sum log sigmoid(r_w - r_l)
inline Loss bt_loss(const ad::Var& r_w, const ad::Var& r_l) {
    detail::require_batch(r_w, "bt_reward_loss");
    const ad::Var v = ad::neg(ad::mean(ad::log_sigmoid(ad::sub(r_w, r_l))));
    return {v, {v.item(), {{"main", v.item()}}}};
}

/// -(1/N) sum log sigmoid(I * f), taking the already oriented product I * f.
inline Loss diff_main(const ad::Var& oriented) {
    detail::require_batch(oriented, "diff_main_loss");
    const ad::Var v = ad::neg(ad::mean(ad::log_sigmoid(oriented)));
    return {v, {v.item(), {{"main", v.item()}}}};
}

/// (1/N) sum f(x, y, y)^2
inline Loss diff_dup(const ad::Var& self_scores) {
    detail::require_batch(self_scores, "diff_dup_loss");
    const ad::Var v = ad::mean(ad::square(self_scores));
    return {v, {v.item(), {{"dup", v.item()}}}};
}

/// (1/N) sum (f(x, a, b) + f(x, b, a))^2
inline Loss diff_rev(const ad::Var& forward, const ad::Var& backward) {
    detail::require_batch(forward, "diff_rev_loss");
    const ad::Var v = ad::mean(ad::square(ad::add(forward, backward)));
    return {v, {v.item(), {{"rev", v.item()}}}};
}

inline Loss diff_total(const Loss& main, const Loss& dup, const Loss& rev, const DiffTrainConfig& cfg) {
    const ad::Var v = ad::add(ad::add(main.value, ad::scale(dup.value, cfg.beta0)), ad::scale(rev.value, cfg.beta1));
    LossBundle b;
    b.total = v.item();
    b.components = {{"main", main.bundle.total}, {"dup", dup.bundle.total}, {"rev", rev.bundle.total}};
    return {v, b};
}

// ---------------------------------------------------------------------------
// Model level
// ---------------------------------------------------------------------------

/// Per-pair random choices for the difference-model objective.
struct PairSampling {
    bool swap_main = false;      // main term sees (y_l, y_w) with I = -1
    bool dup_pick_loser = false; // dup term scores (y_l, y_l) instead of (y_w, y_w)
    bool rev_swap = false;       // rev term evaluated starting from (y_l, y_w)
};

/// Drawn fresh from `seed`; the trainer passes a per-epoch derived seed.
inline std::vector<PairSampling> sampling_plan(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PairSampling> plan(n);
    for (auto& s : plan) {
        s.swap_main = rng.bernoulli(0.5);
        s.dup_pick_loser = rng.bernoulli(0.5);
        s.rev_swap = rng.bernoulli(0.5);
    }
    return plan;
}

namespace detail {

inline void require_plan(std::span<const PreferencePair> batch, std::span<const PairSampling> plan, const char* what) {
    require_batch(batch.size(), what);
    if (plan.size() != batch.size())
        throw ShapeError(std::string(what) + ": sampling plan has " + std::to_string(plan.size()) +
                         " entries for a batch of " + std::to_string(batch.size()));
}

} // namespace detail

inline Loss bt_reward_loss(const BoundModel& m, std::span<const PreferencePair> batch) {
    detail::require_batch(batch.size(), "bt_reward_loss");
    std::vector<ad::Var> rw, rl;
    for (const auto& p : batch) {
        rw.push_back(reward_score(m, p.query, p.y_w));
        rl.push_back(reward_score(m, p.query, p.y_l));
    }
    return bt_loss(ad::stack(rw), ad::stack(rl));
}

inline Loss diff_main_loss(const BoundModel& m, std::span<const PreferencePair> batch,
                           std::span<const PairSampling> plan) {
    detail::require_plan(batch, plan, "diff_main_loss");
    std::vector<ad::Var> oriented;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& p = batch[i];
        oriented.push_back(plan[i].swap_main ? ad::neg(difference_score(m, p.query, p.y_l, p.y_w))
                                             : difference_score(m, p.query, p.y_w, p.y_l));
    }
    return diff_main(ad::stack(oriented));
}

inline Loss diff_dup_loss(const BoundModel& m, std::span<const PreferencePair> batch,
                          std::span<const PairSampling> plan) {
    detail::require_plan(batch, plan, "diff_dup_loss");
    std::vector<ad::Var> self;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& y = plan[i].dup_pick_loser ? batch[i].y_l : batch[i].y_w;
        self.push_back(difference_score(m, batch[i].query, y, y));
    }
    return diff_dup(ad::stack(self));
}

inline Loss diff_rev_loss(const BoundModel& m, std::span<const PreferencePair> batch,
                          std::span<const PairSampling> plan) {
    detail::require_plan(batch, plan, "diff_rev_loss");
    std::vector<ad::Var> fwd, bwd;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& p = batch[i];
        const auto& a = plan[i].rev_swap ? p.y_l : p.y_w;
        const auto& b = plan[i].rev_swap ? p.y_w : p.y_l;
        fwd.push_back(difference_score(m, p.query, a, b));
        bwd.push_back(difference_score(m, p.query, b, a));
    }
    return diff_rev(ad::stack(fwd), ad::stack(bwd));
}

/// main + beta0 * dup + beta1 * rev. Each pair costs three forward passes:
/// f(w, l) and f(l, w) feed both the main and reverse terms.
inline Loss diff_total_loss(const BoundModel& m, std::span<const PreferencePair> batch,
                            std::span<const PairSampling> plan, const DiffTrainConfig& cfg) {
    detail::require_plan(batch, plan, "diff_total_loss");
    std::vector<ad::Var> oriented, fwd, bwd, self;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& p = batch[i];
        const ad::Var f_wl = difference_score(m, p.query, p.y_w, p.y_l);
        const ad::Var f_lw = difference_score(m, p.query, p.y_l, p.y_w);
        oriented.push_back(plan[i].swap_main ? ad::neg(f_lw) : f_wl);
        fwd.push_back(plan[i].rev_swap ? f_lw : f_wl);
        bwd.push_back(plan[i].rev_swap ? f_wl : f_lw);
        const auto& y = plan[i].dup_pick_loser ? p.y_l : p.y_w;
        self.push_back(difference_score(m, p.query, y, y));
    }
    return diff_total(diff_main(ad::stack(oriented)), diff_dup(ad::stack(self)), diff_rev(ad::stack(fwd), ad::stack(bwd)),
                      cfg);
}

} // namespace prefdiff
