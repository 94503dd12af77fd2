#pragma once

// Self-checks run by `prefdiff verify`: finite-difference gradients of every
// loss, the DPO(+rc) gradient-weighting identity, the alpha = 0 reduction
// family, and the exact-zero semantics of both regularizers.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "alignment_losses.hpp"
#include "coefficients.hpp"
#include "gradcheck.hpp"
#include "scoring_losses.hpp"
#include "transformer.hpp"

namespace prefdiff {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// A 1-layer, width-8 backbone over a 16-token vocabulary.
inline BackboneConfig tiny_backbone() { return BackboneConfig{1, 8, 2, 32}; }
inline Vocab tiny_vocab() { return Vocab{16}; }

inline TokenSequence random_content(Rng& rng, const Vocab& vocab, std::size_t lo, std::size_t hi, SequenceRole role) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    TokenSequence s;
    s.role = role;
    for (std::size_t i = 0; i < n; ++i)
        s.ids.push_back(static_cast<TokenId>(rng.uniform_int(Vocab::first_content, static_cast<std::int64_t>(vocab.size) - 1)));
    return s;
}

/// Random comparisons with distinct responses and coefficients in [0.1, 2].
inline std::vector<AnnotatedPair> random_annotated_pairs(std::uint64_t seed, const Vocab& vocab, std::size_t n) {
    Rng rng(seed);
    std::vector<AnnotatedPair> out;
    while (out.size() < n) {
        AnnotatedPair a;
        a.pair.query = random_content(rng, vocab, 2, 4, SequenceRole::query);
        a.pair.y_w = random_content(rng, vocab, 1, 4, SequenceRole::response);
        a.pair.y_l = random_content(rng, vocab, 1, 4, SequenceRole::response);
        if (a.pair.y_w == a.pair.y_l) continue;
        a.coefficient = rng.uniform(0.1, 2.0);
        a.raw_difference = a.coefficient;
        a.annotated = true;
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<PreferencePair> plain_pairs(const std::vector<AnnotatedPair>& a) {
    std::vector<PreferencePair> out;
    for (const auto& p : a) out.push_back(p.pair);
    return out;
}

/// Perturbs parameters in the store. Gradients from reverse mode on a
/// trainable binding are compared against central differences of the same
/// expression evaluated on constant bindings.
inline GradCheckResult check_model_gradients(const ParameterStore& store,
                                             const std::function<ad::Var(const BoundModel&)>& build,
                                             const GradCheckOptions& opts = {}) {
    std::map<std::string, Array> analytic;
    {
        ad::Tape tape;
        const BoundModel m(store, tape, true);
        analytic = m.gradients(tape.backward(build(m)));
    }
    auto evaluate = [&](const ParameterStore& s) {
        ad::Tape tape;
        return build(BoundModel(s, tape, false)).item();
    };

    // Half the probes go to coordinates with a nonzero analytic gradient, so
    // sparse gradients (embedding rows) cannot make the check vacuous.
    std::vector<std::pair<std::string, std::size_t>> coords, active;
    for (const auto& [name, a] : store.params())
        for (std::size_t i = 0; i < a.size(); ++i) {
            coords.emplace_back(name, i);
            if (analytic.at(name)[i] != 0.0) active.emplace_back(name, i);
        }
    if (opts.probes != 0 && opts.probes < coords.size()) {
        Rng rng(opts.seed);
        rng.shuffle(std::span(coords));
        rng.shuffle(std::span(active));
        const std::size_t from_active = std::min(active.size(), opts.probes / 2);
        std::vector<std::pair<std::string, std::size_t>> picked(active.begin(), active.begin() + from_active);
        for (std::size_t i = 0; picked.size() < opts.probes; ++i) picked.push_back(coords[i]);
        coords = std::move(picked);
    }
    GradCheckResult result;
    ParameterStore s = store;
    for (const auto& [name, i] : coords) {
        double& x = s.get(name)[i];
        const double orig = x;
        x = orig + opts.step;
        const double plus = evaluate(s);
        x = orig - opts.step;
        const double minus = evaluate(s);
        x = orig;
        const double numeric = (plus - minus) / (2.0 * opts.step);
        const double a = analytic.at(name)[i];
        const double err = relative_error(a, numeric, opts.floor);
        if (err >= result.max_relative_error) {
            result.max_relative_error = err;
            result.worst_analytic = a;
            result.worst_numeric = numeric;
        }
        ++result.probes;
    }
    return result;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

/// Models that exercise every loss on tiny instances.
struct TinyWorld {
    ParameterStore policy, reference, reward, difference;
    std::vector<AnnotatedPair> pairs;

    explicit TinyWorld(std::uint64_t seed, std::size_t n_pairs = 3)
        : policy(init_model(ModelKind::policy, tiny_vocab(), tiny_backbone(), derive_seed(seed, "policy"))),
          reference(init_model(ModelKind::policy, tiny_vocab(), tiny_backbone(), derive_seed(seed, "reference"))),
          reward(init_model(ModelKind::reward, tiny_vocab(), tiny_backbone(), derive_seed(seed, "reward"))),
          difference(init_model(ModelKind::difference, tiny_vocab(), tiny_backbone(), derive_seed(seed, "difference"))),
          pairs(random_annotated_pairs(derive_seed(seed, "pairs"), tiny_vocab(), n_pairs)) {
        // larger LM-head weights give policies with visibly different log-probs
        Rng rng(derive_seed(seed, "head"));
        for (double& w : policy.get("lm_head.w").data()) w = rng.normal(0.0, 0.5);
        for (double& w : reference.get("lm_head.w").data()) w = rng.normal(0.0, 0.5);
    }
};

} // namespace detail

/// Finite-difference checks of every loss, 20 probes each.
inline std::vector<CheckResult> loss_gradient_checks(std::uint64_t seed, double tolerance = 1e-4) {
    const detail::TinyWorld w(seed);
    const auto pairs = plain_pairs(w.pairs);
    const ReferenceSnapshot ref(w.reference);
    const auto plan = sampling_plan(pairs.size(), derive_seed(seed, "plan"));
    GradCheckOptions opts;
    opts.seed = derive_seed(seed, "probes");

    std::vector<std::pair<std::string, std::function<GradCheckResult()>>> cases;
    auto model_case = [&](const std::string& name, const ParameterStore& store,
                          std::function<ad::Var(const BoundModel&)> build) {
        cases.emplace_back(name, [&store, build, &opts] { return check_model_gradients(store, build, opts); });
    };
    model_case("bt_reward_loss", w.reward, [&](const BoundModel& m) { return bt_reward_loss(m, pairs).value; });
    model_case("diff_main_loss", w.difference, [&](const BoundModel& m) { return diff_main_loss(m, pairs, plan).value; });
    model_case("diff_dup_loss", w.difference, [&](const BoundModel& m) { return diff_dup_loss(m, pairs, plan).value; });
    model_case("diff_rev_loss", w.difference, [&](const BoundModel& m) { return diff_rev_loss(m, pairs, plan).value; });
    model_case("diff_total_loss", w.difference,
               [&](const BoundModel& m) { return diff_total_loss(m, pairs, plan, DiffTrainConfig{0.1, 0.1, 1, 0}).value; });
    model_case("sft_loss", w.policy, [&](const BoundModel& m) {
        std::vector<std::pair<TokenSequence, TokenSequence>> demos;
        for (const auto& p : pairs) demos.emplace_back(p.query, p.y_w);
        return sft_loss(m, demos).value;
    });

    // KTO's reference point is held at its value at the unperturbed parameters.
    double z_ref = 0.0;
    {
        ad::Tape tape;
        AlignConfig c;
        c.method = AlignMethod::kto;
        z_ref = kto_loss(BoundModel(w.policy, tape, false), ref, w.pairs, c).bundle.components.at("z_ref");
    }
    for (const bool rc : {false, true}) {
        const std::string suffix = rc ? "+rc" : "";
        for (const RrhfHinge hinge : {RrhfHinge::margin, RrhfHinge::rank}) {
            AlignConfig c;
            c.method = AlignMethod::rrhf;
            c.rrhf_hinge_mode = hinge;
            c.use_coefficients = rc;
            model_case(std::string("rrhf") + suffix + " (" + to_string(hinge) + ")", w.policy,
                       [&, c](const BoundModel& m) { return rrhf_loss(m, w.pairs, c).value; });
        }
        AlignConfig dpo;
        dpo.use_coefficients = rc;
        model_case("dpo" + suffix, w.policy, [&, dpo](const BoundModel& m) { return dpo_loss(m, ref, w.pairs, dpo).value; });
        AlignConfig kto;
        kto.method = AlignMethod::kto;
        kto.use_coefficients = rc;
        model_case("kto" + suffix, w.policy,
                   [&, kto](const BoundModel& m) { return kto_loss(m, ref, w.pairs, kto, z_ref).value; });
    }

    std::vector<CheckResult> out;
    for (const auto& [name, run] : cases) {
        const GradCheckResult g = run();
        out.push_back({"gradient " + name, g.max_relative_error < tolerance,
                       "max rel err " + detail::fmt(g.max_relative_error) + " over " + std::to_string(g.probes) +
                           " probes"});
    }
    return out;
}

/// Max deviation of the assembled DPO+rc gradient over `instances` random tiny cases.
inline CheckResult dpo_identity_check(std::uint64_t seed, std::size_t instances = 50, double tolerance = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
        const std::uint64_t s = derive_seed(seed, i);
        const detail::TinyWorld w(s, 1 + i % 4);
        const ReferenceSnapshot ref(w.reference);
        AlignConfig cfg;
        cfg.use_coefficients = true;
        worst = std::max(worst, dpo_rc_gradient_identity_check(w.policy, ref, w.pairs, cfg).max_deviation);
    }
    return {"dpo+rc gradient identity", worst < tolerance,
            "max deviation " + detail::fmt(worst) + " over " + std::to_string(instances) + " instances"};
}

/// Doubling one pair's coefficient doubles exactly that pair's assembled contribution.
inline CheckResult coefficient_linearity_check(std::uint64_t seed) {
    const detail::TinyWorld w(seed, 4);
    const ReferenceSnapshot ref(w.reference);
    AlignConfig cfg;
    cfg.use_coefficients = true;
    const auto base = dpo_rc_gradient_identity_check(w.policy, ref, w.pairs, cfg);
    bool ok = true;
    for (std::size_t k = 0; k < w.pairs.size(); ++k) {
        auto doubled = w.pairs;
        doubled[k].coefficient *= 2.0;
        const auto r = dpo_rc_gradient_identity_check(w.policy, ref, doubled, cfg);
        for (std::size_t j = 0; j < w.pairs.size(); ++j) {
            const double factor = j == k ? 2.0 : 1.0;
            ok = ok && r.weights[j] == factor * base.weights[j] &&
                 r.contribution_norms[j] == factor * base.contribution_norms[j];
            for (std::size_t i = 0; i < r.contributions[j].size(); ++i)
                ok = ok && r.contributions[j][i] == factor * base.contributions[j][i];
        }
    }
    return {"dpo+rc per-pair contribution linear in coefficient", ok, ok ? "exact" : "mismatch"};
}

/// alpha = 0 makes every +rc loss bitwise equal to its vanilla form.
inline std::vector<CheckResult> reduction_checks(std::uint64_t seed) {
    const detail::TinyWorld w(seed, 4);
    const ReferenceSnapshot ref(w.reference);
    CoefficientConfig zero;
    zero.alpha = 0.0;
    auto reduced = w.pairs;
    for (auto& p : reduced) p.coefficient = apply_alpha(p.raw_difference, zero);

    std::vector<CheckResult> out;
    for (const AlignMethod method : {AlignMethod::rrhf, AlignMethod::dpo, AlignMethod::kto}) {
        AlignConfig vanilla;
        vanilla.method = method;
        AlignConfig rc = vanilla;
        rc.use_coefficients = true;
        ad::Tape t1, t2;
        const BoundModel m1(w.policy, t1, true), m2(w.policy, t2, true);
        const Loss a = alignment_loss(m1, ref, w.pairs, vanilla);
        const Loss b = alignment_loss(m2, ref, reduced, rc);
        bool same = a.bundle.total == b.bundle.total;
        const auto ga = m1.gradients(t1.backward(a.value));
        const auto gb = m2.gradients(t2.backward(b.value));
        for (const auto& [name, g] : ga) same = same && g == gb.at(name);
        out.push_back({std::string("alpha=0 reduction ") + to_string(method) + "+rc", same,
                       same ? "bitwise equal loss and gradients" : "differs"});
    }
    return out;
}

/// L_dup = 0 iff every evaluated self-score is 0; L_rev = 0 iff every pair is antisymmetric.
inline std::vector<CheckResult> regularizer_checks(std::uint64_t seed) {
    std::vector<CheckResult> out;
    Rng rng(seed);
    bool dup_ok = true, rev_ok = true;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
        std::vector<double> self(n, 0.0), fwd(n), bwd(n);
        for (std::size_t i = 0; i < n; ++i) {
            fwd[i] = rng.normal();
            bwd[i] = -fwd[i];
        }
        ad::Tape tape;
        dup_ok = dup_ok && diff_dup(tape.constant(Array::vector(self))).bundle.total == 0.0;
        rev_ok = rev_ok && diff_rev(tape.constant(Array::vector(fwd)), tape.constant(Array::vector(bwd))).bundle.total == 0.0;
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
        self[k] = rng.uniform(1e-3, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        bwd[k] += rng.uniform(1e-3, 1.0);
        dup_ok = dup_ok && diff_dup(tape.constant(Array::vector(self))).bundle.total > 0.0;
        rev_ok = rev_ok && diff_rev(tape.constant(Array::vector(fwd)), tape.constant(Array::vector(bwd))).bundle.total > 0.0;
    }
    // A difference model with a zeroed head scores every input exactly 0.
    const detail::TinyWorld w(seed, 4);
    ParameterStore zeroed = w.difference;
    for (double& v : zeroed.get("score_head.w").data()) v = 0.0;
    zeroed.get("score_head.b")[0] = 0.0;
    const auto pairs = plain_pairs(w.pairs);
    const auto plan = sampling_plan(pairs.size(), seed);
    ad::Tape tape;
    const BoundModel zm(zeroed, tape, false), rm(w.difference, tape, false);
    dup_ok = dup_ok && diff_dup_loss(zm, pairs, plan).bundle.total == 0.0 && diff_dup_loss(rm, pairs, plan).bundle.total > 0.0;
    rev_ok = rev_ok && diff_rev_loss(zm, pairs, plan).bundle.total == 0.0 && diff_rev_loss(rm, pairs, plan).bundle.total > 0.0;
    out.push_back({"duplication loss zero iff self-scores zero", dup_ok, dup_ok ? "ok" : "violated"});
    out.push_back({"reverse loss zero iff antisymmetric", rev_ok, rev_ok ? "ok" : "violated"});
    return out;
}

/// Runs every check, printing one line each. Returns true when all pass.
inline bool run_verify(std::uint64_t seed, std::ostream& os) {
    std::vector<CheckResult> all = loss_gradient_checks(derive_seed(seed, "gradients"));
    all.push_back(dpo_identity_check(derive_seed(seed, "identity")));
    all.push_back(coefficient_linearity_check(derive_seed(seed, "linearity")));
    for (auto& r : reduction_checks(derive_seed(seed, "reduction"))) all.push_back(std::move(r));
    for (auto& r : regularizer_checks(derive_seed(seed, "regularizers"))) all.push_back(std::move(r));
    bool ok = true;
    for (const auto& r : all) {
        os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        ok = ok && r.passed;
    }
    os << (ok ? "all checks passed" : "some checks FAILED") << '\n';
    return ok;
}

} // namespace prefdiff
