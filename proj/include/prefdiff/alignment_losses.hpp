#pragma once

// Offline alignment objectives (RRHF, DPO, KTO), each usable with per-pair
// reward-difference coefficients (the "+rc" variants).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "loss_bundle.hpp"
#include "params.hpp"
#include "transformer.hpp"

namespace prefdiff {

enum class AlignMethod { rrhf, dpo, kto };
enum class RrhfHinge { margin, rank };

inline const char* to_string(AlignMethod m) {
    switch (m) {
    case AlignMethod::rrhf: return "rrhf";
    case AlignMethod::dpo: return "dpo";
    case AlignMethod::kto: return "kto";
    }
    return "?";
}

inline AlignMethod parse_align_method(const std::string& s) {
    if (s == "rrhf") return AlignMethod::rrhf;
    if (s == "dpo") return AlignMethod::dpo;
    if (s == "kto") return AlignMethod::kto;
    throw ConfigError("align.method: unknown value '" + s + "' (expected rrhf|dpo|kto)");
}

inline const char* to_string(RrhfHinge h) { return h == RrhfHinge::margin ? "margin" : "rank"; }

inline RrhfHinge parse_rrhf_hinge(const std::string& s) {
    if (s == "margin") return RrhfHinge::margin;
    if (s == "rank") return RrhfHinge::rank;
    throw ConfigError("align.rrhf_hinge_mode: unknown value '" + s + "' (expected margin|rank)");
}

struct AlignConfig {
    AlignMethod method = AlignMethod::dpo;
    /// Weight each pair by its annotated coefficient.
    bool use_coefficients = false;
    double dpo_beta = 0.2;
    RrhfHinge rrhf_hinge_mode = RrhfHinge::rank;
    double rrhf_sft_weight = 1.0;
    bool length_normalize_rrhf = true;
    double kto_beta = 0.1;
    double kto_lambda_desirable = 1.0;
    double kto_lambda_undesirable = 1.0;

    std::string method_name() const { return std::string(to_string(method)) + (use_coefficients ? "+rc" : ""); }

    void validate() const {
        if (!(dpo_beta > 0.0)) throw ConfigError("align.dpo_beta must be positive");
        if (!(rrhf_sft_weight >= 0.0)) throw ConfigError("align.rrhf_sft_weight must be nonnegative");
        if (!(kto_beta > 0.0)) throw ConfigError("align.kto_beta must be positive");
        if (!(kto_lambda_desirable > 0.0)) throw ConfigError("align.kto_lambda_desirable must be positive");
        if (!(kto_lambda_undesirable > 0.0)) throw ConfigError("align.kto_lambda_undesirable must be positive");
    }
};

/// Response followed by EOS, the unit scored by every alignment loss.
inline TokenSequence with_eos(const TokenSequence& y) {
    TokenSequence out = y;
    out.ids.push_back(Vocab::eos);
    return out;
}

/// Frozen reference policy. Its log-probs are constants, cached by (x, y).
class ReferenceSnapshot {
public:
    explicit ReferenceSnapshot(ParameterStore store) : store_(std::move(store)) {
        if (store_.kind() != ModelKind::policy) throw ConfigError("reference snapshot must be a policy model");
    }

    const ParameterStore& store() const noexcept { return store_; }

    void check_compatible(const ParameterStore& policy) const {
        if (policy.meta().vocab_size != store_.meta().vocab_size)
            throw ConfigError("reference vocabulary size " + std::to_string(store_.meta().vocab_size) +
                              " does not match policy vocabulary size " + std::to_string(policy.meta().vocab_size));
        if (!(policy.config() == store_.config()))
            throw ConfigError("reference model config does not match the policy config");
    }

    /// Unnormalized log pi_ref(y + EOS | x).
    double logprob(const TokenSequence& x, const TokenSequence& y) const {
        auto key = std::make_pair(x.ids, y.ids);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        const double v = logprob_value(store_, x, with_eos(y), false);
        cache_.emplace(std::move(key), v);
        return v;
    }

private:
    ParameterStore store_;
    mutable std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, double> cache_;
};

using Coefficients = std::optional<std::vector<double>>;

namespace detail {

inline ad::Var weighted(const ad::Var& v, const Coefficients& c) {
    if (!c) return v;
    if (c->size() != v.value().size())
        throw ShapeError("coefficient vector of length " + std::to_string(c->size()) + " for a batch of " +
                         std::to_string(v.value().size()));
    return ad::mul(v, v.tape().constant(Array::vector(*c)));
}

inline Coefficients coefficients_of(std::span<const AnnotatedPair> batch, bool use) {
    if (!use) return std::nullopt;
    std::vector<double> c;
    c.reserve(batch.size());
    for (const auto& p : batch) c.push_back(p.coefficient);
    return c;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Formula level: losses over per-pair log-prob vectors.
// ---------------------------------------------------------------------------

/// Ranking term over length-normalized log-probs plus weight * sft.
///   margin:   -(1/N) sum c * max(p_w - p_l, 0)
///   rank:     (1/N) sum c * max(p_l - p_w, 0)
inline Loss rrhf_formula(const ad::Var& p_w, const ad::Var& p_l, const Coefficients& c, const ad::Var& sft,
                         const AlignConfig& cfg) {
    detail::require_batch(p_w, "rrhf_loss");
    const ad::Var rank = cfg.rrhf_hinge_mode == RrhfHinge::margin
                             ? ad::neg(ad::mean(detail::weighted(ad::max_const(ad::sub(p_w, p_l), 0.0), c)))
                             : ad::mean(detail::weighted(ad::max_const(ad::sub(p_l, p_w), 0.0), c));
    const ad::Var total = cfg.rrhf_sft_weight == 0.0 ? rank : ad::add(rank, ad::scale(sft, cfg.rrhf_sft_weight));
    return {total, {total.item(), {{"rank", rank.item()}, {"sft", sft.item()}}}};
}

/// -(1/N) sum c * log sigmoid(beta * (logratio_w - logratio_l))
inline Loss dpo_formula(const ad::Var& logratio_w, const ad::Var& logratio_l, const Coefficients& c, double beta) {
    detail::require_batch(logratio_w, "dpo_loss");
    const ad::Var g = ad::log_sigmoid(ad::scale(ad::sub(logratio_w, logratio_l), beta));
    const ad::Var total = ad::neg(ad::mean(detail::weighted(g, c)));
    return {total, {total.item(), {{"dpo", total.item()}}}};
}

/// max(0, mean log-ratio over every point of the batch); a constant.
inline double kto_reference_point(const ad::Var& logratio_d, const ad::Var& logratio_u) {
    double s = 0.0;
    for (double v : logratio_d.value().data()) s += v;
    for (double v : logratio_u.value().data()) s += v;
    return std::max(0.0, s / static_cast<double>(logratio_d.value().size() + logratio_u.value().size()));
}

/// (1/N) sum lambda_y * (1 - v) * c over desirable and undesirable points, where
/// v = sigmoid(beta * (logratio - z)) for desirable points and
/// v = sigmoid(beta * (z - logratio)) for undesirable ones. Pass z_ref to fix z.
inline Loss kto_formula(const ad::Var& logratio_d, const ad::Var& logratio_u, const Coefficients& c,
                        const AlignConfig& cfg, std::optional<double> z_ref = std::nullopt) {
    if (logratio_d.value().size() == 0 || logratio_u.value().size() == 0)
        throw DataError("kto_loss: batch needs both desirable and undesirable points");
    const double z = z_ref ? *z_ref : kto_reference_point(logratio_d, logratio_u);
    const double n = static_cast<double>(logratio_d.value().size() + logratio_u.value().size());
    const ad::Var v_d = ad::sigmoid(ad::scale(ad::add_scalar(logratio_d, -z), cfg.kto_beta));
    const ad::Var v_u = ad::sigmoid(ad::scale(ad::add_scalar(logratio_u, -z), -cfg.kto_beta));
    const ad::Var loss_d = ad::scale(ad::sum(detail::weighted(ad::add_scalar(ad::neg(v_d), 1.0), c)),
                                     cfg.kto_lambda_desirable / n);
    const ad::Var loss_u = ad::scale(ad::sum(detail::weighted(ad::add_scalar(ad::neg(v_u), 1.0), c)),
                                     cfg.kto_lambda_undesirable / n);
    const ad::Var total = ad::add(loss_d, loss_u);
    return {total, {total.item(), {{"desirable", loss_d.item()}, {"undesirable", loss_u.item()}, {"z_ref", z}}}};
}

// ---------------------------------------------------------------------------
// Model level
// ---------------------------------------------------------------------------

/// log pi(y + EOS | x), optionally per token.
inline ad::Var sequence_logprob(const BoundModel& m, const TokenSequence& x, const TokenSequence& y, bool normalize) {
    return policy_logprob(m, x, with_eos(y), normalize);
}

/// Mean over examples of the per-token negative log-likelihood of y + EOS.
inline Loss sft_loss(const BoundModel& m, std::span<const std::pair<TokenSequence, TokenSequence>> batch) {
    detail::require_batch(batch.size(), "sft_loss");
    std::vector<ad::Var> nll;
    for (const auto& [x, y] : batch) nll.push_back(sequence_logprob(m, x, y, true));
    const ad::Var total = ad::neg(ad::mean(ad::stack(nll)));
    return {total, {total.item(), {{"sft", total.item()}}}};
}

inline Loss rrhf_loss(const BoundModel& m, std::span<const AnnotatedPair> batch, const AlignConfig& cfg) {
    detail::require_batch(batch.size(), "rrhf_loss");
    std::vector<ad::Var> pw, pl;
    for (const auto& a : batch) {
        pw.push_back(sequence_logprob(m, a.pair.query, a.pair.y_w, cfg.length_normalize_rrhf));
        pl.push_back(sequence_logprob(m, a.pair.query, a.pair.y_l, cfg.length_normalize_rrhf));
    }
    // SFT on the preferred responses; reuses p_w when it is already per-token.
    ad::Var sft;
    if (cfg.length_normalize_rrhf) {
        sft = ad::neg(ad::mean(ad::stack(pw)));
    } else {
        std::vector<ad::Var> per_token;
        for (const auto& a : batch) per_token.push_back(sequence_logprob(m, a.pair.query, a.pair.y_w, true));
        sft = ad::neg(ad::mean(ad::stack(per_token)));
    }
    return rrhf_formula(ad::stack(pw), ad::stack(pl), detail::coefficients_of(batch, cfg.use_coefficients), sft, cfg);
}

namespace detail {

/// log pi(y|x) - log pi_ref(y|x) for winners and losers of a batch.
inline std::pair<ad::Var, ad::Var> logratios(const BoundModel& m, const ReferenceSnapshot& ref,
                                             std::span<const AnnotatedPair> batch) {
    ref.check_compatible(m.store());
    std::vector<ad::Var> w, l;
    for (const auto& a : batch) {
        w.push_back(ad::add_scalar(sequence_logprob(m, a.pair.query, a.pair.y_w, false),
                                   -ref.logprob(a.pair.query, a.pair.y_w)));
        l.push_back(ad::add_scalar(sequence_logprob(m, a.pair.query, a.pair.y_l, false),
                                   -ref.logprob(a.pair.query, a.pair.y_l)));
    }
    return {ad::stack(w), ad::stack(l)};
}

} // namespace detail

inline Loss dpo_loss(const BoundModel& m, const ReferenceSnapshot& ref, std::span<const AnnotatedPair> batch,
                     const AlignConfig& cfg) {
    detail::require_batch(batch.size(), "dpo_loss");
    const auto [lw, ll] = detail::logratios(m, ref, batch);
    return dpo_formula(lw, ll, detail::coefficients_of(batch, cfg.use_coefficients), cfg.dpo_beta);
}

/// Each pair contributes its winner as a desirable point and its loser as an
/// undesirable point, both weighted by the pair's coefficient.
inline Loss kto_loss(const BoundModel& m, const ReferenceSnapshot& ref, std::span<const AnnotatedPair> batch,
                     const AlignConfig& cfg, std::optional<double> z_ref = std::nullopt) {
    detail::require_batch(batch.size(), "kto_loss");
    const auto [lw, ll] = detail::logratios(m, ref, batch);
    return kto_formula(lw, ll, detail::coefficients_of(batch, cfg.use_coefficients), cfg, z_ref);
}

inline Loss alignment_loss(const BoundModel& m, const ReferenceSnapshot& ref, std::span<const AnnotatedPair> batch,
                           const AlignConfig& cfg) {
    switch (cfg.method) {
    case AlignMethod::rrhf: return rrhf_loss(m, batch, cfg);
    case AlignMethod::dpo: return dpo_loss(m, ref, batch, cfg);
    case AlignMethod::kto: return kto_loss(m, ref, batch, cfg);
    }
    throw ConfigError("unknown alignment method");
}

// ---------------------------------------------------------------------------
// DPO+rc gradient identity
// ---------------------------------------------------------------------------

struct GradientIdentityResult {
    /// max over parameters of |assembled - autodiff| / max(|assembled|, |autodiff|, floor)
    double max_deviation = 0.0;
    /// R_hat = c * beta * sigmoid(r_hat_l - r_hat_w) per pair
    std::vector<double> weights;
    /// Flattened per-pair contribution -(1/N) * R_hat * (grad log pi(y_w) - grad log pi(y_l)).
    std::vector<std::vector<double>> contributions;
    std::vector<double> contribution_norms;
};

/// Assembles the DPO(+rc) gradient from per-pair weights and log-prob
/// gradients, and compares it with reverse-mode differentiation of dpo_loss.
inline GradientIdentityResult dpo_rc_gradient_identity_check(const ParameterStore& policy,
                                                             const ReferenceSnapshot& ref,
                                                             std::span<const AnnotatedPair> batch,
                                                             const AlignConfig& cfg) {
    detail::require_batch(batch.size(), "dpo_rc_gradient_identity_check");
    auto flatten = [](const std::map<std::string, Array>& g) {
        std::vector<double> out;
        for (const auto& [_, a] : g) out.insert(out.end(), a.data().begin(), a.data().end());
        return out;
    };

    std::vector<double> autodiff;
    {
        ad::Tape tape;
        const BoundModel m(policy, tape, true);
        const Loss loss = dpo_loss(m, ref, batch, cfg);
        autodiff = flatten(m.gradients(tape.backward(loss.value)));
    }

    auto logprob_grad = [&](const TokenSequence& x, const TokenSequence& y, double& value) {
        ad::Tape tape;
        const BoundModel m(policy, tape, true);
        const ad::Var lp = sequence_logprob(m, x, y, false);
        value = lp.item();
        return flatten(m.gradients(tape.backward(lp)));
    };

    GradientIdentityResult r;
    const double n = static_cast<double>(batch.size());
    std::vector<double> assembled(autodiff.size(), 0.0);
    for (const auto& a : batch) {
        double lp_w = 0.0, lp_l = 0.0;
        const auto gw = logprob_grad(a.pair.query, a.pair.y_w, lp_w);
        const auto gl = logprob_grad(a.pair.query, a.pair.y_l, lp_l);
        const double rhat_w = cfg.dpo_beta * (lp_w - ref.logprob(a.pair.query, a.pair.y_w));
        const double rhat_l = cfg.dpo_beta * (lp_l - ref.logprob(a.pair.query, a.pair.y_l));
        const double c = cfg.use_coefficients ? a.coefficient : 1.0;
        const double weight = c * cfg.dpo_beta * (1.0 / (1.0 + std::exp(rhat_w - rhat_l)));
        const double k = -(weight / n);
        std::vector<double> contrib(gw.size());
        double sq = 0.0;
        for (std::size_t i = 0; i < gw.size(); ++i) {
            contrib[i] = k * (gw[i] - gl[i]);
            sq += contrib[i] * contrib[i];
            assembled[i] += contrib[i];
        }
        r.weights.push_back(weight);
        r.contribution_norms.push_back(std::sqrt(sq));
        r.contributions.push_back(std::move(contrib));
    }

    double scale = 0.0;
    for (double v : autodiff) scale = std::max(scale, std::abs(v));
    const double floor = 1e-12 + 1e-8 * scale;
    for (std::size_t i = 0; i < autodiff.size(); ++i) {
        const double dev = std::abs(assembled[i] - autodiff[i]) /
                           std::max({std::abs(assembled[i]), std::abs(autodiff[i]), floor});
        r.max_deviation = std::max(r.max_deviation, dev);
    }
    return r;
}

} // namespace prefdiff
