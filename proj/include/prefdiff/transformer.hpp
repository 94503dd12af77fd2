#pragma once

// Decoder-only transformer shared by the policy, reward and difference
// models. Pre-LayerNorm blocks, causal multi-head attention, GELU MLP,
// learned absolute position and segment embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace prefdiff {

/// Parameters of one model placed on a tape, either as differentiable leaves
/// (training) or constants (scoring, reference policies, decoding).
class BoundModel {
public:
    BoundModel(const ParameterStore& store, ad::Tape& tape, bool trainable)
        : store_(&store), tape_(&tape), trainable_(trainable) {
        for (const auto& [name, value] : store.params())
            vars_.emplace(name, trainable ? tape.leaf(value) : tape.constant(value));
    }

    const ad::Var& operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw Error("model has no parameter '" + name + "'");
        return it->second;
    }

    const ParameterStore& store() const noexcept { return *store_; }
    ad::Tape& tape() const noexcept { return *tape_; }
    bool trainable() const noexcept { return trainable_; }
    const std::map<std::string, ad::Var>& vars() const noexcept { return vars_; }

    /// Gradient of every parameter, keyed by name.
    std::map<std::string, Array> gradients(const ad::Gradients& grads) const {
        std::map<std::string, Array> out;
        for (const auto& [name, var] : vars_) out.emplace(name, grads.wrt(var));
        return out;
    }

private:
    const ParameterStore* store_;
    ad::Tape* tape_;
    bool trainable_;
    std::map<std::string, ad::Var> vars_;
};

namespace detail {

inline void require_length(const ModelInput& in, const BackboneConfig& cfg, const char* what) {
    if (in.size() > cfg.max_len)
        throw DataError(std::string(what) + ": input of length " + std::to_string(in.size()) +
                        " exceeds the model's max sequence length " + std::to_string(cfg.max_len));
}

inline std::vector<std::size_t> to_indices(const std::vector<TokenId>& ids) {
    return {ids.begin(), ids.end()};
}

/// One pre-LN block. With last_only the block outputs only the final row;
/// earlier rows still serve as keys and values.
inline ad::Var block(const BoundModel& m, const ad::Var& x, std::size_t layer, bool last_only) {
    using namespace ad;
    const BackboneConfig& cfg = m.store().config();
    const std::string p = "blk" + std::to_string(layer) + ".";
    const std::size_t t = x.value().rows();
    const std::size_t hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    const Var h = layer_norm_rows(x, m[p + "ln1.g"], m[p + "ln1.b"]);
    const Var hq = last_only ? slice_rows(h, t - 1, 1) : h;
    const Var q = matmul(hq, m[p + "attn.wq"]);
    const Var k = matmul(h, m[p + "attn.wk"]);
    const Var v = matmul(h, m[p + "attn.wv"]);
    std::vector<Var> heads;
    heads.reserve(cfg.heads);
    for (std::size_t i = 0; i < cfg.heads; ++i) {
        const Var qh = slice_cols(q, i * hd, hd);
        const Var kh = slice_cols(k, i * hd, hd);
        const Var vh = slice_cols(v, i * hd, hd);
        const Var att = causal_softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), last_only ? t - 1 : 0);
        heads.push_back(matmul(att, vh));
    }
    const Var attn = matmul(cfg.heads == 1 ? heads[0] : concat(heads, 1), m[p + "attn.wo"]);
    const Var resid = last_only ? slice_rows(x, t - 1, 1) : x;
    const Var x1 = add(resid, attn);
    const Var h2 = layer_norm_rows(x1, m[p + "ln2.g"], m[p + "ln2.b"]);
    const Var mlp = add_bias(matmul(gelu(add_bias(matmul(h2, m[p + "mlp.w1"]), m[p + "mlp.b1"])), m[p + "mlp.w2"]),
                             m[p + "mlp.b2"]);
    return add(x1, mlp);
}

} // namespace detail

/// Final-LayerNorm hidden states, [T, width], or [1, width] for the last position only.
inline ad::Var backbone(const BoundModel& m, const ModelInput& in, bool last_only) {
    using namespace ad;
    const BackboneConfig& cfg = m.store().config();
    detail::require_length(in, cfg, "backbone");
    if (in.size() == 0) throw DataError("backbone: empty input");
    for (TokenId id : in.ids)
        if (id >= m.store().meta().vocab_size)
            throw DataError("backbone: token id " + std::to_string(id) + " outside the model vocabulary");
    std::vector<std::size_t> positions(in.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;

    Var x = add(add(gather_rows(m["tok_emb"], detail::to_indices(in.ids)), gather_rows(m["pos_emb"], positions)),
                gather_rows(m["seg_emb"], in.segments));
    for (std::size_t l = 0; l < cfg.layers; ++l) x = detail::block(m, x, l, last_only && l + 1 == cfg.layers);
    return layer_norm_rows(x, m["ln_f.g"], m["ln_f.b"]);
}

namespace detail {

inline ad::Var scalar_head(const BoundModel& m, const ModelInput& in) {
    if (m.store().kind() == ModelKind::policy) throw Error("scalar head requested from a policy model");
    const ad::Var h = backbone(m, in, true);
    return ad::reshape(ad::add_bias(ad::matmul(h, m["score_head.w"]), m["score_head.b"]), {1});
}

} // namespace detail

/// Sum over t of log pi(y_t | x, y_<t); divided by |y| when normalize is set.
inline ad::Var policy_logprob(const BoundModel& m, const TokenSequence& x, const TokenSequence& y, bool normalize) {
    using namespace ad;
    if (m.store().kind() != ModelKind::policy)
        throw Error(std::string("policy_logprob requires a policy model, got ") + to_string(m.store().kind()));
    if (y.ids.empty()) throw DataError("policy_logprob: empty response");
    const ModelInput in = policy_input(x, y);
    detail::require_length(in, m.store().config(), "policy_logprob");
    const Var hidden = backbone(m, in, false);
    const std::size_t first = x.size() + 1; // SEP_QUERY position predicts y_0
    const Var rows = slice_rows(hidden, first, y.size());
    const Var logp = log_softmax_rows(add_bias(matmul(rows, m["lm_head.w"]), m["lm_head.b"]));
    const std::size_t v = m.store().meta().vocab_size;
    std::vector<std::size_t> picks(y.size());
    for (std::size_t t = 0; t < y.size(); ++t) picks[t] = t * v + y.ids[t];
    const Var total = sum(gather(logp, std::move(picks)));
    return normalize ? scale(total, 1.0 / static_cast<double>(y.size())) : total;
}

/// r(x, y): linear head on the last-token (EOS) embedding.
inline ad::Var reward_score(const BoundModel& m, const TokenSequence& x, const TokenSequence& y) {
    if (m.store().kind() != ModelKind::reward)
        throw Error(std::string("reward_score requires a reward model, got ") + to_string(m.store().kind()));
    return detail::scalar_head(m, scoring_input(x, y));
}

/// f(x, y1, y2): positive when y1 is preferred, magnitude is preference strength.
inline ad::Var difference_score(const BoundModel& m, const TokenSequence& x, const TokenSequence& y1,
                                const TokenSequence& y2) {
    if (m.store().kind() != ModelKind::difference)
        throw Error(std::string("difference_score requires a difference model, got ") + to_string(m.store().kind()));
    return detail::scalar_head(m, pairwise_input(x, y1, y2));
}

// Value-level conveniences for read-only evaluation.

inline double reward_value(const ParameterStore& store, const TokenSequence& x, const TokenSequence& y) {
    ad::Tape tape;
    return reward_score(BoundModel(store, tape, false), x, y).item();
}

inline double difference_value(const ParameterStore& store, const TokenSequence& x, const TokenSequence& y1,
                               const TokenSequence& y2) {
    ad::Tape tape;
    return difference_score(BoundModel(store, tape, false), x, y1, y2).item();
}

inline double logprob_value(const ParameterStore& store, const TokenSequence& x, const TokenSequence& y,
                            bool normalize) {
    ad::Tape tape;
    return policy_logprob(BoundModel(store, tape, false), x, y, normalize).item();
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct DecodeStrategy {
    enum class Kind { greedy, temperature, top_k };
    Kind kind = Kind::greedy;
    double temperature = 1.0;
    std::size_t k = 0;

    static DecodeStrategy greedy() { return {}; }
    static DecodeStrategy with_temperature(double t) { return {Kind::temperature, t, 0}; }
    static DecodeStrategy top_k_sampling(std::size_t k, double t) { return {Kind::top_k, t, k}; }

    std::string name() const {
        switch (kind) {
        case Kind::greedy: return "greedy";
        case Kind::temperature: return "temperature";
        case Kind::top_k: return "top_k";
        }
        return "?";
    }
};

namespace detail {

/// Next-token logits at the end of [BOS] x [SEP_QUERY] prefix.
inline std::vector<double> next_logits(const ParameterStore& store, const TokenSequence& x,
                                       const std::vector<TokenId>& prefix) {
    ad::Tape tape;
    const BoundModel m(store, tape, false);
    ModelInput in;
    in.append(Vocab::bos, 0);
    in.append(x.ids, 0);
    in.append(Vocab::sep_query, 0);
    in.append(prefix, 1);
    const ad::Var h = backbone(m, in, true);
    const ad::Var logits = ad::add_bias(ad::matmul(h, m["lm_head.w"]), m["lm_head.b"]);
    return logits.value().values();
}

} // namespace detail

/// Autoregressive decode over content ids and EOS. Stops at EOS, at max_len
/// response tokens, or when the model context is full. The returned
/// sequence excludes EOS.
inline TokenSequence sample(const ParameterStore& store, const TokenSequence& x, const DecodeStrategy& strategy,
                            std::size_t max_len, std::uint64_t seed) {
    if (store.kind() != ModelKind::policy) throw Error("sample requires a policy model");
    if (max_len == 0) throw ConfigError("sample: max_len must be at least 1");
    if ((strategy.kind != DecodeStrategy::Kind::greedy) && !(strategy.temperature > 0.0))
        throw ConfigError("sample: temperature must be positive");
    if (strategy.kind == DecodeStrategy::Kind::top_k && strategy.k == 0)
        throw ConfigError("sample: top-k requires k >= 1");
    const Vocab vocab = store.vocab();
    Rng rng(seed);
    std::vector<TokenId> out;
    std::vector<TokenId> allowed{Vocab::eos};
    for (TokenId id = Vocab::first_content; id < vocab.size; ++id) allowed.push_back(id);

    while (out.size() < max_len && x.size() + 2 + out.size() < store.config().max_len) {
        const std::vector<double> logits = detail::next_logits(store, x, out);
        // responses are nonempty, so EOS is only eligible after the first token
        const std::span<const TokenId> eligible =
            out.empty() ? std::span<const TokenId>(allowed).subspan(1) : std::span<const TokenId>(allowed);
        TokenId next = eligible[0];
        if (strategy.kind == DecodeStrategy::Kind::greedy) {
            for (TokenId id : eligible)
                if (logits[id] > logits[next]) next = id;
        } else {
            std::vector<TokenId> cands(eligible.begin(), eligible.end());
            if (strategy.kind == DecodeStrategy::Kind::top_k && strategy.k < cands.size()) {
                std::stable_sort(cands.begin(), cands.end(),
                                 [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
                cands.resize(strategy.k);
            }
            double mx = -std::numeric_limits<double>::infinity();
            for (TokenId id : cands) mx = std::max(mx, logits[id]);
            std::vector<double> w(cands.size());
            for (std::size_t i = 0; i < cands.size(); ++i)
                w[i] = std::exp((logits[cands[i]] - mx) / strategy.temperature);
            next = cands[rng.categorical(w)];
        }
        if (next == Vocab::eos) break;
        out.push_back(next);
    }
    return response_seq(std::move(out));
}

} // namespace prefdiff
