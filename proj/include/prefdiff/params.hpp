#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "array.hpp"
#include "error.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace prefdiff {

enum class ModelKind { policy, reward, difference };

inline const char* to_string(ModelKind kind) {
    switch (kind) {
    case ModelKind::policy: return "policy";
    case ModelKind::reward: return "reward";
    case ModelKind::difference: return "difference";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "policy") return ModelKind::policy;
    if (s == "reward") return ModelKind::reward;
    if (s == "difference") return ModelKind::difference;
    throw ConfigError("model_kind: unknown value '" + s + "' (expected policy|reward|difference)");
}

struct BackboneConfig {
    std::size_t layers = 2;
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t max_len = 128;

    std::size_t head_dim() const noexcept { return width / heads; }
    std::size_t mlp_width() const noexcept { return 4 * width; }

    void validate() const {
        if (layers == 0) throw ConfigError("model.layers must be positive");
        if (heads == 0 || width == 0 || width % heads != 0)
            throw ConfigError("model.width (" + std::to_string(width) + ") must be a positive multiple of model.heads (" +
                              std::to_string(heads) + ")");
        if (max_len < 8) throw ConfigError("model.max_len must be at least 8, got " + std::to_string(max_len));
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct ModelMeta {
    ModelKind kind = ModelKind::policy;
    std::size_t vocab_size = 64;
    BackboneConfig config;
    std::uint64_t seed = 0;

    friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

/// Named parameter arrays of one model plus the metadata needed to rebuild it.
/// Iteration order is by name, which fixes the order of every reduction over
/// parameters (optimizer steps, digests, checkpoints).
class ParameterStore {
public:
    ParameterStore() = default;
    explicit ParameterStore(ModelMeta meta) : meta_(std::move(meta)) {}

    const ModelMeta& meta() const noexcept { return meta_; }
    ModelKind kind() const noexcept { return meta_.kind; }
    const BackboneConfig& config() const noexcept { return meta_.config; }
    Vocab vocab() const { return Vocab{meta_.vocab_size}; }

    void add(const std::string& name, Array value) {
        if (!params_.emplace(name, std::move(value)).second) throw Error("duplicate parameter name '" + name + "'");
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const Array& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter '" + name + "' in " + to_string(meta_.kind) + " model");
        return it->second;
    }
    Array& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter '" + name + "' in " + to_string(meta_.kind) + " model");
        return it->second;
    }

    const std::map<std::string, Array>& params() const noexcept { return params_; }
    std::map<std::string, Array>& params() noexcept { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, a] : params_) n += a.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& [_, a] : params_)
            if (!a.all_finite()) return false;
        return true;
    }

private:
    ModelMeta meta_;
    std::map<std::string, Array> params_;
};

namespace detail {

inline Array random_array(Rng& rng, Shape shape, double stddev) {
    Array a = Array::zeros(std::move(shape));
    for (double& v : a.data()) v = rng.normal(0.0, stddev);
    return a;
}

} // namespace detail

/// Fresh randomly initialized model. The three kinds share the backbone
/// layout and differ only in the head: an LM head for the policy, a scalar
/// head for the reward and difference models.
inline ParameterStore init_model(ModelKind kind, const Vocab& vocab, const BackboneConfig& cfg, std::uint64_t seed) {
    vocab.validate();
    cfg.validate();
    ParameterStore store(ModelMeta{kind, vocab.size, cfg, seed});
    Rng rng(seed);
    const std::size_t d = cfg.width;
    const std::size_t h = cfg.mlp_width();
    const double emb_std = 0.1;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));

    store.add("tok_emb", detail::random_array(rng, {vocab.size, d}, emb_std));
    store.add("pos_emb", detail::random_array(rng, {cfg.max_len, d}, emb_std));
    store.add("seg_emb", detail::random_array(rng, {3, d}, emb_std));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "blk" + std::to_string(l) + ".";
        store.add(p + "ln1.g", Array::filled({d}, 1.0));
        store.add(p + "ln1.b", Array::zeros({d}));
        store.add(p + "attn.wq", detail::random_array(rng, {d, d}, in_std));
        store.add(p + "attn.wk", detail::random_array(rng, {d, d}, in_std));
        store.add(p + "attn.wv", detail::random_array(rng, {d, d}, in_std));
        store.add(p + "attn.wo", detail::random_array(rng, {d, d}, in_std * out_scale));
        store.add(p + "ln2.g", Array::filled({d}, 1.0));
        store.add(p + "ln2.b", Array::zeros({d}));
        store.add(p + "mlp.w1", detail::random_array(rng, {d, h}, in_std));
        store.add(p + "mlp.b1", Array::zeros({h}));
        store.add(p + "mlp.w2", detail::random_array(rng, {h, d}, out_scale / std::sqrt(static_cast<double>(h))));
        store.add(p + "mlp.b2", Array::zeros({d}));
    }
    store.add("ln_f.g", Array::filled({d}, 1.0));
    store.add("ln_f.b", Array::zeros({d}));
    if (kind == ModelKind::policy) {
        store.add("lm_head.w", detail::random_array(rng, {d, vocab.size}, 0.02));
        store.add("lm_head.b", Array::zeros({vocab.size}));
    } else {
        store.add("score_head.w", detail::random_array(rng, {d, 1}, in_std));
        store.add("score_head.b", Array::zeros({1}));
    }
    return store;
}

} // namespace prefdiff
