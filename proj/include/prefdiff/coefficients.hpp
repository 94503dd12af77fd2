#pragma once

// Reward-difference coefficients: R from a scoring model, then max(R, eps)^alpha.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "params.hpp"
#include "transformer.hpp"

namespace prefdiff {

enum class CoefficientSource { none, reward_model, difference_model };

inline const char* to_string(CoefficientSource s) {
    switch (s) {
    case CoefficientSource::none: return "none";
    case CoefficientSource::reward_model: return "reward_model";
    case CoefficientSource::difference_model: return "difference_model";
    }
    return "?";
}

inline CoefficientSource parse_coefficient_source(const std::string& s) {
    if (s == "none") return CoefficientSource::none;
    if (s == "reward_model" || s == "reward-model" || s == "reward") return CoefficientSource::reward_model;
    if (s == "difference_model" || s == "difference-model" || s == "difference") return CoefficientSource::difference_model;
    throw ConfigError("coefficients.source: unknown value '" + s + "' (expected none|reward_model|difference_model)");
}

struct CoefficientConfig {
    CoefficientSource source = CoefficientSource::none;
    double alpha = 0.5;
    double clamp_epsilon = 1e-2;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("coefficients.alpha must lie in [0, 1]");
        if (!(clamp_epsilon > 0.0)) throw ConfigError("coefficients.clamp_epsilon must be positive");
    }
};

inline ModelKind required_kind(CoefficientSource s) {
    return s == CoefficientSource::reward_model ? ModelKind::reward : ModelKind::difference;
}

/// R for one comparison: r(x, y_w) - r(x, y_l), f(x, y_w, y_l), or 1 with no source.
inline double raw_difference(const PreferencePair& pair, CoefficientSource source, const ParameterStore* model) {
    if (source == CoefficientSource::none) return 1.0;
    const ModelKind need = required_kind(source);
    if (model == nullptr)
        throw ConfigError(std::string("coefficient source ") + to_string(source) + " requires a " + to_string(need) +
                          " model checkpoint");
    if (model->kind() != need)
        throw ConfigError(std::string("coefficient source ") + to_string(source) + " requires a " + to_string(need) +
                          " model checkpoint, got " + to_string(model->kind()));
    if (source == CoefficientSource::reward_model)
        return reward_value(*model, pair.query, pair.y_w) - reward_value(*model, pair.query, pair.y_l);
    return difference_value(*model, pair.query, pair.y_w, pair.y_l);
}

/// max(raw, eps)^alpha, with alpha = 0 giving exactly 1.
inline double apply_alpha(double raw, const CoefficientConfig& cfg) {
    if (cfg.alpha == 0.0) return 1.0;
    return std::pow(std::max(raw, cfg.clamp_epsilon), cfg.alpha);
}

struct AnnotationStats {
    std::size_t pair_count = 0;
    std::size_t clamped_pair_count = 0;

    nlohmann::json to_json(const CoefficientConfig& cfg) const {
        return {{"source", to_string(cfg.source)},
                {"alpha", cfg.alpha},
                {"clamp_epsilon", cfg.clamp_epsilon},
                {"pair_count", pair_count},
                {"clamped_pair_count", clamped_pair_count}};
    }
};

/// Writes raw_difference and coefficient into every pair. The input records
/// are left untouched; the annotated copy is returned.
inline std::vector<PreferenceRecord> annotate_dataset(const std::vector<PreferenceRecord>& records,
                                                      const CoefficientConfig& cfg, const ParameterStore* model,
                                                      AnnotationStats* stats = nullptr) {
    cfg.validate();
    std::vector<PreferenceRecord> out = records;
    AnnotationStats s;
    for (std::size_t r = 0; r < out.size(); ++r) {
        PreferenceRecord& rec = out[r];
        for (auto& p : rec.pairs) {
            const PreferencePair pair{rec.query, rec.responses[p.w], rec.responses[p.l], p.source, p.gt_gap};
            double raw = 0.0;
            try {
                raw = raw_difference(pair, cfg.source, model);
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                throw DataError("annotate: record " + std::to_string(r) + ": " + e.what());
            }
            if (!std::isfinite(raw)) throw DataError("annotate: record " + std::to_string(r) + ": non-finite score");
            if (cfg.source != CoefficientSource::none && raw < cfg.clamp_epsilon) ++s.clamped_pair_count;
            p.raw_difference = raw;
            p.coefficient = cfg.source == CoefficientSource::none ? 1.0 : apply_alpha(raw, cfg);
            ++s.pair_count;
        }
    }
    if (stats != nullptr) *stats = s;
    return out;
}

} // namespace prefdiff
