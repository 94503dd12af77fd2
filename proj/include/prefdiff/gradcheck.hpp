#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace prefdiff {

struct GradCheckOptions {
    double step = 1e-5;
    /// Number of randomly chosen coordinates to probe; 0 probes every coordinate.
    std::size_t probes = 20;
    /// Denominator floor of the relative error. Central differences cannot
    /// resolve gradients much below this, so they are compared absolutely.
    double floor = 1e-5;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t probes = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Builds a scalar expression from leaf inputs on a fresh tape.
using ScalarBuilder = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `build` against central finite differences.
inline GradCheckResult check_gradients(const std::vector<Array>& inputs, const ScalarBuilder& build,
                                       const GradCheckOptions& opts = {}) {
    auto evaluate = [&](const std::vector<Array>& xs) {
        ad::Tape tape;
        std::vector<ad::Var> leaves;
        leaves.reserve(xs.size());
        for (const Array& x : xs) leaves.push_back(tape.leaf(x));
        return build(tape, leaves).item();
    };

    std::vector<Array> analytic;
    {
        ad::Tape tape;
        std::vector<ad::Var> leaves;
        for (const Array& x : inputs) leaves.push_back(tape.leaf(x));
        const ad::Var root = build(tape, leaves);
        const auto grads = tape.backward(root);
        for (const auto& l : leaves) analytic.push_back(grads.wrt(l));
    }

    // (input, element) coordinates to probe
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.emplace_back(i, j);
    if (opts.probes != 0 && opts.probes < coords.size()) {
        Rng rng(opts.seed);
        rng.shuffle(std::span(coords));
        coords.resize(opts.probes);
    }

    GradCheckResult result;
    std::vector<Array> xs = inputs;
    for (const auto& [i, j] : coords) {
        const double orig = xs[i][j];
        xs[i][j] = orig + opts.step;
        const double plus = evaluate(xs);
        xs[i][j] = orig - opts.step;
        const double minus = evaluate(xs);
        xs[i][j] = orig;
        const double numeric = (plus - minus) / (2.0 * opts.step);
        const double err = relative_error(analytic[i][j], numeric, opts.floor);
        if (err >= result.max_relative_error) {
            result.max_relative_error = err;
            result.worst_analytic = analytic[i][j];
            result.worst_numeric = numeric;
        }
        ++result.probes;
    }
    return result;
}

} // namespace prefdiff
