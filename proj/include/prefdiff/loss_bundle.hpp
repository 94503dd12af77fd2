#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "autodiff.hpp"
#include "error.hpp"

namespace prefdiff {

/// Scalar loss value plus its named components, for logging.
struct LossBundle {
    double total = 0.0;
    std::map<std::string, double> components;

    nlohmann::json to_json() const { return {{"total", total}, {"components", components}}; }
};

/// A differentiable loss together with its reporting bundle.
struct Loss {
    ad::Var value;
    LossBundle bundle;
};

namespace detail {

inline void require_batch(const ad::Var& v, const char* what) {
    if (v.value().size() == 0) throw DataError(std::string(what) + ": empty batch");
}

inline void require_batch(std::size_t n, const char* what) {
    if (n == 0) throw DataError(std::string(what) + ": empty batch");
}

} // namespace detail

} // namespace prefdiff
