#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace prefdiff {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. A scalar has shape {1}.
class Array {
public:
    Array() : shape_{1}, data_(1, 0.0) {}

    Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_.empty()) throw ShapeError("array shape must have at least one dimension");
        for (std::size_t d : shape_)
            if (d == 0) throw ShapeError("array dimensions must be positive, got " + shape_str(shape_));
        if (shape_size(shape_) != data_.size())
            throw ShapeError("array shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }

    static Array zeros(Shape shape) {
        const auto n = shape_size(shape);
        return Array(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Array filled(Shape shape, double value) {
        const auto n = shape_size(shape);
        return Array(std::move(shape), std::vector<double>(n, value));
    }
    static Array scalar(double value) { return Array({1}, {value}); }
    static Array vector(std::vector<double> values) {
        const auto n = values.size();
        return Array({n}, std::move(values));
    }
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Array({rows, cols}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool is_scalar() const noexcept { return data_.size() == 1; }

    /// Rows/cols of a rank-2 array; rank-1 arrays read as a single row.
    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const noexcept { return shape_.back(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const {
        if (!is_scalar()) throw ShapeError("item() requires a scalar, got shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Array&, const Array&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

} // namespace prefdiff
