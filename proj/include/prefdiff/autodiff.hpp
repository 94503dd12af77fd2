#pragma once

// Tape-based reverse-mode automatic differentiation over dense double arrays.
//
// A Tape owns every node created while building an expression. Var is a light
// handle (tape pointer + node index). Nodes are appended in creation order, so
// the tape is always topologically sorted and backward() is a single reverse
// sweep. Nodes whose parents need no gradient store no backward rule, which
// makes "constant" sub-graphs (reference policies, frozen coefficients) free
// of gradient flow by construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "array.hpp"
#include "error.hpp"

namespace prefdiff::ad {

class Tape;

class Var {
public:
    Var() = default;

    const Array& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
    std::size_t id() const noexcept { return id_; }
    Tape& tape() const noexcept { return *tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// View handed to a backward rule: upstream gradient, the node's inputs and
/// lazily allocated gradient buffers for each input.
class BackwardContext {
public:
    BackwardContext(const Tape& tape, std::span<const std::size_t> parents, const Array& output,
                    const std::vector<double>& upstream, std::vector<std::vector<double>>& grads)
        : tape_(tape), parents_(parents), output_(output), upstream_(upstream), grads_(grads) {}

    std::span<const double> upstream() const noexcept { return upstream_; }
    const Array& output() const noexcept { return output_; }
    const Array& input(std::size_t k) const;

    /// Gradient accumulator of input k; empty span when that input needs no gradient.
    std::span<double> grad(std::size_t k);

private:
    const Tape& tape_;
    std::span<const std::size_t> parents_;
    const Array& output_;
    const std::vector<double>& upstream_;
    std::vector<std::vector<double>>& grads_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Result of a backward sweep: gradient of the root with respect to each node.
class Gradients {
public:
    Gradients() = default;
    Gradients(std::vector<std::vector<double>> grads, std::vector<Shape> shapes)
        : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

    bool has(const Var& v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

    /// Gradient with respect to v; zeros when v does not influence the root.
    Array wrt(const Var& v) const {
        if (v.id() >= shapes_.size()) throw Error("gradient requested for a node not on this tape");
        if (!has(v)) return Array::zeros(shapes_[v.id()]);
        return Array(shapes_[v.id()], grads_[v.id()]);
    }

private:
    std::vector<std::vector<double>> grads_;
    std::vector<Shape> shapes_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var leaf(Array value) { return push(std::move(value), {}, nullptr, true, true); }

    /// Input that never receives a gradient.
    Var constant(Array value) { return push(std::move(value), {}, nullptr, false, true); }

    /// Appends an op node. The rule is dropped when no parent requires a gradient.
    Var record(Array value, std::vector<Var> parents, BackwardFn rule) {
        std::vector<std::size_t> ids;
        ids.reserve(parents.size());
        bool needs = false;
        for (const Var& p : parents) {
            if (&p.tape() != this) throw Error("op mixes nodes from different tapes");
            ids.push_back(p.id());
            needs = needs || nodes_[p.id()].requires_grad;
        }
        return push(std::move(value), std::move(ids), needs ? std::move(rule) : nullptr, needs, false);
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Array& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Number of differentiable leaves on the tape.
    std::size_t leaf_count() const {
        return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) {
            return n.is_leaf && n.requires_grad;
        }));
    }

    std::vector<std::size_t> parents(std::size_t id) const { return nodes_.at(id).parents; }

    Gradients backward(const Var& root) const {
        if (&root.tape() != this) throw Error("backward root belongs to a different tape");
        const Array& rv = nodes_[root.id()].value;
        if (!rv.is_scalar())
            throw ShapeError("backward requires a scalar root, got shape " + shape_str(rv.shape()));

        std::vector<std::vector<double>> grads(nodes_.size());
        grads[root.id()] = {1.0};
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (grads[i].empty() || !node.backward) continue;
            BackwardContext ctx(*this, node.parents, node.value, grads[i], grads);
            node.backward(ctx);
        }
        std::vector<Shape> shapes;
        shapes.reserve(nodes_.size());
        for (const Node& n : nodes_) shapes.push_back(n.value.shape());
        // gradients of non-differentiable nodes are not reported
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (!nodes_[i].requires_grad) grads[i].clear();
        return Gradients(std::move(grads), std::move(shapes));
    }

private:
    friend class BackwardContext;

    struct Node {
        Array value;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    Var push(Array value, std::vector<std::size_t> parents, BackwardFn rule, bool requires_grad, bool is_leaf) {
        nodes_.push_back(Node{std::move(value), std::move(parents), std::move(rule), requires_grad, is_leaf});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline const Array& BackwardContext::input(std::size_t k) const { return tape_.value(parents_[k]); }

inline std::span<double> BackwardContext::grad(std::size_t k) {
    const std::size_t id = parents_[k];
    if (!tape_.nodes_[id].requires_grad) return {};
    auto& g = grads_[id];
    if (g.empty()) g.assign(tape_.nodes_[id].value.size(), 0.0);
    return g;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace kernel {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank2(const Var& a, const char* op) {
    if (a.value().rank() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
}

/// Elementwise unary op; deriv(x, y) returns dy/dx.
template <typename F, typename D>
Var unary(const Var& a, F f, D deriv) {
    const Array& x = a.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return a.tape().record(Array(x.shape(), std::move(out)), {a}, [deriv](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        if (g.empty()) return;
        const Array& x = ctx.input(0);
        const Array& y = ctx.output();
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * deriv(x[i], y[i]);
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_log_sigmoid(double x) {
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

} // namespace kernel

inline Var add(const Var& a, const Var& b) {
    kernel::require_same_shape(a, b, "add");
    const Array& x = a.value();
    const Array& y = b.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return a.tape().record(Array(x.shape(), std::move(out)), {a, b}, [](BackwardContext& ctx) {
        auto up = ctx.upstream();
        for (std::size_t k = 0; k < 2; ++k)
            if (auto g = ctx.grad(k); !g.empty())
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    kernel::require_same_shape(a, b, "sub");
    const Array& x = a.value();
    const Array& y = b.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return a.tape().record(Array(x.shape(), std::move(out)), {a, b}, [](BackwardContext& ctx) {
        auto up = ctx.upstream();
        if (auto g = ctx.grad(0); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
        if (auto g = ctx.grad(1); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= up[i];
    });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    kernel::require_same_shape(a, b, "mul");
    const Array& x = a.value();
    const Array& y = b.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return a.tape().record(Array(x.shape(), std::move(out)), {a, b}, [](BackwardContext& ctx) {
        auto up = ctx.upstream();
        const Array& x = ctx.input(0);
        const Array& y = ctx.input(1);
        if (auto g = ctx.grad(0); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * y[i];
        if (auto g = ctx.grad(1); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * x[i];
    });
}

inline Var scale(const Var& a, double s) {
    return kernel::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double c) {
    return kernel::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var square(const Var& a) {
    return kernel::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
    return kernel::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Natural log; nonpositive inputs produce NaN/-inf as in std::log.
inline Var log(const Var& a) {
    return kernel::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sigmoid(const Var& a) {
    return kernel::unary(a, kernel::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

/// log(sigmoid(x)) without overflow for large |x|.
inline Var log_sigmoid(const Var& a) {
    return kernel::unary(a, kernel::stable_log_sigmoid,
                         [](double x, double) { return kernel::stable_sigmoid(-x); });
}

inline Var tanh(const Var& a) {
    return kernel::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// max(x, c) elementwise; the gradient is 1 where x > c and 0 elsewhere.
inline Var max_const(const Var& a, double c) {
    return kernel::unary(a, [c](double x) { return x > c ? x : c; },
                         [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Var relu(const Var& a) { return max_const(a, 0.0); }

/// tanh approximation of GELU.
inline Var gelu(const Var& a) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    constexpr double c = 0.044715;
    return kernel::unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(k * (x + c * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
        });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.tape().record(Array::scalar(s), {a}, [](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        const double up = ctx.upstream()[0];
        for (double& v : g) v += up;
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Matrix product [m,k] x [k,n] -> [m,n].
inline Var matmul(const Var& a, const Var& b) {
    kernel::require_rank2(a, "matmul");
    kernel::require_rank2(b, "matmul");
    const Array& x = a.value();
    const Array& y = b.value();
    const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    if (y.rows() != k)
        throw ShapeError("matmul: inner dimensions differ " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            const double* yr = &y.data()[p * n];
            double* o = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += xv * yr[j];
        }
    return a.tape().record(Array({m, n}, std::move(out)), {a, b}, [m, k, n](BackwardContext& ctx) {
        auto up = ctx.upstream();
        const Array& x = ctx.input(0);
        const Array& y = ctx.input(1);
        if (auto g = ctx.grad(0); !g.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += up[i * n + j] * y[p * n + j];
                    g[i * k + p] += s;
                }
        if (auto g = ctx.grad(1); !g.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double xv = x[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) g[p * n + j] += xv * up[i * n + j];
                }
    });
}

/// a * b^T for a [m,k], b [n,k] -> [m,n].
inline Var matmul_nt(const Var& a, const Var& b) {
    kernel::require_rank2(a, "matmul_nt");
    kernel::require_rank2(b, "matmul_nt");
    const Array& x = a.value();
    const Array& y = b.value();
    const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
    if (y.cols() != k)
        throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(x.shape()) + " x " +
                         shape_str(y.shape()) + "^T");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * y[j * k + p];
            out[i * n + j] = s;
        }
    return a.tape().record(Array({m, n}, std::move(out)), {a, b}, [m, k, n](BackwardContext& ctx) {
        auto up = ctx.upstream();
        const Array& x = ctx.input(0);
        const Array& y = ctx.input(1);
        if (auto g = ctx.grad(0); !g.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double u = up[i * n + j];
                    if (u == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) g[i * k + p] += u * y[j * k + p];
                }
        if (auto g = ctx.grad(1); !g.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double u = up[i * n + j];
                    if (u == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) g[j * k + p] += u * x[i * k + p];
                }
    });
}

inline Var transpose(const Var& a) {
    kernel::require_rank2(a, "transpose");
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return a.tape().record(Array({n, m}, std::move(out)), {a}, [m, n](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += up[j * m + i];
    });
}

/// Adds a bias vector [n] to every row of a [m,n].
inline Var add_bias(const Var& a, const Var& bias) {
    kernel::require_rank2(a, "add_bias");
    const Array& x = a.value();
    const Array& b = bias.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (b.rank() != 1 || b.size() != n)
        throw ShapeError("add_bias: bias shape " + shape_str(b.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    return a.tape().record(Array(x.shape(), std::move(out)), {a, bias}, [m, n](BackwardContext& ctx) {
        auto up = ctx.upstream();
        if (auto g = ctx.grad(0); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
        if (auto g = ctx.grad(1); !g.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += up[i * n + j];
    });
}

namespace kernel {

// Row-wise softmax over the first `visible(i)` entries of row i; the rest are 0.
template <typename Visible>
Var softmax_rows_impl(const Var& a, Visible visible, bool log_form, const char* op) {
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t vis = visible(i);
        if (vis == 0) throw ShapeError(std::string(op) + ": row with no visible entries");
        const double* row = &x.data()[i * n];
        double mx = row[0];
        for (std::size_t j = 1; j < vis; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < vis; ++j) z += std::exp(row[j] - mx);
        const double logz = mx + std::log(z);
        for (std::size_t j = 0; j < vis; ++j)
            out[i * n + j] = log_form ? row[j] - logz : std::exp(row[j] - logz);
    }
    return a.tape().record(Array(x.shape(), std::move(out)), {a}, [m, n, visible, log_form](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        const Array& y = ctx.output();
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t vis = visible(i);
            const std::size_t base = i * n;
            if (log_form) {
                double s = 0.0;
                for (std::size_t j = 0; j < vis; ++j) s += up[base + j];
                for (std::size_t j = 0; j < vis; ++j) g[base + j] += up[base + j] - std::exp(y[base + j]) * s;
            } else {
                double s = 0.0;
                for (std::size_t j = 0; j < vis; ++j) s += up[base + j] * y[base + j];
                for (std::size_t j = 0; j < vis; ++j) g[base + j] += y[base + j] * (up[base + j] - s);
            }
        }
    });
}

} // namespace kernel

/// Softmax along each row (rank-1 inputs are one row). Max-subtracted.
inline Var softmax_rows(const Var& a) {
    const std::size_t n = a.value().cols();
    return kernel::softmax_rows_impl(a, [n](std::size_t) { return n; }, false, "softmax_rows");
}

inline Var log_softmax_rows(const Var& a) {
    const std::size_t n = a.value().cols();
    return kernel::softmax_rows_impl(a, [n](std::size_t) { return n; }, true, "log_softmax_rows");
}

/// Softmax where row i only sees columns [0, i + offset]; masked entries are exactly 0.
inline Var causal_softmax_rows(const Var& a, std::size_t offset = 0) {
    kernel::require_rank2(a, "causal_softmax_rows");
    const std::size_t n = a.value().cols();
    return kernel::softmax_rows_impl(
        a, [n, offset](std::size_t i) { return std::min(n, i + offset + 1); }, false, "causal_softmax_rows");
}

/// Layer normalization of each row with learned gain and bias of length cols.
inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.value().size() != n || bias.value().size() != n)
        throw ShapeError("layer_norm_rows: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match row width of " + shape_str(x.shape()));
    const Array& g = gain.value();
    const Array& b = bias.value();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &x.data()[i * n];
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mu) * inv * g[j] + b[j];
    }
    return a.tape().record(Array(x.shape(), std::move(out)), {a, gain, bias}, [m, n, eps](BackwardContext& ctx) {
        auto up = ctx.upstream();
        const Array& x = ctx.input(0);
        const Array& gv = ctx.input(1);
        auto gx = ctx.grad(0);
        auto gg = ctx.grad(1);
        auto gb = ctx.grad(2);
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = &x.data()[i * n];
            double mu = 0.0;
            for (std::size_t j = 0; j < n; ++j) mu += row[j];
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= static_cast<double>(n);
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                xhat[j] = (row[j] - mu) * inv;
                const double u = up[i * n + j];
                if (!gg.empty()) gg[j] += u * xhat[j];
                if (!gb.empty()) gb[j] += u;
                dxhat[j] = u * gv[j];
                mean_d += dxhat[j];
                mean_dx += dxhat[j] * xhat[j];
            }
            if (gx.empty()) continue;
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    });
}

/// Elements of a (flat row-major indexing) gathered into a vector.
inline Var gather(const Var& a, std::vector<std::size_t> indices) {
    const Array& x = a.value();
    if (indices.empty()) throw ShapeError("gather: empty index list");
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.size())
            throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for shape " +
                             shape_str(x.shape()));
        out[i] = x[indices[i]];
    }
    const std::size_t n = indices.size();
    return a.tape().record(Array({n}, std::move(out)), {a}, [idx = std::move(indices)](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += up[i];
    });
}

/// Rows of a [m,n] selected by index -> [len, n]. Embedding lookup.
inline Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
    kernel::require_rank2(a, "gather_rows");
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (rows.empty()) throw ShapeError("gather_rows: empty row list");
    std::vector<double> out(rows.size() * n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m)
            throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for shape " +
                             shape_str(x.shape()));
        std::copy_n(&x.data()[rows[i] * n], n, &out[i * n]);
    }
    const std::size_t len = rows.size();
    return a.tape().record(Array({len, n}, std::move(out)), {a}, [n, idx = std::move(rows)](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += up[i * n + j];
    });
}

/// Concatenation along axis 0 (rows, or elements for rank-1) or axis 1 (columns).
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rank = parts[0].value().rank();
    if (rank > 2 || axis >= rank) throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for shape " +
                                                   shape_str(parts[0].shape()));
    for (const Var& p : parts)
        if (p.value().rank() != rank) throw ShapeError("concat: rank mismatch " + shape_str(parts[0].shape()) +
                                                       " vs " + shape_str(p.shape()));
    if (axis == 0) {
        const std::size_t n = rank == 2 ? parts[0].value().cols() : 1;
        std::size_t total = 0;
        std::vector<double> out;
        for (const Var& p : parts) {
            if (rank == 2 && p.value().cols() != n)
                throw ShapeError("concat: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
            total += rank == 2 ? p.value().rows() : p.value().size();
            out.insert(out.end(), p.value().data().begin(), p.value().data().end());
        }
        Shape shape = rank == 2 ? Shape{total, n} : Shape{total};
        return parts[0].tape().record(Array(std::move(shape), std::move(out)), parts, [](BackwardContext& ctx) {
            auto up = ctx.upstream();
            std::size_t offset = 0;
            for (std::size_t k = 0;; ++k) {
                if (offset >= up.size()) break;
                const std::size_t len = ctx.input(k).size();
                if (auto g = ctx.grad(k); !g.empty())
                    for (std::size_t i = 0; i < len; ++i) g[i] += up[offset + i];
                offset += len;
            }
        });
    }
    const std::size_t m = parts[0].value().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.value().rows() != m)
            throw ShapeError("concat: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        widths.push_back(p.value().cols());
        total += widths.back();
    }
    std::vector<double> out(m * total);
    for (std::size_t i = 0, col = 0; i < parts.size(); col += widths[i], ++i) {
        const Array& x = parts[i].value();
        for (std::size_t r = 0; r < m; ++r)
            std::copy_n(&x.data()[r * widths[i]], widths[i], &out[r * total + col]);
    }
    return parts[0].tape().record(Array({m, total}, std::move(out)), parts, [m, total, widths](BackwardContext& ctx) {
        auto up = ctx.upstream();
        for (std::size_t k = 0, col = 0; k < widths.size(); col += widths[k], ++k) {
            auto g = ctx.grad(k);
            if (g.empty()) continue;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += up[r * total + col + j];
        }
    });
}

/// Columns [start, start+len) of a matrix.
inline Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
    kernel::require_rank2(a, "slice_cols");
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (len == 0 || start + len > n)
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for shape " + shape_str(x.shape()));
    std::vector<double> out(m * len);
    for (std::size_t r = 0; r < m; ++r) std::copy_n(&x.data()[r * n + start], len, &out[r * len]);
    return a.tape().record(Array({m, len}, std::move(out)), {a}, [m, n, start, len](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < len; ++j) g[r * n + start + j] += up[r * len + j];
    });
}

/// Rows [start, start+len) of a matrix.
inline Var slice_rows(const Var& a, std::size_t start, std::size_t len) {
    kernel::require_rank2(a, "slice_rows");
    const Array& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (len == 0 || start + len > m)
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for shape " + shape_str(x.shape()));
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                            x.data().begin() + static_cast<std::ptrdiff_t>((start + len) * n));
    return a.tape().record(Array({len, n}, std::move(out)), {a}, [n, start](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < up.size(); ++i) g[start * n + i] += up[i];
    });
}

inline Var reshape(const Var& a, Shape shape) {
    if (shape_size(shape) != a.value().size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return a.tape().record(Array(std::move(shape), a.value().values()), {a}, [](BackwardContext& ctx) {
        auto g = ctx.grad(0);
        auto up = ctx.upstream();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
    });
}

/// Stacks scalar nodes into a rank-1 vector.
inline Var stack(const std::vector<Var>& scalars) {
    for (const Var& s : scalars)
        if (s.value().rank() != 1) throw ShapeError("stack: expected rank-1 inputs, got " + shape_str(s.shape()));
    return concat(scalars, 0);
}

/// Copy of a's value that carries no gradient.
inline Var detach(const Var& a) { return a.tape().constant(a.value()); }

} // namespace prefdiff::ad
