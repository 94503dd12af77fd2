#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "test_util.hpp"

using namespace prefdiff;
namespace ad = prefdiff::ad;

namespace {

Array random_matrix(Rng& rng, std::size_t m, std::size_t n, double scale = 1.0) {
    std::vector<double> v(m * n);
    for (double& x : v) x = rng.normal(0.0, scale);
    return Array::matrix(m, n, std::move(v));
}

struct OpCase {
    std::string name;
    std::function<std::vector<Array>(Rng&)> inputs;
    ScalarBuilder build;
};

// Each op is reduced to a scalar through a fixed random projection so every
// output element contributes to the checked gradient.
ad::Var project(ad::Tape& t, const ad::Var& v) {
    Rng rng(99);
    std::vector<double> w(v.value().size());
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    return ad::sum(ad::mul(ad::reshape(v, {v.value().size()}), t.constant(Array::vector(w))));
}

std::vector<OpCase> op_cases() {
    auto one = [](std::size_t m, std::size_t n) {
        return [m, n](Rng& r) { return std::vector<Array>{random_matrix(r, m, n)}; };
    };
    auto two = [](std::size_t m, std::size_t n) {
        return [m, n](Rng& r) { return std::vector<Array>{random_matrix(r, m, n), random_matrix(r, m, n)}; };
    };
    auto unary = [](ad::Var (*f)(const ad::Var&)) {
        return [f](ad::Tape& t, std::span<const ad::Var> x) { return project(t, f(x[0])); };
    };
    return {
        {"add", two(3, 4), [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::add(x[0], x[1])); }},
        {"sub", two(3, 4), [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::sub(x[0], x[1])); }},
        {"mul", two(3, 4), [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::mul(x[0], x[1])); }},
        {"square", one(3, 4), unary(&ad::square)},
        {"exp", one(3, 4), unary(&ad::exp)},
        {"log",
         [](Rng& r) {
             Array a = random_matrix(r, 3, 4);
             for (double& v : a.data()) v = 0.5 + std::abs(v);
             return std::vector<Array>{a};
         },
         unary(&ad::log)},
        {"sigmoid", one(3, 4), unary(&ad::sigmoid)},
        {"log_sigmoid", one(3, 4), unary(&ad::log_sigmoid)},
        {"tanh", one(3, 4), unary(&ad::tanh)},
        {"gelu", one(3, 4), unary(&ad::gelu)},
        {"softmax_rows", one(3, 5), unary(&ad::softmax_rows)},
        {"log_softmax_rows", one(3, 5), unary(&ad::log_softmax_rows)},
        {"causal_softmax_rows", one(4, 4),
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::causal_softmax_rows(x[0])); }},
        {"matmul",
         [](Rng& r) { return std::vector<Array>{random_matrix(r, 3, 4), random_matrix(r, 4, 2)}; },
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::matmul(x[0], x[1])); }},
        {"matmul_nt",
         [](Rng& r) { return std::vector<Array>{random_matrix(r, 3, 4), random_matrix(r, 5, 4)}; },
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::matmul_nt(x[0], x[1])); }},
        {"transpose", one(3, 4), unary(&ad::transpose)},
        {"add_bias",
         [](Rng& r) { return std::vector<Array>{random_matrix(r, 3, 4), random_matrix(r, 1, 4)}; },
         [](ad::Tape& t, std::span<const ad::Var> x) {
             return project(t, ad::add_bias(x[0], ad::reshape(x[1], {4})));
         }},
        {"layer_norm_rows",
         [](Rng& r) {
             return std::vector<Array>{random_matrix(r, 3, 6), random_matrix(r, 1, 6), random_matrix(r, 1, 6)};
         },
         [](ad::Tape& t, std::span<const ad::Var> x) {
             return project(t, ad::layer_norm_rows(x[0], ad::reshape(x[1], {6}), ad::reshape(x[2], {6})));
         }},
        {"gather_rows", one(5, 3),
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::gather_rows(x[0], {4, 0, 4, 2})); }},
        {"concat_cols", two(3, 2),
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::concat({x[0], x[1]}, 1)); }},
        {"slice_cols", one(3, 5),
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::slice_cols(x[0], 1, 3)); }},
        {"slice_rows", one(5, 3),
         [](ad::Tape& t, std::span<const ad::Var> x) { return project(t, ad::slice_rows(x[0], 2, 2)); }},
        {"mean", one(3, 4), [](ad::Tape&, std::span<const ad::Var> x) { return ad::mean(ad::square(x[0])); }},
    };
}

} // namespace

TEST(Autodiff, ForwardValuesOfBasicOps) {
    ad::Tape t;
    EXPECT_DOUBLE_EQ(ad::sigmoid(t.leaf(Array::scalar(0.0))).item(), 0.5);
    const ad::Var ls = ad::log_softmax_rows(t.leaf(Array::matrix(1, 3, {0.7, 0.7, 0.7})));
    for (double v : ls.value().data()) EXPECT_NEAR(v, -std::log(3.0), 1e-15);

    Rng rng(5);
    const Array m = random_matrix(rng, 3, 4);
    const ad::Var id = t.constant(Array::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    const ad::Var out = ad::matmul(id, t.leaf(m));
    EXPECT_EQ(out.value().values(), m.values());
}

TEST(Autodiff, ElementaryDerivatives) {
    ad::Tape t;
    const ad::Var x = t.leaf(Array::scalar(2.0));
    const ad::Var y = t.leaf(Array::scalar(3.0));
    EXPECT_DOUBLE_EQ(t.backward(ad::mul(x, y)).wrt(x).item(), 3.0);

    ad::Tape t2;
    const ad::Var z = t2.leaf(Array::scalar(0.0));
    EXPECT_DOUBLE_EQ(t2.backward(ad::sigmoid(z)).wrt(z).item(), 0.25);
}

TEST(Autodiff, EveryOpMatchesFiniteDifferencesOnSeededInputs) {
    for (const auto& c : op_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(derive_seed(seed, c.name));
            GradCheckOptions opts;
            opts.probes = 0;
            const auto r = check_gradients(c.inputs(rng), c.build, opts);
            worst = std::max(worst, r.max_relative_error);
        }
        EXPECT_LT(worst, 1e-6) << c.name;
    }
}

TEST(Autodiff, GradientShapeEqualsValueShape) {
    ad::Tape t;
    Rng rng(1);
    const ad::Var a = t.leaf(random_matrix(rng, 3, 4));
    const ad::Var b = t.leaf(random_matrix(rng, 4, 2));
    const ad::Var loss = ad::sum(ad::matmul(a, b));
    const auto g = t.backward(loss);
    EXPECT_EQ(g.wrt(a).shape(), a.shape());
    EXPECT_EQ(g.wrt(b).shape(), b.shape());
}

TEST(Autodiff, ParentsAlwaysPrecedeChildren) {
    ad::Tape t;
    Rng rng(2);
    const ad::Var a = t.leaf(random_matrix(rng, 2, 2));
    ad::Var v = a;
    for (int i = 0; i < 5; ++i) v = ad::add(ad::tanh(v), ad::square(a));
    for (std::size_t id = 0; id < t.size(); ++id)
        for (std::size_t p : t.parents(id)) EXPECT_LT(p, id);
}

TEST(Autodiff, ReusedNodeAccumulatesGradient) {
    ad::Tape t;
    const ad::Var x = t.leaf(Array::scalar(1.5));
    const ad::Var y = ad::add(ad::mul(x, x), x); // x^2 + x
    EXPECT_DOUBLE_EQ(t.backward(y).wrt(x).item(), 2 * 1.5 + 1);
}

TEST(Autodiff, ConstantsAndDetachReceiveNoGradient) {
    ad::Tape t;
    const ad::Var x = t.leaf(Array::scalar(2.0));
    const ad::Var c = t.constant(Array::scalar(4.0));
    const ad::Var y = ad::add(ad::mul(x, c), ad::mul(ad::detach(x), x));
    const auto g = t.backward(y);
    EXPECT_DOUBLE_EQ(g.wrt(x).item(), 4.0 + 2.0);
    EXPECT_FALSE(g.has(c));
    EXPECT_FALSE(c.requires_grad());
}

TEST(Autodiff, ShapeMismatchesAreRejected) {
    ad::Tape t;
    const ad::Var a = t.leaf(Array::zeros({2, 3}));
    const ad::Var b = t.leaf(Array::zeros({3, 2}));
    EXPECT_THROW(ad::add(a, b), ShapeError);
    EXPECT_THROW(ad::matmul(a, a), ShapeError);
    EXPECT_THROW(ad::gather_rows(a, {5}), ShapeError);
}

TEST(Autodiff, MixingTapesIsRejected) {
    ad::Tape t1, t2;
    const ad::Var a = t1.leaf(Array::scalar(1.0));
    const ad::Var b = t2.leaf(Array::scalar(1.0));
    EXPECT_THROW(ad::add(a, b), Error);
    EXPECT_THROW(t2.backward(a), Error);
}

TEST(Autodiff, SigmoidIsStableForLargeInputs) {
    ad::Tape t;
    const ad::Var x = t.leaf(Array::vector({-800.0, 800.0}));
    const ad::Var ls = ad::log_sigmoid(x);
    EXPECT_TRUE(std::isfinite(ls.value()[0]));
    EXPECT_NEAR(ls.value()[0], -800.0, 1e-9);
    EXPECT_EQ(ls.value()[1], 0.0);
    const auto g = t.backward(ad::sum(ls));
    EXPECT_NEAR(g.wrt(x)[0], 1.0, 1e-12);
    EXPECT_NEAR(g.wrt(x)[1], 0.0, 1e-12);
}

TEST(GradCheck, FlagsAWrongGradient) {
    // Detaching one factor hides half of the gradient from the tape.
    const ScalarBuilder wrong = [](ad::Tape&, std::span<const ad::Var> x) {
        return ad::sum(ad::mul(ad::detach(x[0]), x[0]));
    };
    GradCheckOptions opts;
    opts.probes = 0;
    const auto r = check_gradients({Array::vector({1.0, -2.0, 3.0})}, wrong, opts);
    EXPECT_GT(r.max_relative_error, 0.1);
}
