#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "silencer/numerics/exact_sum.hpp"
#include "silencer/numerics/rng.hpp"
#include "silencer/numerics/tape.hpp"
#include "silencer/numerics/tensor.hpp"

using namespace silencer;
using namespace silencer::numerics;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) {
        v = rng.normal(0.0, scale);
    }
    return t;
}

// Differentiate a scalar-valued graph built by `build` with respect to one leaf,
// then compare against central differences.
oracle::GradCheckResult check_op(const Tensor& x0, const std::function<Var(Tape&, Var)>& build) {
    Tape tape;
    Var x = tape.leaf(x0);
    Var out = build(tape, x);
    const Tensor g = tape.backward(out)[x];
    auto f = [&](const std::vector<double>& xs) {
        Tape t2;
        Var v = t2.leaf(Tensor(x0.shape(), xs));
        return t2.value(build(t2, v))[0];
    };
    return oracle::check_gradient(f, x0.values(), g.values());
}

} // namespace

TEST(Matmul, IdentityTimesColumn) {
    const Tensor a = Tensor::from_rows({{1, 0}, {0, 1}});
    const Tensor b = Tensor::from_rows({{3}, {4}});
    EXPECT_EQ(matmul(a, b), b);
}

TEST(Matmul, RowTimesColumn) {
    const Tensor out = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
    ASSERT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_EQ(out[0], 11.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    EXPECT_THROW(matmul(Tensor::matrix(2, 3), Tensor::matrix(4, 1)), DimensionError);
}

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Softmax, SymmetricPair) {
    const auto p = softmax(std::vector<double>{0.0, 0.0});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, MaskedEntryIsExactlyZero) {
    const auto p = masked_softmax(std::vector<double>{1.0, 2.0, 3.0}, {false, false, true});
    const double expected = std::exp(1.0) / (std::exp(1.0) + std::exp(2.0));
    EXPECT_NEAR(p[0], expected, 1e-15);
    EXPECT_NEAR(p[0], 0.2689414213699951, 1e-15);
    EXPECT_NEAR(p[1], 0.7310585786300049, 1e-15);
    EXPECT_EQ(p[2], 0.0);
}

TEST(Softmax, FullyMaskedThrows) {
    EXPECT_THROW(masked_softmax(std::vector<double>{1.0, 2.0}, {true, true}), PreconditionError);
}

TEST(Softmax, SumsToOneOverWideRange) {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + rng.index(30);
        std::vector<double> z(n);
        for (double& v : z) {
            v = rng.uniform(-50.0, 50.0);
        }
        const auto p = softmax(z);
        double s = 0.0;
        for (double v : p) {
            ASSERT_GE(v, 0.0);
            s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Softmax, TensorAxes) {
    const Tensor z = Tensor::from_rows({{0, 0}, {1, 1}});
    const Tensor rows = softmax(z, 1);
    EXPECT_DOUBLE_EQ(rows.at(0, 0), 0.5);
    const Tensor cols = softmax(z, 0);
    EXPECT_NEAR(cols.at(1, 0), std::exp(1.0) / (1.0 + std::exp(1.0)), 1e-15);
    EXPECT_NEAR(cols.at(0, 1) + cols.at(1, 1), 1.0, 1e-15);
}

TEST(Backward, SquareAtThree) {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0));
    Var y = mul(x, x);
    EXPECT_DOUBLE_EQ(tape.backward(y)[x][0], 6.0);
}

TEST(Backward, ConstantHasZeroGradient) {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(2.0));
    Var c = tape.constant(Tensor::scalar(5.0));
    Var y = mul(x, c);
    const Gradients g = tape.backward(y);
    EXPECT_DOUBLE_EQ(g[x][0], 5.0);
    EXPECT_DOUBLE_EQ(g[c][0], 0.0);
}

TEST(Backward, NonScalarOutputThrows) {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix(2, 2, 1.0));
    EXPECT_THROW(tape.backward(x), PreconditionError);
}

TEST(Backward, ForeignNodeThrows) {
    Tape a;
    Tape b;
    Var x = a.leaf(Tensor::scalar(1.0));
    Var y = b.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(b.backward(x), PreconditionError);
    EXPECT_THROW(add(x, y), PreconditionError);
    const Gradients g = b.backward(y);
    EXPECT_THROW(g[x], PreconditionError);
}

TEST(Backward, NonFiniteValueIsSurfaced) {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(1e200));
    EXPECT_THROW(mul(x, x), NumericalError);
}

TEST(GradCheck, EveryPrimitive) {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor w = random_matrix(rng, 4, 3);
        const Tensor other = random_matrix(rng, 3, 3);
        const Tensor bias = random_matrix(rng, 1, 3);
        const Tensor x0 = random_matrix(rng, 3, 4);
        const std::vector<bool> keep{true, false, true};

        const std::vector<std::function<Var(Tape&, Var)>> graphs = {
            [&](Tape& t, Var x) { return sum(matmul(x, t.constant(w))); },
            [&](Tape& t, Var x) { return sum(mul(matmul(x, t.constant(w)), t.constant(other))); },
            [&](Tape& t, Var x) { return sum(sigmoid(add_row(matmul(x, t.constant(w)), t.constant(bias)))); },
            [&](Tape& t, Var x) { return sum(mul(tanh(matmul(x, t.constant(w))), t.constant(other))); },
            [&](Tape&, Var x) { return sum(mul(slice_cols(x, 1, 2), slice_cols(x, 2, 2))); },
            [&](Tape&, Var x) { return sum(mul(concat_cols({x, tanh(x)}), concat_cols({x, x}))); },
            [&](Tape& t, Var x) {
                Var a = matmul(x, t.constant(w));
                return sum(mul(select_rows(keep, tanh(a), sigmoid(a)), t.constant(other)));
            },
            [&](Tape&, Var x) { return sum(mul(gather_rows(x, {2, 0, 2}), gather_rows(x, {1, 1, 0}))); },
            [&](Tape&, Var x) { return sum(tanh(gather_concat(x, 2, 3, {0, 1, 2, 2, 2, 1}))); },
            [&](Tape& t, Var x) {
                Var z = slice_cols(matmul(x, t.constant(w)), 0, 1);
                return bce_with_logits(z, {1.0, 0.0, 1.0}, {1.0, 0.5, 0.0});
            },
            [&](Tape& t, Var x) { return sum(scale(sub(tanh(x), t.constant(x0)), -1.7)); },
        };
        for (std::size_t g = 0; g < graphs.size(); ++g) {
            const auto r = check_op(x0, graphs[g]);
            EXPECT_TRUE(r.ok) << "graph " << g << " trial " << trial << " rel error " << r.max_rel_error;
        }
    }
}

TEST(BceWithLogits, LnTwoAtZero) {
    EXPECT_NEAR(bce_with_logits(0.0, 1.0), std::log(2.0), 1e-9);
    EXPECT_NEAR(bce_with_logits(0.0, 0.0), std::log(2.0), 1e-9);
}

TEST(BceWithLogits, FiniteForLargeLogits) {
    for (double z : {-500.0, -50.0, 50.0, 500.0}) {
        for (double y : {0.0, 1.0}) {
            EXPECT_TRUE(std::isfinite(bce_with_logits(z, y)));
        }
    }
    EXPECT_NEAR(bce_with_logits(500.0, 0.0), 500.0, 1e-9);
    EXPECT_NEAR(bce_with_logits(500.0, 1.0), 0.0, 1e-12);
}

TEST(SolveSpd, RecoversKnownSolution) {
    const Tensor a = Tensor::from_rows({{4, 1}, {1, 3}});
    const Tensor x = Tensor::from_rows({{1, -2}, {2, 0.5}});
    const Tensor b = matmul(a, x);
    const Tensor solved = solve_spd(a, b);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_NEAR(solved[i], x[i], 1e-12);
    }
}

TEST(Determinism, SameSeedSameStream) {
    Rng a(99);
    Rng b(99);
    for (int i = 0; i < 100; ++i) {
        ASSERT_EQ(a.normal(), b.normal());
    }
}

TEST(ExactSum, OrderIndependentAndCorrectlyRounded) {
    numerics::ExactSum a;
    for (double v : {1e16, 1.0, -1e16}) a.add(v);
    EXPECT_EQ(a.value(), 1.0);
    numerics::Rng rng(9);
    std::vector<double> xs;
    for (int i = 0; i < 200; ++i) xs.push_back(rng.normal() * std::pow(10.0, static_cast<double>(rng.index(12))));
    numerics::ExactSum fwd, rev, twice;
    for (double x : xs) fwd.add(x);
    for (auto it = xs.rbegin(); it != xs.rend(); ++it) rev.add(*it);
    for (int k = 0; k < 2; ++k)
        for (double x : xs) twice.add(x);
    EXPECT_EQ(fwd.value(), rev.value());
    EXPECT_EQ(twice.value(), 2.0 * fwd.value());
    EXPECT_EQ(numerics::ExactSum{}.value(), 0.0);
}
