#include <gtest/gtest.h>

#include "cvnn/autograd.hpp"
#include "cvnn/random.hpp"

using namespace cvnn;

namespace {

Tensor<double> randn(Rng& rng, const Shape& s) {
    Tensor<double> t(s);
    for (auto& v : t.vec()) v = rng.normal();
    return t;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST(Backward, SquaredModulusGradient) {
    Parameter<double> z("z", ComplexTensor<double>(Tensor<double>(Shape{1}, 3.0), Tensor<double>(Shape{1}, 4.0)));
    Tape<double> t;
    CVar<double> v = t.cparam(z);
    t.backward(add(sum(square(v.re)), sum(square(v.im))));
    EXPECT_DOUBLE_EQ(z.grad_re[0], 6);
    EXPECT_DOUBLE_EQ(z.grad_im[0], 8);
}

// L = Re(w h) = wr hr - wi hi, so dL/dwr = hr and dL/dwi = -hi.
TEST(Backward, RealPartOfProductMatchesPartials) {
    Rng rng(1);
    Parameter<double> w("w", ComplexTensor<double>(randn(rng, {1}), randn(rng, {1})));
    Parameter<double> h("h", ComplexTensor<double>(randn(rng, {1}), randn(rng, {1})));
    auto loss = [&](Tape<double>& t) { return sum(cmul(t.cparam(w), t.cparam(h)).re); };
    {
        Tape<double> t;
        t.backward(loss(t));
    }
    EXPECT_DOUBLE_EQ(w.grad_re[0], h.re[0]);
    EXPECT_DOUBLE_EQ(w.grad_im[0], -h.im[0]);
    std::vector<Parameter<double>*> ps{&w, &h};
    const auto fd = finite_difference_grad<double>([&] {
        Tape<double> t;
        return loss(t).value()[0];
    }, ps, 1e-3);
    EXPECT_LT(rel(fd[0].re[0], w.grad_re[0]), 1e-9);
    EXPECT_LT(rel(fd[0].im[0], w.grad_im[0]), 1e-9);
    EXPECT_LT(rel(fd[1].re[0], h.grad_re[0]), 1e-9);
    EXPECT_LT(rel(fd[1].im[0], h.grad_im[0]), 1e-9);
}

TEST(Backward, ConstantLossGivesZeroAdjoints) {
    Parameter<double> p("p", Tensor<double>(Shape{3}, 2.0));
    Tape<double> t;
    Var<double> x = t.param(p);
    Var<double> c = t.constant(Tensor<double>(Shape{1}, 5.0));
    t.backward(add(c, scale(sum(x), 0.0)));
    for (double g : p.grad_re.vec()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>(Shape{2}, 1.0));
    EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Backward, ForeignVariableRejected) {
    Tape<double> a, b;
    Var<double> x = a.leaf(Tensor<double>(Shape{1}, 1.0));
    EXPECT_THROW(b.backward(x), std::logic_error);
}

TEST(Backward, ParameterBoundOnceAccumulatesBothUses) {
    Parameter<double> p("p", Tensor<double>(Shape{1}, 3.0));
    Tape<double> t;
    Var<double> a = t.param(p), b = t.param(p);
    EXPECT_EQ(a.id, b.id);
    t.backward(sum(mul(a, b)));
    EXPECT_DOUBLE_EQ(p.grad_re[0], 6);
}

TEST(Backward, Linearity) {
    Rng rng(2);
    Parameter<double> x("x", randn(rng, {2, 2, 4, 4}));
    Parameter<double> w("w", randn(rng, {3, 2, 3, 3}));
    const Tensor<double> r1 = randn(rng, {2, 3, 4, 4}), r2 = randn(rng, {2, 3, 4, 4});
    const double alpha = 0.7, beta = -1.3;
    auto grads = [&](double a, double b) {
        x.zero_grad();
        w.zero_grad();
        Tape<double> t;
        Var<double> y = tanh(conv2d(t.param(x), t.param(w), 1, 1));
        t.backward(add(scale(dot_const(y, r1), a), scale(dot_const(y, r2), b)));
        return std::make_pair(x.grad_re, w.grad_re);
    };
    const auto g1 = grads(1, 0), g2 = grads(0, 1), g = grads(alpha, beta);
    for (std::size_t i = 0; i < g.first.size(); ++i)
        EXPECT_NEAR(g.first[i], alpha * g1.first[i] + beta * g2.first[i], 1e-10);
    for (std::size_t i = 0; i < g.second.size(); ++i)
        EXPECT_NEAR(g.second[i], alpha * g1.second[i] + beta * g2.second[i], 1e-10);
}

TEST(FiniteDifference, Square) {
    Parameter<double> p("p", Tensor<double>(Shape{1}, 3.0));
    std::vector<Parameter<double>*> ps{&p};
    const auto g = finite_difference_grad<double>([&] { return p.re[0] * p.re[0]; }, ps, 1e-3);
    EXPECT_NEAR(g[0].re[0], 6.0, 1e-6);
    const auto c = finite_difference_grad<double>([] { return 4.0; }, ps, 1e-3);
    EXPECT_EQ(c[0].re[0], 0.0);
}

TEST(FiniteDifference, NonFiniteNamesComponent) {
    Parameter<double> p("weights", Tensor<double>(Shape{3}, 1.0));
    std::vector<Parameter<double>*> ps{&p};
    try {
        finite_difference_grad<double>([&] { return p.re[2] > 1.0 ? std::nan("") : 0.0; }, ps, 1e-3);
        FAIL();
    } catch (const NanGuardError& e) {
        EXPECT_EQ(e.where(), "weights.re[2]");
    }
}

TEST(FiniteDifference, MatchesOpsGradients) {
    Rng rng(3);
    Parameter<double> x("x", randn(rng, {3, 4}));
    Parameter<double> w("w", randn(rng, {5, 4}));
    const std::vector<int> labels{0, 4, 2};
    auto loss = [&](Tape<double>& t) {
        Var<double> h = linear(t.param(x), t.param(w));
        return add(softmax_cross_entropy(h, labels), mean(mul(sigmoid(h), div(h, add_scalar(square(h), 1.0)))));
    };
    {
        Tape<double> t;
        t.backward(loss(t));
    }
    std::vector<Parameter<double>*> ps{&x, &w};
    const auto fd = finite_difference_grad<double>([&] {
        Tape<double> t;
        return loss(t).value()[0];
    }, ps, 1e-4);
    for (std::size_t i = 0; i < x.re.size(); ++i) EXPECT_LT(rel(fd[0].re[i], x.grad_re[i]), 1e-6);
    for (std::size_t i = 0; i < w.re.size(); ++i) EXPECT_LT(rel(fd[1].re[i], w.grad_re[i]), 1e-6);
}

TEST(Clip, ScalesAboveThreshold) {
    Parameter<double> a("a", Tensor<double>(Shape{2}));
    a.grad_re = Tensor<double>(Shape{2}, {2.0 / std::sqrt(2.0), 2.0 / std::sqrt(2.0)});
    std::vector<Parameter<double>*> ps{&a};
    EXPECT_NEAR(clip_gradient_norm<double>(ps, 1.0), 2.0, 1e-15);
    EXPECT_NEAR(a.grad_re[0], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(Clip, BelowThresholdUnchanged) {
    Parameter<double> a("a", Tensor<double>(Shape{1}));
    a.grad_re[0] = 0.5;
    std::vector<Parameter<double>*> ps{&a};
    clip_gradient_norm<double>(ps, 1.0);
    EXPECT_EQ(a.grad_re[0], 0.5);
}

TEST(Clip, ComplexThreeFourFive) {
    Parameter<double> z("z", ComplexTensor<double>(Shape{1}));
    z.grad_re[0] = 3;
    z.grad_im[0] = 4;
    std::vector<Parameter<double>*> ps{&z};
    clip_gradient_norm<double>(ps, 1.0);
    EXPECT_NEAR(z.grad_re[0], 0.6, 1e-15);
    EXPECT_NEAR(z.grad_im[0], 0.8, 1e-15);
}

TEST(Clip, NeverIncreasesAndIdempotent) {
    Rng rng(4);
    for (int k = 0; k < 50; ++k) {
        Parameter<double> a("a", ComplexTensor<double>(Shape{7}));
        for (auto& v : a.grad_re.vec()) v = 3 * rng.normal();
        for (auto& v : a.grad_im.vec()) v = 3 * rng.normal();
        std::vector<Parameter<double>*> ps{&a};
        const double before = gradient_norm<double>(ps);
        clip_gradient_norm<double>(ps, 1.0);
        const double after = gradient_norm<double>(ps);
        EXPECT_LE(after, before);
        const auto snapshot = a.grad_re;
        clip_gradient_norm<double>(ps, 1.0);
        for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a.grad_re[i], snapshot[i], 1e-15);
    }
}

TEST(Clip, NonFiniteNormTripsGuard) {
    Parameter<double> a("a", Tensor<double>(Shape{1}));
    a.grad_re[0] = std::numeric_limits<double>::infinity();
    std::vector<Parameter<double>*> ps{&a};
    EXPECT_THROW(clip_gradient_norm<double>(ps, 1.0), NanGuardError);
}

TEST(Ops, ReluBranchSignatureTracksKinkSide) {
    Tape<double> a, b;
    relu(a.leaf(Tensor<double>(Shape{2}, {1.0, -1.0})));
    relu(b.leaf(Tensor<double>(Shape{2}, {1.0, 1.0})));
    EXPECT_NE(a.branch_signature(), b.branch_signature());
}
