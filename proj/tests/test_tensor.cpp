#include <gtest/gtest.h>

#include <complex>

#include "cvnn/random.hpp"
#include "cvnn/tensor.hpp"

using namespace cvnn;

namespace {

ComplexTensor<double> scalar(double re, double im) {
    return {Tensor<double>(Shape{1}, {re}), Tensor<double>(Shape{1}, {im})};
}

ComplexTensor<double> random_complex(Rng& rng, const Shape& s) {
    ComplexTensor<double> z(s);
    for (std::size_t i = 0; i < z.size(); ++i) {
        z.re[i] = rng.normal();
        z.im[i] = rng.normal();
    }
    return z;
}

}  // namespace

TEST(ComplexMul, IdentityLeavesValueUnchanged) {
    Rng rng(1);
    const auto x = random_complex(rng, Shape{2, 3});
    ComplexTensor<double> one(Shape{2, 3});
    one.re.fill(1.0);
    EXPECT_EQ(complex_elementwise_mul(one, x), x);
}

TEST(ComplexMul, HandValues) {
    const auto a = complex_elementwise_mul(scalar(0, 1), scalar(1, 2));
    EXPECT_DOUBLE_EQ(a.re[0], -2);
    EXPECT_DOUBLE_EQ(a.im[0], 1);
    const auto b = complex_elementwise_mul(scalar(3, 4), scalar(3, -4));
    EXPECT_DOUBLE_EQ(b.re[0], 25);
    EXPECT_DOUBLE_EQ(b.im[0], 0);
}

TEST(ComplexMul, MatchesStdComplex) {
    Rng rng(2);
    const auto a = random_complex(rng, Shape{50});
    const auto b = random_complex(rng, Shape{50});
    const auto c = complex_elementwise_mul(a, b);
    for (std::size_t i = 0; i < 50; ++i) {
        const std::complex<double> want = std::complex<double>(a.re[i], a.im[i]) * std::complex<double>(b.re[i], b.im[i]);
        EXPECT_NEAR(c.re[i], want.real(), 1e-14);
        EXPECT_NEAR(c.im[i], want.imag(), 1e-14);
    }
}

TEST(ComplexMul, CommutativeAndAssociative) {
    Rng rng(3);
    const auto a = random_complex(rng, Shape{100});
    const auto b = random_complex(rng, Shape{100});
    const auto c = random_complex(rng, Shape{100});
    const auto ab = complex_elementwise_mul(a, b), ba = complex_elementwise_mul(b, a);
    const auto l = complex_elementwise_mul(ab, c), r = complex_elementwise_mul(a, complex_elementwise_mul(b, c));
    for (std::size_t i = 0; i < 100; ++i) {
        EXPECT_EQ(ab.re[i], ba.re[i]);
        EXPECT_EQ(ab.im[i], ba.im[i]);
        const double scale = std::max(1.0, std::hypot(l.re[i], l.im[i]));
        EXPECT_LE(std::abs(l.re[i] - r.re[i]), 1e-12 * scale);
        EXPECT_LE(std::abs(l.im[i] - r.im[i]), 1e-12 * scale);
    }
}

TEST(ComplexMul, ShapeMismatchNamesBothShapes) {
    try {
        complex_elementwise_mul(ComplexTensor<double>(Shape{2, 3}), ComplexTensor<double>(Shape{3, 2}));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(3, 2)"), std::string::npos) << msg;
    }
}

TEST(ChannelSplit, FirstHalfIsReal) {
    Tensor<double> t(Shape{1, 4, 1, 1}, {10, 11, 12, 13});
    const auto z = from_channel_split(t);
    EXPECT_EQ(z.shape(), (Shape{1, 2, 1, 1}));
    EXPECT_EQ(z.re.vec(), (std::vector<double>{10, 11}));
    EXPECT_EQ(z.im.vec(), (std::vector<double>{12, 13}));
}

TEST(ChannelSplit, ZerosAndOddCount) {
    const auto z = from_channel_split(Tensor<double>(Shape{3, 2, 2, 2}));
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z.re[i], 0.0);
    EXPECT_THROW(from_channel_split(Tensor<double>(Shape{1, 3, 2, 2})), ShapeError);
}

TEST(ChannelSplit, RoundTripIsBitExact) {
    Rng rng(4);
    Tensor<double> t(Shape{3, 6, 4, 5});
    for (auto& v : t.vec()) v = rng.normal();
    EXPECT_EQ(to_channel_split(from_channel_split(t)), t);
    const auto z = random_complex(rng, Shape{2, 3, 2, 2});
    EXPECT_EQ(from_channel_split(to_channel_split(z)), z);
}

TEST(ChannelSplit, ViewWritesThrough) {
    Tensor<double> t(Shape{2, 4, 3});
    ChannelSplitView<double> v(t);
    v.re(1, 1, 2) = 5;
    v.im(0, 0, 1) = -7;
    EXPECT_EQ(t.at4(0, 0, 0, 0), 0.0);
    EXPECT_EQ(t[(1 * 4 + 1) * 3 + 2], 5);
    EXPECT_EQ(t[(0 * 4 + 2) * 3 + 1], -7);
    EXPECT_EQ(from_channel_split(t).im[1], -7);
}

TEST(ModulusPhase, HandValues) {
    ComplexTensor<double> z(Tensor<double>(Shape{3}, {3, -1, 0}), Tensor<double>(Shape{3}, {4, 0, 0}));
    const auto m = modulus(z), p = phase(z);
    EXPECT_DOUBLE_EQ(m[0], 5);
    EXPECT_DOUBLE_EQ(p[0], std::atan2(4.0, 3.0));
    EXPECT_DOUBLE_EQ(m[1], 1);
    EXPECT_DOUBLE_EQ(p[1], M_PI);
    EXPECT_EQ(m[2], 0.0);
    EXPECT_EQ(p[2], 0.0);
}

TEST(ModulusPhase, NegativeZeroImagStillGivesPi) {
    ComplexTensor<double> z(Tensor<double>(Shape{1}, {-1}), Tensor<double>(Shape{1}, {-0.0}));
    EXPECT_DOUBLE_EQ(phase(z)[0], M_PI);
}

TEST(ModulusPhase, SquaredModulusMatchesParts) {
    Rng rng(5);
    const auto z = random_complex(rng, Shape{1000});
    const auto m = modulus(z);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double want = z.re[i] * z.re[i] + z.im[i] * z.im[i];
        EXPECT_LE(std::abs(m[i] * m[i] - want), 1e-12 * want);
    }
}

TEST(TensorBasics, ConstructionChecksElementCount) {
    EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(ComplexTensor<double>(Tensor<double>(Shape{2}), Tensor<double>(Shape{3})), ShapeError);
    const Tensor<float> f = Tensor<double>(Shape{2}, {1.5, -2}).cast<float>();
    EXPECT_EQ(f[0], 1.5f);
}
