#include <gtest/gtest.h>

#include <complex>

#include "cvnn/conv.hpp"
#include "cvnn/random.hpp"
#include "cvnn/verify.hpp"

using namespace cvnn;

namespace {

using C = std::complex<double>;

Tensor<double> randn(Rng& rng, const Shape& s) {
    Tensor<double> t(s);
    for (auto& v : t.vec()) v = rng.normal();
    return t;
}
ComplexTensor<double> crandn(Rng& rng, const Shape& s) { return {randn(rng, s), randn(rng, s)}; }

// Direct loop over std::complex values with zero padding.
ComplexTensor<double> brute_conv(const ComplexTensor<double>& h, const ComplexTensor<double>& w,
                                 std::size_t stride, std::size_t pad) {
    const std::size_t N = h.shape()[0], Ci = h.shape()[1], H = h.shape()[2], W = h.shape()[3];
    const std::size_t O = w.shape()[0], k = w.shape()[2];
    const std::size_t oh = (H + 2 * pad - k) / stride + 1, ow = (W + 2 * pad - k) / stride + 1;
    ComplexTensor<double> out(Shape{N, O, oh, ow});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    C acc = 0;
                    for (std::size_t c = 0; c < Ci; ++c)
                        for (std::size_t a = 0; a < k; ++a)
                            for (std::size_t b = 0; b < k; ++b) {
                                const long y = long(i * stride + a) - long(pad), x = long(j * stride + b) - long(pad);
                                if (y < 0 || x < 0 || y >= long(H) || x >= long(W)) continue;
                                const std::size_t hi = ((n * Ci + c) * H + y) * W + x;
                                const std::size_t wi = ((o * Ci + c) * k + a) * k + b;
                                acc += C(w.re[wi], w.im[wi]) * C(h.re[hi], h.im[hi]);
                            }
                    const std::size_t oi = ((n * O + o) * oh + i) * ow + j;
                    out.re[oi] = acc.real();
                    out.im[oi] = acc.imag();
                }
    return out;
}

double max_diff(const ComplexTensor<double>& a, const ComplexTensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max({m, std::abs(a.re[i] - b.re[i]), std::abs(a.im[i] - b.im[i])});
    return m;
}

ComplexTensor<double> conv_with(const ComplexTensor<double>& h, const ComplexTensor<double>& w,
                                std::size_t stride, std::size_t pad) {
    ComplexConv2d<double> layer("c", w.re, w.im, stride, pad);
    return complex_conv2d(h, layer);
}

}  // namespace

TEST(ComplexConv, OneByOneIdentity) {
    Rng rng(1);
    const auto h = crandn(rng, Shape{2, 1, 3, 3});
    const auto y = conv_with(h, {Tensor<double>(Shape{1, 1, 1, 1}, 1.0), Tensor<double>(Shape{1, 1, 1, 1}, 0.0)}, 1, 0);
    EXPECT_EQ(y, h);
}

TEST(ComplexConv, OneByOneTimesI) {
    ComplexTensor<double> h(Tensor<double>(Shape{1, 1, 1, 1}, 1.0), Tensor<double>(Shape{1, 1, 1, 1}, 2.0));
    const auto y = conv_with(h, {Tensor<double>(Shape{1, 1, 1, 1}, 0.0), Tensor<double>(Shape{1, 1, 1, 1}, 1.0)}, 1, 0);
    EXPECT_EQ(y.re[0], -2.0);
    EXPECT_EQ(y.im[0], 1.0);
}

TEST(ComplexConv, MatchesBruteForceLoop) {
    Rng rng(2);
    for (const auto& [stride, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
        const auto h = crandn(rng, Shape{2, 3, 5, 5});
        const auto w = crandn(rng, Shape{4, 3, 3, 3});
        EXPECT_LT(max_diff(conv_with(h, w, stride, pad), brute_conv(h, w, stride, pad)), 1e-12);
    }
}

TEST(ComplexConv, BiasAddedPerChannel) {
    Rng rng(3);
    const auto h = crandn(rng, Shape{1, 2, 3, 3});
    const auto w = crandn(rng, Shape{2, 2, 1, 1});
    ComplexTensor<double> b(Tensor<double>(Shape{2}, {1.0, -2.0}), Tensor<double>(Shape{2}, {0.5, 3.0}));
    ComplexConv2d<double> layer("c", w.re, w.im, 1, 0, b);
    const auto y = complex_conv2d(h, layer);
    const auto y0 = brute_conv(h, w, 1, 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const std::size_t c = i / 9;
        EXPECT_NEAR(y.re[i] - y0.re[i], b.re[c], 1e-12);
        EXPECT_NEAR(y.im[i] - y0.im[i], b.im[c], 1e-12);
    }
}

TEST(ComplexConv, Superposition) {
    Rng rng(4);
    const auto h1 = crandn(rng, Shape{1, 2, 4, 4}), h2 = crandn(rng, Shape{1, 2, 4, 4});
    const auto w1 = crandn(rng, Shape{3, 2, 3, 3}), w2 = crandn(rng, Shape{3, 2, 3, 3});
    auto lin = [](const ComplexTensor<double>& a, const ComplexTensor<double>& b, double s) {
        ComplexTensor<double> o(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
            o.re[i] = a.re[i] + s * b.re[i];
            o.im[i] = a.im[i] + s * b.im[i];
        }
        return o;
    };
    EXPECT_LT(max_diff(conv_with(lin(h1, h2, 2.5), w1, 1, 1), lin(conv_with(h1, w1, 1, 1), conv_with(h2, w1, 1, 1), 2.5)), 1e-10);
    EXPECT_LT(max_diff(conv_with(h1, lin(w1, w2, -0.5), 1, 1), lin(conv_with(h1, w1, 1, 1), conv_with(h1, w2, 1, 1), -0.5)), 1e-10);
}

TEST(ComplexConv, Conjugation) {
    Rng rng(5);
    const auto h = crandn(rng, Shape{2, 2, 4, 4});
    const auto w = crandn(rng, Shape{3, 2, 3, 3});
    EXPECT_LT(max_diff(conv_with(conj(h), conj(w), 1, 1), conj(conv_with(h, w, 1, 1))), 1e-10);
}

TEST(ComplexConv, BlockMatrixFormulation) {
    // [Re; Im] = [A -B; B A] [x; y] as a real convolution with a (2O, 2C) kernel.
    Rng rng(6);
    const auto h = crandn(rng, Shape{2, 3, 5, 5});
    const auto w = crandn(rng, Shape{2, 3, 3, 3});
    const std::size_t O = 2, Ci = 3, kk = 9;
    Tensor<double> big(Shape{2 * O, 2 * Ci, 3, 3});
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t q = 0; q < kk; ++q) {
                const double a = w.re[(o * Ci + c) * kk + q], b = w.im[(o * Ci + c) * kk + q];
                big[((o)*2 * Ci + c) * kk + q] = a;
                big[((o)*2 * Ci + Ci + c) * kk + q] = -b;
                big[((O + o) * 2 * Ci + c) * kk + q] = b;
                big[((O + o) * 2 * Ci + Ci + c) * kk + q] = a;
            }
    Tape<double> t;
    const Tensor<double> y = conv2d(t.constant(to_channel_split(h)), t.constant(big), 1, 1).value();
    EXPECT_LT(max_diff(from_channel_split(y), conv_with(h, w, 1, 1)), 1e-10);
}

TEST(ComplexConv, ErrorsOnMismatch) {
    Rng rng(7);
    const auto w = crandn(rng, Shape{2, 3, 3, 3});
    EXPECT_THROW(conv_with(crandn(rng, Shape{1, 2, 5, 5}), w, 1, 1), ShapeError);
    EXPECT_THROW(conv_with(crandn(rng, Shape{1, 3, 2, 2}), w, 1, 0), ShapeError);
}

TEST(ComplexDense, IdentityAndSquareOfI) {
    Rng rng(8);
    const auto v = crandn(rng, Shape{4});
    Tensor<double> eye(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1;
    ComplexDense<double> id("id", eye, Tensor<double>(Shape{4, 4}));
    EXPECT_LT(max_diff(complex_dense(v, id), v), 1e-15);
    ComplexDense<double> iu("i", Tensor<double>(Shape{4, 4}), eye);
    const auto twice = complex_dense(complex_dense(v, iu), iu);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(twice.re[k], -v.re[k], 1e-15);
        EXPECT_NEAR(twice.im[k], -v.im[k], 1e-15);
    }
}

TEST(ComplexDense, MatchesExpandedRealBlockMatrix) {
    Rng rng(9);
    const auto w = crandn(rng, Shape{3, 2});
    const auto v = crandn(rng, Shape{2});
    ComplexDense<double> layer("d", w.re, w.im);
    const auto y = complex_dense(v, layer);
    // M = [A -B; B A] (6 x 4), u = [x; y].
    double M[6][4];
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            M[i][j] = w.re[i * 2 + j];
            M[i][j + 2] = -w.im[i * 2 + j];
            M[i + 3][j] = w.im[i * 2 + j];
            M[i + 3][j + 2] = w.re[i * 2 + j];
        }
    const double u[4] = {v.re[0], v.re[1], v.im[0], v.im[1]};
    for (std::size_t i = 0; i < 6; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < 4; ++j) acc += M[i][j] * u[j];
        EXPECT_NEAR(i < 3 ? y.re[i] : y.im[i - 3], acc, 1e-12);
    }
    EXPECT_THROW(complex_dense(crandn(rng, Shape{3}), layer), ShapeError);
}

TEST(Pooling, ConstantMapAndBridge) {
    ComplexTensor<double> z(Shape{1, 2, 3, 3});
    z.re.fill(1.5);
    z.im.fill(-2.0);
    const auto p = global_avg_pool(z);
    EXPECT_EQ(p.shape(), (Shape{1, 2}));
    EXPECT_DOUBLE_EQ(p.re[0], 1.5);
    EXPECT_DOUBLE_EQ(p.im[1], -2.0);
    const auto r = head_bridge(p);
    EXPECT_EQ(r.shape(), (Shape{1, 4}));
    EXPECT_EQ(r.vec(), (std::vector<double>{1.5, 1.5, -2.0, -2.0}));
    const auto zero = head_bridge(global_avg_pool(ComplexTensor<double>(Shape{2, 3, 2, 2})));
    for (double x : zero.vec()) EXPECT_EQ(x, 0.0);
}

TEST(Flops, HandCounts) {
    InitPolicy init;
    Conv2d<double> real("r", 1, 1, 3, 1, 0, false, init);
    ComplexConv2d<double> cplx("c", 1, 1, 3, 1, 0, false, init);
    EXPECT_EQ(real.real_multiplies(Shape{1, 1, 8, 8}), 324u);
    EXPECT_EQ(cplx.real_multiplies(Shape{1, 1, 8, 8}), 1296u);
    ComplexConv2d<double> one("o", 1, 1, 1, 1, 0, false, init);
    EXPECT_EQ(one.real_multiplies(Shape{1, 1, 1, 1}), 4u);
    Dense<double> dense("d", 7, 3, init);
    EXPECT_EQ(dense.real_multiplies(), 21u);
}

TEST(Flops, ComplexLayerIsExactlyFourTimesReal) {
    InitPolicy init;
    for (std::size_t c : {1, 3, 16})
        for (std::size_t stride : {1, 2}) {
            Conv2d<double> r("r", c, c + 1, 3, stride, 1, false, init);
            ComplexConv2d<double> z("z", c, c + 1, 3, stride, 1, false, init);
            const Shape in{1, c, 9, 9};
            EXPECT_EQ(z.real_multiplies(in), 4 * r.real_multiplies(in));
        }
}

TEST(GradCheck, ConvOps) {
    for (const auto& r : run_gradcheck(12, 5, "conv.")) {
        EXPECT_GE(r.instances, 5u) << r.name;
        EXPECT_LT(r.max_rel, 1e-4) << r.name;
    }
}
