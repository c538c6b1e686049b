#pragma once

// Property suites behind `verify`: finite-difference gradient checks, whitening statistics,
// initialization statistics, parameter budgets, FLOP ratios, ellipticity and activation regions.
// Each measurement returns raw numbers; callers decide pass/fail against their thresholds.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <string>
#include <vector>

#include "cvnn/activations.hpp"
#include "cvnn/cbn.hpp"
#include "cvnn/conv.hpp"
#include "cvnn/convlstm.hpp"
#include "cvnn/init.hpp"
#include "cvnn/model.hpp"
#include "cvnn/resnet.hpp"

namespace cvnn {

// ---------------------------------------------------------------------------------------------
// Gradient checks

struct GradCaseResult {
    std::string name;
    std::size_t instances = 0;
    std::size_t checked = 0;   // components compared
    std::size_t rejected = 0;  // components whose +-step crossed a non-smooth set
    double max_rel = 0;        // max over components of |a-b| / max(|a|, |b|, 1e-8)
    double max_rel_norm = 0;   // max over instances of ||a-b|| / max(||a||, ||b||, 1e-8)
    std::size_t over = 0;          // components with rel >= threshold at the nominal step
    std::size_t over_refined = 0;  // of those, still >= threshold at step / 100
};

using LossFn = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients with central differences for every real scalar of every
/// parameter. Components whose perturbation changes the branch pattern of a non-smooth op are
/// skipped and counted as rejected. Components at or above `threshold` are re-measured at
/// step / 100 to separate stencil truncation from wrong derivatives.
inline void check_instance(GradCaseResult& r, const LossFn& loss_fn,
                           const std::vector<Parameter<double>*>& params, double step = 1e-3,
                           double threshold = 1e-4) {
    for (auto* p : params) p->zero_grad();
    std::uint64_t sig0;
    {
        Tape<double> t;
        Var<double> l = loss_fn(t);
        t.backward(l);
        sig0 = t.branch_signature();
    }
    auto eval = [&](std::uint64_t& sig) {
        Tape<double> t;
        const double v = loss_fn(t).value()[0];
        sig = t.branch_signature();
        return v;
    };
    double diff2 = 0, a2 = 0, b2 = 0;
    for (auto* p : params) {
        for (int plane = 0; plane < (p->is_complex ? 2 : 1); ++plane) {
            Tensor<double>& v = plane ? p->im : p->re;
            const Tensor<double>& g = plane ? p->grad_im : p->grad_re;
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double orig = v[i];
                std::uint64_t sp, sm;
                v[i] = orig + step;
                const double fp = eval(sp);
                v[i] = orig - step;
                const double fm = eval(sm);
                v[i] = orig;
                if (sp != sig0 || sm != sig0) {
                    ++r.rejected;
                    continue;
                }
                if (!std::isfinite(fp) || !std::isfinite(fm))
                    throw NanGuardError(p->name, "non-finite loss in gradient check");
                const double fd = (fp - fm) / (2 * step);
                const double a = g[i];
                auto relative = [a](double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); };
                const double rel = relative(fd);
                r.max_rel = std::max(r.max_rel, rel);
                if (rel >= threshold) {
                    ++r.over;
                    const double h = step / 100;
                    v[i] = orig + h;
                    const double gp = eval(sp);
                    v[i] = orig - h;
                    const double gm = eval(sm);
                    v[i] = orig;
                    if (sp != sig0 || sm != sig0 || relative((gp - gm) / (2 * h)) >= threshold) ++r.over_refined;
                }
                diff2 += (a - fd) * (a - fd);
                a2 += a * a;
                b2 += fd * fd;
                ++r.checked;
            }
        }
    }
    r.max_rel_norm = std::max(r.max_rel_norm, std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(b2), 1e-8}));
    ++r.instances;
}

namespace detail {

inline Tensor<double> randn(Rng& rng, const Shape& s, double scale = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.vec()) v = scale * rng.normal();
    return t;
}
inline ComplexTensor<double> crandn(Rng& rng, const Shape& s, double scale = 1.0) {
    return {randn(rng, s, scale), randn(rng, s, scale)};
}
inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

/// sum(w.re * z.re + w.im * z.im) with fixed random weights.
inline Var<double> readout(CVar<double> z, const ComplexTensor<double>& w) {
    return add(dot_const(z.re, w.re), dot_const(z.im, w.im));
}

/// Randomizes every parameter of a layer set (so biases and norm affine terms are nonzero).
inline void jitter(const std::vector<Parameter<double>*>& ps, Rng& rng, double scale) {
    for (auto* p : ps) {
        for (auto& v : p->re.vec()) v += scale * rng.normal();
        if (p->is_complex)
            for (auto& v : p->im.vec()) v += scale * rng.normal();
    }
}

}  // namespace detail

using GradCase = std::pair<std::string, std::function<void(Rng&, GradCaseResult&)>>;

inline std::vector<GradCase> gradcheck_cases() {
    using detail::crandn;
    using detail::pick;
    using detail::randn;
    using detail::readout;
    std::vector<GradCase> cases;

    cases.emplace_back("conv.complex_conv2d", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
        const std::size_t H = pick(rng, 3, 5), W = pick(rng, 3, 5), k = rng.index(2) ? 3 : 1;
        const std::size_t stride = pick(rng, 1, 2), pad = k / 2;
        InitPolicy init;
        init.root_seed = rng.next();
        ComplexConv2d<double> conv("conv", ci, co, k, stride, pad, true, init);
        Parameter<double> x("x", crandn(rng, Shape{N, ci, H, W}));
        std::vector<Parameter<double>*> ps{&x};
        conv.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.1);
        const auto w = crandn(rng, conv.output_shape(x.shape()));
        check_instance(r, [&](Tape<double>& t) { return readout(conv.forward(t, t.cparam(x)), w); }, ps);
    });

    cases.emplace_back("conv.complex_dense", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 1, 3), in = pick(rng, 1, 4), out = pick(rng, 1, 4);
        InitPolicy init;
        init.root_seed = rng.next();
        ComplexDense<double> dense("dense", in, out, init);
        Parameter<double> x("x", crandn(rng, Shape{N, in}));
        std::vector<Parameter<double>*> ps{&x};
        dense.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.1);
        const auto w = crandn(rng, Shape{N, out});
        check_instance(r, [&](Tape<double>& t) { return readout(dense.forward(t, t.cparam(x)), w); }, ps);
    });

    cases.emplace_back("conv.pool_bridge_dense", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 1, 3), C = pick(rng, 1, 3), H = pick(rng, 2, 4), K = pick(rng, 2, 4);
        InitPolicy init;
        init.root_seed = rng.next();
        Dense<double> head("head", 2 * C, K, init);
        Parameter<double> x("x", crandn(rng, Shape{N, C, H, H}));
        std::vector<Parameter<double>*> ps{&x};
        head.collect(ps);
        std::vector<int> labels(N);
        for (auto& l : labels) l = static_cast<int>(rng.index(K));
        check_instance(r, [&](Tape<double>& t) {
            return softmax_cross_entropy(head.forward(t, head_bridge(global_avg_pool(t.cparam(x)))), labels);
        }, ps);
    });

    cases.emplace_back("cbn.full_whitening", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 2, 4), C = pick(rng, 1, 3), H = pick(rng, 1, 3);
        ComplexBatchNorm<double> bn("cbn", C);
        Parameter<double> x("x", crandn(rng, Shape{N, C, H, H}));
        // Correlated, eccentric input so the off-diagonal whitening path is exercised.
        for (std::size_t i = 0; i < x.re.size(); ++i) x.im[i] = 0.6 * x.re[i] + 0.8 * x.im[i] + 0.3;
        std::vector<Parameter<double>*> ps{&x};
        bn.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.2);
        const auto w = crandn(rng, x.shape());
        check_instance(r, [&](Tape<double>& t) { return readout(bn.forward(t, t.cparam(x), true), w); }, ps);
    });

    cases.emplace_back("cbn.eval_running", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 1, 3), C = pick(rng, 1, 3);
        ComplexBatchNorm<double> bn("cbn", C);
        for (std::size_t c = 0; c < C; ++c) {
            bn.running_vrr().value[c] = 1.0 + rng.uniform();
            bn.running_vii().value[c] = 1.0 + rng.uniform();
            bn.running_vri().value[c] = 0.5 * rng.uniform(-1, 1);
            bn.running_mean_re().value[c] = rng.normal();
        }
        Parameter<double> x("x", crandn(rng, Shape{N, C, 2, 2}));
        std::vector<Parameter<double>*> ps{&x};
        bn.collect(ps);
        const auto w = crandn(rng, x.shape());
        check_instance(r, [&](Tape<double>& t) { return readout(bn.forward(t, t.cparam(x), false), w); }, ps);
    });

    cases.emplace_back("cbn.naive", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 2, 4), C = pick(rng, 1, 3), H = pick(rng, 1, 3);
        NaiveComplexBatchNorm<double> bn("ncbn", C);
        Parameter<double> x("x", crandn(rng, Shape{N, C, H, H}));
        std::vector<Parameter<double>*> ps{&x};
        bn.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.2);
        const auto w = crandn(rng, x.shape());
        check_instance(r, [&](Tape<double>& t) { return readout(bn.forward(t, t.cparam(x), true), w); }, ps);
    });

    cases.emplace_back("cbn.real_bn", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 2, 4), C = pick(rng, 1, 3), H = pick(rng, 1, 3);
        BatchNorm<double> bn("bn", C);
        Parameter<double> x("x", randn(rng, Shape{N, C, H, H}));
        std::vector<Parameter<double>*> ps{&x};
        bn.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.2);
        const auto w = randn(rng, x.shape());
        check_instance(r, [&](Tape<double>& t) { return dot_const(bn.forward(t, t.param(x), true), w); }, ps);
    });

    // Activation inputs keep a 1e-2 margin from each function's non-smooth set.
    auto sample_away = [](Rng& rng, const Shape& s, const std::function<bool(double, double)>& ok) {
        ComplexTensor<double> z(s);
        for (std::size_t i = 0; i < z.size(); ++i) {
            double a, b;
            do {
                a = rng.normal();
                b = rng.normal();
            } while (!ok(a, b));
            z.re[i] = a;
            z.im[i] = b;
        }
        return z;
    };

    cases.emplace_back("activations.crelu", [sample_away](Rng& rng, GradCaseResult& r) {
        const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), 2, 2};
        Parameter<double> x("x", sample_away(rng, s, [](double a, double b) {
            return std::abs(a) > 1e-2 && std::abs(b) > 1e-2;
        }));
        const auto w = crandn(rng, s);
        check_instance(r, [&](Tape<double>& t) { return readout(crelu(t.cparam(x)), w); }, {&x});
    });

    cases.emplace_back("activations.zrelu", [sample_away](Rng& rng, GradCaseResult& r) {
        const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), 2, 2};
        Parameter<double> x("x", sample_away(rng, s, [](double a, double b) {
            return std::abs(a) > 1e-2 && std::abs(b) > 1e-2;
        }));
        const auto w = crandn(rng, s);
        check_instance(r, [&](Tape<double>& t) { return readout(zrelu(t.cparam(x)), w); }, {&x});
    });

    cases.emplace_back("activations.modrelu", [](Rng& rng, GradCaseResult& r) {
        const std::size_t C = pick(rng, 1, 3);
        const Shape s{pick(rng, 1, 3), C, 2, 2};
        Parameter<double> b("b", randn(rng, Shape{C}, 0.5));
        ComplexTensor<double> z(s);
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double bc = b.re[(i / 4) % C];
            double a, c;
            do {
                a = rng.normal();
                c = rng.normal();
            } while (std::hypot(a, c) < 1e-2 || std::abs(std::hypot(a, c) + bc) < 1e-2);
            z.re[i] = a;
            z.im[i] = c;
        }
        Parameter<double> x("x", z);
        const auto w = crandn(rng, s);
        check_instance(r, [&](Tape<double>& t) { return readout(modrelu(t.cparam(x), t.param(b)), w); },
                       {&x, &b});
    });

    auto parts_case = [](bool use_tanh) {
        return [use_tanh](Rng& rng, GradCaseResult& r) {
            const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), 2, 2};
            Parameter<double> x("x", crandn(rng, s));
            const auto w = crandn(rng, s);
            check_instance(r, [&](Tape<double>& t) {
                CVar<double> z = t.cparam(x);
                return readout(use_tanh ? tanh(z) : sigmoid(z), w);
            }, {&x});
        };
    };
    cases.emplace_back("activations.sigmoid_parts", parts_case(false));
    cases.emplace_back("activations.tanh_parts", parts_case(true));

    auto lstm_case = [](bool complex) {
        return [complex](Rng& rng, GradCaseResult& r) {
            const std::size_t N = pick(rng, 1, 2), H = pick(rng, 3, 4), maps = pick(rng, 1, 2);
            InitPolicy init;
            init.criterion = Criterion::glorot;
            init.root_seed = rng.next();
            const std::size_t steps = 3;
            if (complex) {
                ConvLstmCell<double, true> cell("lstm", 1, maps, 3, init);
                std::vector<Parameter<double>> xs;
                xs.reserve(steps);
                for (std::size_t t = 0; t < steps; ++t)
                    xs.emplace_back("x" + std::to_string(t), crandn(rng, Shape{N, 1, H, H}));
                std::vector<Parameter<double>*> ps;
                for (auto& x : xs) ps.push_back(&x);
                cell.collect(ps);
                std::vector<ComplexTensor<double>> ws;
                for (std::size_t t = 0; t < steps; ++t) ws.push_back(crandn(rng, Shape{N, maps, H, H}));
                check_instance(r, [&](Tape<double>& t) {
                    std::vector<CVar<double>> seq;
                    for (auto& x : xs) seq.push_back(t.cparam(x));
                    auto [hs, last] = cell.unroll(t, seq);
                    Var<double> l = readout(hs[0], ws[0]);
                    for (std::size_t k = 1; k < hs.size(); ++k) l = add(l, readout(hs[k], ws[k]));
                    return add(l, sum_parts(last.c));
                }, ps);
            } else {
                ConvLstmCell<double, false> cell("lstm", 2, maps, 3, init);
                std::vector<Parameter<double>> xs;
                xs.reserve(steps);
                for (std::size_t t = 0; t < steps; ++t)
                    xs.emplace_back("x" + std::to_string(t), randn(rng, Shape{N, 2, H, H}));
                std::vector<Parameter<double>*> ps;
                for (auto& x : xs) ps.push_back(&x);
                cell.collect(ps);
                std::vector<Tensor<double>> ws;
                for (std::size_t t = 0; t < steps; ++t) ws.push_back(randn(rng, Shape{N, maps, H, H}));
                check_instance(r, [&](Tape<double>& t) {
                    std::vector<Var<double>> seq;
                    for (auto& x : xs) seq.push_back(t.param(x));
                    auto [hs, last] = cell.unroll(t, seq);
                    Var<double> l = dot_const(hs[0], ws[0]);
                    for (std::size_t k = 1; k < hs.size(); ++k) l = add(l, dot_const(hs[k], ws[k]));
                    return add(l, sum(last.c));
                }, ps);
            }
        };
    };
    cases.emplace_back("convlstm.complex_3_steps", lstm_case(true));
    cases.emplace_back("convlstm.real_3_steps", lstm_case(false));

    auto resnet_case = [](bool complex) {
        return [complex](Rng& rng, GradCaseResult& r) {
            ModelSpec s;
            s.variant = "custom";
            s.complex = complex;
            s.start_filters = 2;
            s.blocks_per_stage = 2;
            s.in_channels = 1;
            s.image_size = 8;
            s.n_classes = 3;
            if (!complex) {
                s.activation = "relu";
                s.norm = "bn";
            }
            auto net = build_model<double>(s, rng.next());
            const std::size_t N = 2;
            Tensor<double> x = detail::randn(rng, Shape{N, 1, 8, 8});
            const Tensor<double> w = detail::randn(rng, Shape{N, 3});
            auto ps = net->parameters();
            detail::jitter(ps, rng, 0.05);
            check_instance(r, [&](Tape<double>& t) { return dot_const(net->forward(t, x, true), w); }, ps);
        };
    };
    cases.emplace_back("resnet.complex_tiny", resnet_case(true));
    cases.emplace_back("resnet.real_tiny", resnet_case(false));

    cases.emplace_back("resnet.imaginary_block", [](Rng& rng, GradCaseResult& r) {
        InitPolicy init;
        init.root_seed = rng.next();
        const std::size_t C = pick(rng, 1, 2);
        ImaginaryBlock<double> blk("imag", C, 2, init, false);
        Parameter<double> x("x", randn(rng, Shape{2, C, 4, 4}));
        std::vector<Parameter<double>*> ps{&x};
        blk.collect(ps);
        detail::jitter({ps.begin() + 1, ps.end()}, rng, 0.1);
        const auto w = randn(rng, x.shape());
        check_instance(r, [&](Tape<double>& t) { return dot_const(blk.forward(t, t.param(x), true), w); }, ps);
    });

    cases.emplace_back("resnet.stage_projection", [](Rng& rng, GradCaseResult& r) {
        InitPolicy init;
        init.root_seed = rng.next();
        const std::size_t C = pick(rng, 1, 3), H = pick(rng, 3, 5);
        StageProjection<double, true> proj("proj", C, init);
        Parameter<double> x("x", crandn(rng, Shape{2, C, H, H}));
        std::vector<Parameter<double>*> ps{&x};
        proj.collect(ps);
        const auto w = crandn(rng, Shape{2, 2 * C, (H + 1) / 2, (H + 1) / 2});
        check_instance(r, [&](Tape<double>& t) { return readout(proj.forward(t, t.cparam(x)), w); }, ps);
    });

    cases.emplace_back("train.losses", [](Rng& rng, GradCaseResult& r) {
        const std::size_t N = pick(rng, 1, 4), K = pick(rng, 2, 5);
        Parameter<double> s("scores", randn(rng, Shape{N, K}));
        std::vector<int> labels(N);
        for (auto& l : labels) l = static_cast<int>(rng.index(K));
        Tensor<double> tgt(Shape{N, K});
        for (auto& v : tgt.vec()) v = rng.index(2);
        const Tensor<double> reg = randn(rng, Shape{N, K});
        check_instance(r, [&](Tape<double>& t) {
            Var<double> v = t.param(s);
            return add(add(softmax_cross_entropy(v, labels), bce_with_logits(v, tgt)), mse(v, reg));
        }, {&s});
    });

    return cases;
}

inline std::vector<GradCaseResult> run_gradcheck(std::uint64_t seed, std::size_t instances = 5,
                                                 const std::string& only = "") {
    std::vector<GradCaseResult> out;
    for (auto& [name, fn] : gradcheck_cases()) {
        if (!only.empty() && name.find(only) == std::string::npos) continue;
        GradCaseResult r;
        r.name = name;
        Rng rng(derive_seed(seed, name));
        for (std::size_t k = 0; k < instances; ++k) fn(rng, r);
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Whitening

struct WhiteningStats {
    double max_abs_mean = 0;   // |mean| of the output
    double max_gamma_err = 0;  // |Gamma - 1| of the gamma-initialized output
    double max_abs_c = 0;      // |C| of the output
    double max_axis_var_err = 0;  // |Var(re) - 1|, |Var(im) - 1| before gamma
    double max_abs_vri = 0;       // cross-covariance before gamma
};

/// Covariance Gamma = E|z-mu|^2 and relation C = E(z-mu)^2 of a channel's population.
struct GammaC {
    double gamma;
    std::complex<double> c;
    std::complex<double> mean;
};

inline GammaC gamma_c(const ComplexTensor<double>& z, std::size_t channel) {
    std::size_t outer, C, inner;
    detail::split_dims(z.shape(), 1, outer, C, inner);
    std::vector<std::complex<double>> v;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t k = (o * C + channel) * inner + i;
            v.emplace_back(z.re[k], z.im[k]);
        }
    std::complex<double> mu = 0;
    for (auto x : v) mu += x;
    mu /= double(v.size());
    GammaC g{0, 0, mu};
    for (auto x : v) {
        g.gamma += std::norm(x - mu);
        g.c += (x - mu) * (x - mu);
    }
    g.gamma /= double(v.size());
    g.c /= double(v.size());
    return g;
}

/// Random eccentric batches (covariance eigenvalues in [0.5, 4], random rotation and mean)
/// through a freshly initialized CBN in training mode.
inline WhiteningStats measure_whitening(std::uint64_t seed, std::size_t batch = 256,
                                        std::size_t channels = 4, std::size_t trials = 10,
                                        double eps = 1e-5) {
    Rng rng(seed);
    WhiteningStats st;
    for (std::size_t t = 0; t < trials; ++t) {
        ComplexTensor<double> x(Shape{batch, channels, 1, 1});
        for (std::size_t c = 0; c < channels; ++c) {
            const double l1 = rng.uniform(0.5, 4), l2 = rng.uniform(0.5, 4), th = rng.uniform(0, M_PI);
            const double mr = rng.uniform(-3, 3), mi = rng.uniform(-3, 3);
            for (std::size_t n = 0; n < batch; ++n) {
                const double a = std::sqrt(l1) * rng.normal(), b = std::sqrt(l2) * rng.normal();
                x.re[n * channels + c] = mr + std::cos(th) * a - std::sin(th) * b;
                x.im[n * channels + c] = mi + std::sin(th) * a + std::cos(th) * b;
            }
        }
        ComplexBatchNorm<double> bn("cbn", channels, eps);
        const ComplexTensor<double> y = complex_bn_train(x, bn);
        const ComplexTensor<double> pre = complex_whiten(x, eps);
        for (std::size_t c = 0; c < channels; ++c) {
            const GammaC g = gamma_c(y, c);
            st.max_abs_mean = std::max(st.max_abs_mean, std::abs(g.mean));
            st.max_gamma_err = std::max(st.max_gamma_err, std::abs(g.gamma - 1));
            st.max_abs_c = std::max(st.max_abs_c, std::abs(g.c));
            // Per-axis statistics of the pre-gamma output.
            ComplexTensor<double> one(Shape{batch});
            for (std::size_t n = 0; n < batch; ++n) {
                one.re[n] = pre.re[n * channels + c];
                one.im[n] = pre.im[n * channels + c];
            }
            const Cov2 v = empirical_cov2(one);
            st.max_axis_var_err = std::max({st.max_axis_var_err, std::abs(v.rr - 1), std::abs(v.ii - 1)});
            st.max_abs_vri = std::max(st.max_abs_vri, std::abs(v.ri));
        }
    }
    return st;
}

struct InvSqrtStats {
    double max_identity_err = 0;  // max |M (V + eps I) M - I|
    double oracle_err = 0;        // [[5,4],[4,5]] vs eigendecomposition
};

/// Symmetric 2x2 inverse square root by eigendecomposition (Jacobi rotation).
inline Mat2 inv_sqrt_by_eig(const Cov2& v) {
    const double th = 0.5 * std::atan2(2 * v.ri, v.rr - v.ii);
    const double c = std::cos(th), s = std::sin(th);
    const double l1 = c * c * v.rr + 2 * s * c * v.ri + s * s * v.ii;
    const double l2 = s * s * v.rr - 2 * s * c * v.ri + c * c * v.ii;
    const double a = 1 / std::sqrt(l1), b = 1 / std::sqrt(l2);
    return {c * c * a + s * s * b, s * c * (a - b), s * c * (a - b), s * s * a + c * c * b};
}

inline InvSqrtStats measure_inv_sqrt(std::uint64_t seed, std::size_t n = 1000, double eps = 1e-5) {
    Rng rng(seed);
    InvSqrtStats st;
    for (std::size_t k = 0; k < n; ++k) {
        // V = A A^T + small diagonal: positive definite with a wide spread of conditions.
        const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
        Cov2 v{a * a + b * b + 1e-3, a * c + b * d, a * c + b * d, c * c + d * d + 1e-3};
        const Mat2 m = inv_sqrt_2x2(v, eps);
        Mat2 ve = v;
        ve.rr += eps;
        ve.ii += eps;
        const Mat2 p = m * ve * m;
        st.max_identity_err = std::max({st.max_identity_err, std::abs(p.rr - 1), std::abs(p.ri),
                                        std::abs(p.ir), std::abs(p.ii - 1)});
    }
    const Mat2 got = inv_sqrt_2x2({5, 4, 4, 5}, 0.0);
    const Mat2 want = inv_sqrt_by_eig({5, 4, 4, 5});
    st.oracle_err = std::max({std::abs(got.rr - want.rr), std::abs(got.ri - want.ri),
                              std::abs(got.ir - want.ir), std::abs(got.ii - want.ii)});
    return st;
}

// ---------------------------------------------------------------------------------------------
// Initialization statistics

struct InitStats {
    double glorot_var_rel = 0;   // |E|W|^2 / target - 1|
    double he_var_rel = 0;
    double mean_mag_rel = 0;     // |E|W| / (sigma sqrt(pi/2)) - 1|, worst of both criteria
    double var_mag_rel = 0;      // |Var|W| / ((4-pi)/2 sigma^2) - 1|
    double phase_resultant = 0;  // |E e^{i theta}|
    double semi_unitary_err = 0;  // max |U U* - I|
    double unitary_rescale_rel = 0;
};

inline InitStats measure_init(std::uint64_t seed, std::size_t draws = 100000) {
    InitStats st;
    auto one = [&](Criterion crit, std::size_t fi, std::size_t fo, std::uint64_t s, double& var_rel) {
        InitSpec spec{crit, InitFlavor::rayleigh_iid, fi, fo, s};
        const auto w = rayleigh_complex_init<double>(spec, Shape{draws});
        const double sigma = rayleigh_sigma(crit, fi, fo);
        double p2 = 0, m1 = 0;
        std::complex<double> res = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            const double mag = std::hypot(w.re[i], w.im[i]);
            p2 += mag * mag;
            m1 += mag;
            res += std::polar(1.0, std::atan2(w.im[i], w.re[i]));
        }
        p2 /= double(draws);
        m1 /= double(draws);
        double vm = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            const double d = std::hypot(w.re[i], w.im[i]) - m1;
            vm += d * d;
        }
        vm /= double(draws);
        var_rel = std::abs(p2 / target_variance(crit, fi, fo) - 1);
        st.mean_mag_rel = std::max(st.mean_mag_rel, std::abs(m1 / (sigma * std::sqrt(M_PI / 2)) - 1));
        st.var_mag_rel = std::max(st.var_mag_rel, std::abs(vm / ((4 - M_PI) / 2 * sigma * sigma) - 1));
        st.phase_resultant = std::max(st.phase_resultant, std::abs(res) / double(draws));
    };
    one(Criterion::glorot, 256, 256, derive_seed(seed, "glorot"), st.glorot_var_rel);
    one(Criterion::he, 512, 512, derive_seed(seed, "he"), st.he_var_rel);

    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{4, 36}, {12, 108}, {16, 16}, {36, 4}};
    for (const auto& [rows, cols] : shapes) {
        const CMatrix u = semi_unitary(rows, cols, derive_seed(seed, rows * 1000 + cols));
        const bool by_rows = rows <= cols;
        const std::size_t m = by_rows ? rows : cols;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                std::complex<double> acc = 0;
                const std::size_t len = by_rows ? cols : rows;
                for (std::size_t k = 0; k < len; ++k)
                    acc += by_rows ? u[i][k] * std::conj(u[j][k]) : u[k][i] * std::conj(u[k][j]);
                st.semi_unitary_err = std::max(st.semi_unitary_err, std::abs(acc - (i == j ? 1.0 : 0.0)));
            }
    }
    InitSpec us{Criterion::he, InitFlavor::unitary, 12 * 9, 12 * 9, seed};
    const auto w = unitary_complex_init<double>(us, Shape{12, 12, 3, 3});
    double p2 = 0;
    for (std::size_t i = 0; i < w.size(); ++i) p2 += w.re[i] * w.re[i] + w.im[i] * w.im[i];
    p2 /= double(w.size());
    st.unitary_rescale_rel = std::abs(p2 / target_variance(Criterion::he, 108, 108) - 1);
    return st;
}

// ---------------------------------------------------------------------------------------------
// Budgets, FLOPs, ellipticity, activation regions

struct BudgetEntry {
    std::string name;
    std::size_t params;
};

inline std::vector<BudgetEntry> measure_budgets() {
    std::vector<BudgetEntry> out;
    for (const char* n : {"CWS", "CDN", "CIB", "RWS", "RDN", "RIB"}) {
        auto net = build_model<float>(ModelSpec::preset(n), 0);
        out.push_back({n, net->parameter_count()});
    }
    return out;
}

struct FlopStats {
    std::uint64_t real_layer = 0, complex_layer = 0;  // identical complex-filter geometry
    double layer_ratio = 0;
    std::uint64_t cws = 0, rws = 0;
    double model_ratio = 0;
};

inline FlopStats measure_flops() {
    FlopStats st;
    InitPolicy init;
    const Shape in{1, 12, 32, 32};
    Conv2d<float> real("r", 12, 12, 3, 1, 1, false, init);
    ComplexConv2d<float> cplx("c", 12, 12, 3, 1, 1, false, init);
    st.real_layer = real.real_multiplies(in);
    st.complex_layer = cplx.real_multiplies(in);
    st.layer_ratio = double(st.complex_layer) / double(st.real_layer);
    const ModelSpec cws = ModelSpec::preset("CWS"), rws = ModelSpec::preset("RWS");
    st.cws = total_multiplies(build_model<float>(cws, 0)->flops(example_shape(cws)));
    st.rws = total_multiplies(build_model<float>(rws, 0)->flops(example_shape(rws)));
    st.model_ratio = double(st.cws) / double(st.rws);
    return st;
}

struct EllipticityStats {
    double full_max_dev = 0;      // max |cond - 1| over seeds and layers, full mode
    double naive_median_final = 0;
};

inline EllipticityStats measure_ellipticity(std::uint64_t seed, std::size_t seeds = 20,
                                            std::size_t layers = 20, std::size_t points = 1000) {
    EllipticityStats st;
    std::vector<double> finals;
    for (std::size_t k = 0; k < seeds; ++k) {
        const std::uint64_t s = derive_seed(seed, std::uint64_t(k));
        for (double c : ellipticity_harness(points, layers, StandardizeMode::full, s))
            st.full_max_dev = std::max(st.full_max_dev, std::abs(c - 1));
        finals.push_back(ellipticity_harness(points, layers, StandardizeMode::naive, s).back());
    }
    std::sort(finals.begin(), finals.end());
    const std::size_t n = finals.size();
    st.naive_median_final = n % 2 ? finals[n / 2] : 0.5 * (finals[n / 2 - 1] + finals[n / 2]);
    return st;
}

struct ActivationRegionStats {
    double crelu_cr_max_q13 = 0;     // max CR residual inside open quadrants I and III
    double crelu_cr_min_q24 = 1e300;  // min CR residual inside open quadrants II and IV
    double zrelu_phase_err = 0;      // max phase change in the pass region
    double modrelu_phase_err = 0;
};

inline ActivationRegionStats measure_activation_regions(std::uint64_t seed, std::size_t points = 100,
                                                        double h = 1e-4) {
    Rng rng(seed);
    ActivationRegionStats st;
    auto crelu_f = [](std::complex<double> z) { return apply_scalar(Activation::crelu, z); };
    // Points at least 10 h inside their quadrant so the stencil stays in it.
    auto in_quadrant = [&](int q) {
        const double a = rng.uniform(10 * h, 3), b = rng.uniform(10 * h, 3);
        const double sx = (q == 1 || q == 4) ? 1 : -1, sy = (q == 1 || q == 2) ? 1 : -1;
        return std::complex<double>(sx * a, sy * b);
    };
    for (int q : {1, 3})
        for (std::size_t k = 0; k < points; ++k)
            st.crelu_cr_max_q13 = std::max(st.crelu_cr_max_q13, cauchy_riemann_residual(crelu_f, in_quadrant(q), h));
    for (int q : {2, 4})
        for (std::size_t k = 0; k < points; ++k)
            st.crelu_cr_min_q24 = std::min(st.crelu_cr_min_q24, cauchy_riemann_residual(crelu_f, in_quadrant(q), h));

    auto phase_diff = [](std::complex<double> a, std::complex<double> b) {
        return std::abs(std::arg(a * std::conj(b)));
    };
    for (std::size_t k = 0; k < points; ++k) {
        const std::complex<double> z(rng.uniform(1e-3, 3), rng.uniform(1e-3, 3));
        st.zrelu_phase_err = std::max(st.zrelu_phase_err, phase_diff(apply_scalar(Activation::zrelu, z), z));
        const double b = rng.uniform(-1, 1);
        std::complex<double> w;
        do w = std::polar(rng.uniform(0.01, 3), rng.uniform(-M_PI, M_PI));
        while (!(std::abs(w) + b > 1e-6));
        st.modrelu_phase_err = std::max(st.modrelu_phase_err, phase_diff(apply_scalar(Activation::modrelu, w, b), w));
    }
    // Same checks through the tensor implementations.
    ComplexTensor<double> zt(Shape{1, 1, points});
    for (std::size_t k = 0; k < points; ++k) {
        zt.re[k] = rng.uniform(1e-3, 3);
        zt.im[k] = rng.uniform(1e-3, 3);
    }
    const ComplexTensor<double> zo = zrelu(zt);
    const ComplexTensor<double> mo = modrelu(zt, Tensor<double>(Shape{1}, -1e-4));
    for (std::size_t k = 0; k < points; ++k) {
        const std::complex<double> in(zt.re[k], zt.im[k]);
        st.zrelu_phase_err = std::max(st.zrelu_phase_err, phase_diff({zo.re[k], zo.im[k]}, in));
        st.modrelu_phase_err = std::max(st.modrelu_phase_err, phase_diff({mo.re[k], mo.im[k]}, in));
    }
    return st;
}

}  // namespace cvnn
