#pragma once

// Complex batch normalization by 2x2 whitening of (Re, Im) pairs, its naive ablation
// (division by the complex standard deviation), real batch norm, and the ellipticity harness.
//
// Statistics are pooled per channel over the batch and all spatial positions.

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/autograd.hpp"
#include "cvnn/random.hpp"

namespace cvnn {

/// 2x2 real matrix [[rr, ri], [ir, ii]].
struct Mat2 {
    double rr = 0, ri = 0, ir = 0, ii = 0;

    static Mat2 identity() { return {1, 0, 0, 1}; }
    friend Mat2 operator*(const Mat2& a, const Mat2& b) {
        return {a.rr * b.rr + a.ri * b.ir, a.rr * b.ri + a.ri * b.ii,
                a.ir * b.rr + a.ii * b.ir, a.ir * b.ri + a.ii * b.ii};
    }
    double det() const { return rr * ii - ri * ir; }
    double trace() const { return rr + ii; }
};

/// Covariance of (Re, Im): [[Vrr, Vri], [Vir, Vii]].
using Cov2 = Mat2;

class WhiteningError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// (V + eps I)^{-1/2} in closed form:
///   s = sqrt(det), t = sqrt(trace + 2s), sqrt(V) = (V + sI)/t, inverse by the 2x2 adjugate.
inline Mat2 inv_sqrt_2x2(const Cov2& v, double eps = 0.0) {
    Mat2 m = v;
    m.rr += eps;
    m.ii += eps;
    const double det = m.det();
    if (!(det > 0.0)) throw WhiteningError("covariance is not positive definite (det <= 0)");
    const double s = std::sqrt(det);
    const double t = std::sqrt(m.trace() + 2.0 * s);
    if (!(t > 0.0)) throw WhiteningError("degenerate covariance (t == 0)");
    // det(sqrt(V)) = s, so inv(sqrt(V)) = adj(V + sI) / (s t).
    const double k = 1.0 / (s * t);
    return {(m.ii + s) * k, -m.ri * k, -m.ir * k, (m.rr + s) * k};
}

/// Condition number of a symmetric positive semi-definite 2x2 matrix; infinity when singular
/// or non-finite.
inline double condition_number(const Cov2& v) {
    const double tr = v.rr + v.ii;
    const double off = 0.5 * (v.ri + v.ir);
    const double disc = std::sqrt((v.rr - v.ii) * (v.rr - v.ii) + 4.0 * off * off);
    const double hi = 0.5 * (tr + disc), lo = 0.5 * (tr - disc);
    if (!std::isfinite(hi) || !std::isfinite(lo) || !(lo > 0.0))
        return std::numeric_limits<double>::infinity();
    return hi / lo;
}

// ---------------------------------------------------------------------------------------------

/// Tape-level whitening of a complex tensor: returns the standardized pair and the batch
/// statistics it used (means and Vrr, Vri, Vii without eps).
template <typename T>
struct WhitenResult {
    CVar<T> out;
    Var<T> mean_re, mean_im, vrr, vri, vii;
};

template <typename T>
WhitenResult<T> complex_whiten(CVar<T> z, T eps) {
    Var<T> mr = channel_mean(z.re);
    Var<T> mi = channel_mean(z.im);
    Var<T> xc = sub_channel(z.re, mr);
    Var<T> yc = sub_channel(z.im, mi);
    Var<T> vrr = channel_mean(square(xc));
    Var<T> vii = channel_mean(square(yc));
    Var<T> vri = channel_mean(mul(xc, yc));
    Var<T> a = add_scalar(vrr, eps);
    Var<T> d = add_scalar(vii, eps);
    Var<T> s = sqrt(sub(mul(a, d), square(vri)));
    Var<T> t = sqrt(add(add(a, d), scale(s, T{2})));
    Var<T> k = reciprocal(mul(s, t));
    Var<T> wrr = mul(add(d, s), k);
    Var<T> wii = mul(add(a, s), k);
    Var<T> wri = neg(mul(vri, k));
    CVar<T> out{add(mul_channel(xc, wrr), mul_channel(yc, wri)),
                add(mul_channel(xc, wri), mul_channel(yc, wii))};
    return {out, mr, mi, vrr, vri, vii};
}

namespace detail {
inline void require_group(const Shape& s, const std::string& who) {
    if (s.size() < 2) throw ShapeError(who + " needs (N, C, ...) input, got " + shape_str(s));
    if (shape_numel(s) / s[1] < 2)
        throw std::invalid_argument(who + ": batch statistics need at least 2 samples per channel");
}

template <typename T>
void guard_finite(const std::string& where, std::initializer_list<Var<T>> stats) {
    for (const auto& v : stats)
        if (!v.value().all_finite()) throw NanGuardError(where, "non-finite batch statistic");
}

template <typename T>
void running_update(Tensor<T>& running, const Tensor<T>& batch, T momentum) {
    for (std::size_t i = 0; i < running.size(); ++i)
        running[i] = momentum * running[i] + (T{1} - momentum) * batch[i];
}
}  // namespace detail

/// Complex batch normalization: BN(x) = gamma * whiten(x) + beta, gamma symmetric 2x2 with three
/// learnable entries per channel, beta complex.
template <typename T>
class ComplexBatchNorm {
public:
    ComplexBatchNorm(std::string name, std::size_t channels, T eps = T(1e-5), T momentum = T(0.9))
        : name_(std::move(name)),
          eps_(eps),
          momentum_(momentum),
          gamma_rr_(name_ + ".gamma_rr", Tensor<T>(Shape{channels}, T(1 / std::sqrt(2.0)))),
          gamma_ri_(name_ + ".gamma_ri", Tensor<T>(Shape{channels})),
          gamma_ii_(name_ + ".gamma_ii", Tensor<T>(Shape{channels}, T(1 / std::sqrt(2.0)))),
          beta_(name_ + ".beta", ComplexTensor<T>(Shape{channels})),
          mean_re_{name_ + ".running_mean_re", Tensor<T>(Shape{channels})},
          mean_im_{name_ + ".running_mean_im", Tensor<T>(Shape{channels})},
          vrr_{name_ + ".running_vrr", Tensor<T>(Shape{channels}, T(1 / std::sqrt(2.0)))},
          vri_{name_ + ".running_vri", Tensor<T>(Shape{channels})},
          vii_{name_ + ".running_vii", Tensor<T>(Shape{channels}, T(1 / std::sqrt(2.0)))} {
        if (!(momentum > T{0} && momentum < T{1}))
            throw std::invalid_argument("batch norm momentum must lie in (0, 1)");
    }

    CVar<T> forward(Tape<T>& tape, CVar<T> z, bool training) {
        check_channels(z.shape());
        CVar<T> w = training ? whiten_batch(z) : whiten_running(tape, z);
        return affine(tape, w);
    }

    /// Standardized input before gamma and beta (batch statistics, no running update).
    CVar<T> whiten_only(CVar<T> z) {
        check_channels(z.shape());
        detail::require_group(z.shape(), name_);
        return complex_whiten(z, eps_).out;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (auto* p : {&gamma_rr_, &gamma_ri_, &gamma_ii_, &beta_}) out.push_back(p);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        for (auto* b : {&mean_re_, &mean_im_, &vrr_, &vri_, &vii_}) out.push_back(b);
    }

    Parameter<T>& gamma_rr() { return gamma_rr_; }
    Parameter<T>& gamma_ri() { return gamma_ri_; }
    Parameter<T>& gamma_ii() { return gamma_ii_; }
    Parameter<T>& beta() { return beta_; }
    Buffer<T>& running_mean_re() { return mean_re_; }
    Buffer<T>& running_mean_im() { return mean_im_; }
    Buffer<T>& running_vrr() { return vrr_; }
    Buffer<T>& running_vri() { return vri_; }
    Buffer<T>& running_vii() { return vii_; }
    T eps() const { return eps_; }
    T momentum() const { return momentum_; }
    std::size_t channels() const { return gamma_rr_.re.size(); }

private:
    void check_channels(const Shape& s) const {
        if (s.size() < 2 || s[1] != channels())
            throw ShapeError(name_ + ": expected " + std::to_string(channels()) +
                             " channels, got input " + shape_str(s));
    }

    CVar<T> whiten_batch(CVar<T> z) {
        detail::require_group(z.shape(), name_);
        WhitenResult<T> w = complex_whiten(z, eps_);
        detail::guard_finite<T>(name_, {w.mean_re, w.mean_im, w.vrr, w.vri, w.vii});
        if (!w.out.re.value().all_finite() || !w.out.im.value().all_finite())
            throw NanGuardError(name_, "whitening produced non-finite values");
        detail::running_update(mean_re_.value, w.mean_re.value(), momentum_);
        detail::running_update(mean_im_.value, w.mean_im.value(), momentum_);
        detail::running_update(vrr_.value, w.vrr.value(), momentum_);
        detail::running_update(vri_.value, w.vri.value(), momentum_);
        detail::running_update(vii_.value, w.vii.value(), momentum_);
        return w.out;
    }

    CVar<T> whiten_running(Tape<T>& tape, CVar<T> z) {
        const std::size_t C = channels();
        Tensor<T> wrr(Shape{C}), wri(Shape{C}), wii(Shape{C});
        for (std::size_t c = 0; c < C; ++c) {
            const Cov2 v{double(vrr_.value[c]), double(vri_.value[c]), double(vri_.value[c]),
                         double(vii_.value[c])};
            const Mat2 m = inv_sqrt_2x2(v, double(eps_));
            wrr[c] = T(m.rr);
            wri[c] = T(m.ri);
            wii[c] = T(m.ii);
        }
        Var<T> xc = sub_channel(z.re, tape.constant(mean_re_.value));
        Var<T> yc = sub_channel(z.im, tape.constant(mean_im_.value));
        Var<T> crr = tape.constant(std::move(wrr));
        Var<T> cri = tape.constant(std::move(wri));
        Var<T> cii = tape.constant(std::move(wii));
        return {add(mul_channel(xc, crr), mul_channel(yc, cri)),
                add(mul_channel(xc, cri), mul_channel(yc, cii))};
    }

    CVar<T> affine(Tape<T>& tape, CVar<T> w) {
        Var<T> grr = tape.param(gamma_rr_);
        Var<T> gri = tape.param(gamma_ri_);
        Var<T> gii = tape.param(gamma_ii_);
        CVar<T> b = tape.cparam(beta_);
        return {add_channel(add(mul_channel(w.re, grr), mul_channel(w.im, gri)), b.re),
                add_channel(add(mul_channel(w.re, gri), mul_channel(w.im, gii)), b.im)};
    }

    std::string name_;
    T eps_, momentum_;
    Parameter<T> gamma_rr_, gamma_ri_, gamma_ii_, beta_;
    Buffer<T> mean_re_, mean_im_, vrr_, vri_, vii_;
};

/// Naive complex batch norm: (x - mu) / sqrt(Vrr + Vii + eps), scaled by a real gamma per
/// channel and shifted by a complex beta. Does not decorrelate Re and Im.
template <typename T>
class NaiveComplexBatchNorm {
public:
    NaiveComplexBatchNorm(std::string name, std::size_t channels, T eps = T(1e-5),
                          T momentum = T(0.9))
        : name_(std::move(name)),
          eps_(eps),
          momentum_(momentum),
          gamma_(name_ + ".gamma", Tensor<T>(Shape{channels}, T{1})),
          beta_(name_ + ".beta", ComplexTensor<T>(Shape{channels})),
          mean_re_{name_ + ".running_mean_re", Tensor<T>(Shape{channels})},
          mean_im_{name_ + ".running_mean_im", Tensor<T>(Shape{channels})},
          var_{name_ + ".running_var", Tensor<T>(Shape{channels}, T{1})} {}

    CVar<T> forward(Tape<T>& tape, CVar<T> z, bool training) {
        Var<T> xc, yc, inv;
        if (training) {
            detail::require_group(z.shape(), name_);
            Var<T> mr = channel_mean(z.re);
            Var<T> mi = channel_mean(z.im);
            xc = sub_channel(z.re, mr);
            yc = sub_channel(z.im, mi);
            Var<T> gamma_cov = add(channel_mean(square(xc)), channel_mean(square(yc)));
            detail::guard_finite<T>(name_, {mr, mi, gamma_cov});
            inv = reciprocal(sqrt(add_scalar(gamma_cov, eps_)));
            detail::running_update(mean_re_.value, mr.value(), momentum_);
            detail::running_update(mean_im_.value, mi.value(), momentum_);
            detail::running_update(var_.value, gamma_cov.value(), momentum_);
        } else {
            xc = sub_channel(z.re, tape.constant(mean_re_.value));
            yc = sub_channel(z.im, tape.constant(mean_im_.value));
            Tensor<T> k(var_.value.shape());
            for (std::size_t c = 0; c < k.size(); ++c) k[c] = T{1} / std::sqrt(var_.value[c] + eps_);
            inv = tape.constant(std::move(k));
        }
        Var<T> g = mul(inv, tape.param(gamma_));
        CVar<T> b = tape.cparam(beta_);
        return {add_channel(mul_channel(xc, g), b.re), add_channel(mul_channel(yc, g), b.im)};
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        for (auto* b : {&mean_re_, &mean_im_, &var_}) out.push_back(b);
    }
    Parameter<T>& gamma() { return gamma_; }
    Parameter<T>& beta() { return beta_; }

private:
    std::string name_;
    T eps_, momentum_;
    Parameter<T> gamma_, beta_;
    Buffer<T> mean_re_, mean_im_, var_;
};

/// Standard per-channel batch normalization of a real tensor.
template <typename T>
class BatchNorm {
public:
    BatchNorm(std::string name, std::size_t channels, T eps = T(1e-5), T momentum = T(0.9))
        : name_(std::move(name)),
          eps_(eps),
          momentum_(momentum),
          gamma_(name_ + ".gamma", Tensor<T>(Shape{channels}, T{1})),
          beta_(name_ + ".beta", Tensor<T>(Shape{channels})),
          mean_{name_ + ".running_mean", Tensor<T>(Shape{channels})},
          var_{name_ + ".running_var", Tensor<T>(Shape{channels}, T{1})} {}

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        Var<T> xc, inv;
        if (training) {
            detail::require_group(x.shape(), name_);
            Var<T> m = channel_mean(x);
            xc = sub_channel(x, m);
            Var<T> v = channel_mean(square(xc));
            detail::guard_finite<T>(name_, {m, v});
            inv = reciprocal(sqrt(add_scalar(v, eps_)));
            detail::running_update(mean_.value, m.value(), momentum_);
            detail::running_update(var_.value, v.value(), momentum_);
        } else {
            xc = sub_channel(x, tape.constant(mean_.value));
            Tensor<T> k(var_.value.shape());
            for (std::size_t c = 0; c < k.size(); ++c) k[c] = T{1} / std::sqrt(var_.value[c] + eps_);
            inv = tape.constant(std::move(k));
        }
        return add_channel(mul_channel(xc, mul(inv, tape.param(gamma_))), tape.param(beta_));
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        out.push_back(&mean_);
        out.push_back(&var_);
    }

private:
    std::string name_;
    T eps_, momentum_;
    Parameter<T> gamma_, beta_;
    Buffer<T> mean_, var_;
};

// ---------------------------------------------------------------------------------------------
// Eager entry points

template <typename T>
ComplexTensor<T> complex_bn_train(const ComplexTensor<T>& x, ComplexBatchNorm<T>& bn) {
    Tape<T> tape;
    return bn.forward(tape, tape.constant(x), true).value();
}

template <typename T>
ComplexTensor<T> complex_bn_eval(const ComplexTensor<T>& x, ComplexBatchNorm<T>& bn) {
    Tape<T> tape;
    return bn.forward(tape, tape.constant(x), false).value();
}

/// Batch whitening only (the standardized value before gamma and beta).
template <typename T>
ComplexTensor<T> complex_whiten(const ComplexTensor<T>& x, T eps) {
    Tape<T> tape;
    detail::require_group(x.shape(), "complex_whiten");
    return complex_whiten(tape.constant(x), eps).out.value();
}

template <typename T>
ComplexTensor<T> naive_complex_bn(const ComplexTensor<T>& x, NaiveComplexBatchNorm<T>& bn) {
    Tape<T> tape;
    return bn.forward(tape, tape.constant(x), true).value();
}

/// Empirical covariance of (re, im) pooled over all elements.
template <typename T>
Cov2 empirical_cov2(const ComplexTensor<T>& z) {
    const std::size_t n = z.size();
    double mr = 0, mi = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mr += z.re[i];
        mi += z.im[i];
    }
    mr /= double(n);
    mi /= double(n);
    Cov2 v;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = z.re[i] - mr, b = z.im[i] - mi;
        v.rr += a * a;
        v.ri += a * b;
        v.ii += b * b;
    }
    v.rr /= double(n);
    v.ri /= double(n);
    v.ii /= double(n);
    v.ir = v.ri;
    return v;
}

// ---------------------------------------------------------------------------------------------
// Ellipticity harness

enum class StandardizeMode { naive, full };

inline StandardizeMode parse_standardize_mode(const std::string& s) {
    if (s == "naive") return StandardizeMode::naive;
    if (s == "full") return StandardizeMode::full;
    throw std::invalid_argument("unknown standardization mode '" + s + "' (expected naive|full)");
}

/// Propagates a 2D point cloud through alternating random 2x2 linear maps and standardizations.
/// Entry 0 is the condition number after standardizing the input cloud; entry l after layer l.
/// Non-finite or singular covariances report infinity.
inline std::vector<double> ellipticity_harness(std::size_t n_points, std::size_t n_layers,
                                               StandardizeMode mode, std::uint64_t seed,
                                               double eps = 0.0) {
    if (n_points < 100) throw std::invalid_argument("ellipticity harness needs >= 100 points");
    Rng rng(seed);
    std::vector<double> re(n_points), im(n_points);
    const Mat2 shape{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    for (std::size_t i = 0; i < n_points; ++i) {
        const double a = rng.normal(), b = rng.normal();
        re[i] = shape.rr * a + shape.ri * b;
        im[i] = shape.ir * a + shape.ii * b;
    }

    auto covariance = [&](double& mr, double& mi) {
        mr = mi = 0;
        for (std::size_t i = 0; i < n_points; ++i) {
            mr += re[i];
            mi += im[i];
        }
        mr /= double(n_points);
        mi /= double(n_points);
        Cov2 v;
        for (std::size_t i = 0; i < n_points; ++i) {
            const double a = re[i] - mr, b = im[i] - mi;
            v.rr += a * a;
            v.ri += a * b;
            v.ii += b * b;
        }
        v.rr /= double(n_points);
        v.ri /= double(n_points);
        v.ii /= double(n_points);
        v.ir = v.ri;
        return v;
    };

    auto standardize = [&]() {
        double mr, mi;
        const Cov2 v = covariance(mr, mi);
        Mat2 m;
        if (mode == StandardizeMode::full) {
            try {
                m = inv_sqrt_2x2(v, eps);
            } catch (const WhiteningError&) {
                m = {NAN, NAN, NAN, NAN};
            }
        } else {
            const double k = 1.0 / std::sqrt(v.rr + v.ii + eps);
            m = {k, 0, 0, k};
        }
        for (std::size_t i = 0; i < n_points; ++i) {
            const double a = re[i] - mr, b = im[i] - mi;
            re[i] = m.rr * a + m.ri * b;
            im[i] = m.ir * a + m.ii * b;
        }
        double r0, r1;
        return condition_number(covariance(r0, r1));
    };

    std::vector<double> out;
    out.reserve(n_layers + 1);
    out.push_back(standardize());
    for (std::size_t l = 0; l < n_layers; ++l) {
        const Mat2 w{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        for (std::size_t i = 0; i < n_points; ++i) {
            const double a = re[i], b = im[i];
            re[i] = w.rr * a + w.ri * b;
            im[i] = w.ir * a + w.ii * b;
        }
        out.push_back(standardize());
    }
    return out;
}

}  // namespace cvnn
