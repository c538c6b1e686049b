#pragma once

// Complex activations (CReLU, zReLU, modReLU), their phase-region semantics, and a numerical
// Cauchy-Riemann check.

#include <cmath>
#include <complex>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/autograd.hpp"

namespace cvnn {

enum class Activation { crelu, zrelu, modrelu, relu };

inline Activation parse_activation(const std::string& s) {
    if (s == "crelu") return Activation::crelu;
    if (s == "zrelu") return Activation::zrelu;
    if (s == "modrelu") return Activation::modrelu;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation '" + s +
                                "' (expected crelu|zrelu|modrelu|relu)");
}

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::crelu: return "crelu";
        case Activation::zrelu: return "zrelu";
        case Activation::modrelu: return "modrelu";
        case Activation::relu: return "relu";
    }
    return "?";
}

/// ReLU(Re z) + i ReLU(Im z)
template <typename T>
CVar<T> crelu(CVar<T> z) {
    return {relu(z.re), relu(z.im)};
}

namespace detail {

/// out = v * pass, d out/d v = grad_pass (masks are constants of the forward input).
template <typename T>
Var<T> apply_mask(Var<T> v, std::vector<std::uint8_t> pass, std::vector<std::uint8_t> grad_pass) {
    Tensor<T> out = v.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!pass[i]) out[i] = T{0};
    return v.tape->record(std::move(out), {v},
                          [v, gp = std::move(grad_pass)](Tape<T>& t, const Tensor<T>& g) {
                              if (!t.requires_grad(v.id)) return;
                              Tensor<T>& gv = t.grad(v.id);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  if (gp[i]) gv[i] += g[i];
                          });
}

}  // namespace detail

/// z where arg z lies in the closed interval [0, pi/2], else 0. The backward pass uses
/// subgradient 0 on the boundary axes.
template <typename T>
CVar<T> zrelu(CVar<T> z) {
    const Tensor<T>& x = z.re.value();
    const Tensor<T>& y = z.im.value();
    std::vector<std::uint8_t> pass(x.size()), interior(x.size()), branch(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        pass[i] = x[i] >= T{0} && y[i] >= T{0};
        interior[i] = x[i] > T{0} && y[i] > T{0};
        branch[i] = static_cast<std::uint8_t>(pass[i] + interior[i]);
    }
    z.re.tape->note_branch(branch);
    return {detail::apply_mask(z.re, pass, interior), detail::apply_mask(z.im, pass, interior)};
}

/// ReLU(|z| + b) / |z| per element, with b broadcast over channel axis 1. Zero at z = 0 and
/// wherever |z| + b < 0; gradient 0 at |z| + b = 0.
template <typename T>
Var<T> modrelu_scale(Var<T> x, Var<T> y, Var<T> b) {
    require_same_shape(x.shape(), y.shape(), "modrelu");
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), outer, channels, inner);
    if (b.shape() != Shape{channels})
        throw ShapeError("modrelu bias " + shape_str(b.shape()) + " vs " +
                         std::to_string(channels) + " channels");
    const Tensor<T>& xv = x.value();
    const Tensor<T>& yv = y.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> s(xv.shape());
    std::vector<std::uint8_t> active(xv.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (o * channels + c) * inner + i;
                const T r = std::hypot(xv[k], yv[k]);
                active[k] = r > T{0} && r + bv[c] > T{0};
                s[k] = active[k] ? (r + bv[c]) / r : T{0};
            }
    x.tape->note_branch(active);
    return x.tape->record(
        std::move(s), {x, y, b},
        [x, y, b, outer, channels, inner, active = std::move(active)](Tape<T>& t,
                                                                      const Tensor<T>& g) {
            const Tensor<T>& xv = t.value(x.id);
            const Tensor<T>& yv = t.value(y.id);
            const Tensor<T>& bv = t.value(b.id);
            Tensor<T>* gx = t.requires_grad(x.id) ? &t.grad(x.id) : nullptr;
            Tensor<T>* gy = t.requires_grad(y.id) ? &t.grad(y.id) : nullptr;
            Tensor<T>* gb = t.requires_grad(b.id) ? &t.grad(b.id) : nullptr;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t k = (o * channels + c) * inner + i;
                        if (!active[k]) continue;
                        const T r = std::hypot(xv[k], yv[k]);
                        const T r3 = r * r * r;
                        if (gx) (*gx)[k] -= g[k] * bv[c] * xv[k] / r3;
                        if (gy) (*gy)[k] -= g[k] * bv[c] * yv[k] / r3;
                        if (gb) (*gb)[c] += g[k] / r;
                    }
        });
}

/// ReLU(|z| + b) e^{i arg z}
template <typename T>
CVar<T> modrelu(CVar<T> z, Var<T> b) {
    Var<T> s = modrelu_scale(z.re, z.im, b);
    return {mul(z.re, s), mul(z.im, s)};
}

/// Activation layer; modReLU carries one learnable bias per channel, initialized to 0.
template <typename T>
class ComplexActivation {
public:
    ComplexActivation(std::string name, Activation kind, std::size_t channels)
        : kind_(kind) {
        if (kind_ == Activation::relu) kind_ = Activation::crelu;
        if (kind_ == Activation::modrelu) bias_.emplace(name + ".b", Tensor<T>(Shape{channels}));
    }

    CVar<T> forward(Tape<T>& tape, CVar<T> z) {
        switch (kind_) {
            case Activation::zrelu: return zrelu(z);
            case Activation::modrelu: return modrelu(z, tape.param(*bias_));
            default: return crelu(z);
        }
    }
    void collect(std::vector<Parameter<T>*>& out) {
        if (bias_) out.push_back(&*bias_);
    }
    Activation kind() const { return kind_; }
    Parameter<T>* bias() { return bias_ ? &*bias_ : nullptr; }

private:
    Activation kind_;
    std::optional<Parameter<T>> bias_;
};

// Eager versions.

template <typename T>
ComplexTensor<T> crelu(const ComplexTensor<T>& z) {
    Tape<T> tape;
    return crelu(tape.constant(z)).value();
}

template <typename T>
ComplexTensor<T> zrelu(const ComplexTensor<T>& z) {
    Tape<T> tape;
    return zrelu(tape.constant(z)).value();
}

/// b has one entry per channel (axis 1).
template <typename T>
ComplexTensor<T> modrelu(const ComplexTensor<T>& z, const Tensor<T>& b) {
    Tape<T> tape;
    CVar<T> v = tape.constant(z);
    return modrelu(v, tape.constant(b)).value();
}

// Scalar semantics used by the region classifier and the Cauchy-Riemann check.

inline std::complex<double> apply_scalar(Activation a, std::complex<double> z, double b = 0.0) {
    const double x = z.real(), y = z.imag();
    switch (a) {
        case Activation::crelu:
        case Activation::relu: return {std::max(x, 0.0), std::max(y, 0.0)};
        case Activation::zrelu: return (x >= 0.0 && y >= 0.0) ? z : std::complex<double>{};
        case Activation::modrelu: {
            const double r = std::abs(z);
            if (r == 0.0 || r + b < 0.0) return {};
            return z * ((r + b) / r);
        }
    }
    return {};
}

enum class PhaseRegion { preserved, projected_to_real_axis, projected_to_imag_axis, canceled };

inline std::string to_string(PhaseRegion r) {
    switch (r) {
        case PhaseRegion::preserved: return "preserved";
        case PhaseRegion::projected_to_real_axis: return "projected-to-real-axis";
        case PhaseRegion::projected_to_imag_axis: return "projected-to-imag-axis";
        case PhaseRegion::canceled: return "canceled";
    }
    return "?";
}

/// How an activation treats the phase of z. `b` is the modReLU bias.
inline PhaseRegion phase_region(Activation a, std::complex<double> z, double b = 0.0) {
    const std::complex<double> out = apply_scalar(a, z, b);
    if (z == std::complex<double>{}) return PhaseRegion::preserved;
    if (out == std::complex<double>{}) return PhaseRegion::canceled;
    if (std::abs(std::arg(out) - std::arg(z)) < 1e-12) return PhaseRegion::preserved;
    return out.imag() == 0.0 ? PhaseRegion::projected_to_real_axis
                             : PhaseRegion::projected_to_imag_axis;
}

inline PhaseRegion phase_region(const std::string& activation_id, std::complex<double> z,
                                double b = 0.0) {
    return phase_region(parse_activation(activation_id), z, b);
}

/// max(|du/dx - dv/dy|, |du/dy + dv/dx|) by central differences of step h around z0.
inline double cauchy_riemann_residual(
    const std::function<std::complex<double>(std::complex<double>)>& f, std::complex<double> z0,
    double h) {
    if (!(h > 0.0)) throw std::invalid_argument("cauchy_riemann_residual: h must be > 0");
    const std::complex<double> fxp = f(z0 + h), fxm = f(z0 - h);
    const std::complex<double> fyp = f(z0 + std::complex<double>(0, h));
    const std::complex<double> fym = f(z0 - std::complex<double>(0, h));
    for (auto v : {fxp, fxm, fyp, fym})
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
            throw std::domain_error("cauchy_riemann_residual: non-finite sample near z0");
    const double ux = (fxp.real() - fxm.real()) / (2 * h);
    const double vx = (fxp.imag() - fxm.imag()) / (2 * h);
    const double uy = (fyp.real() - fym.real()) / (2 * h);
    const double vy = (fyp.imag() - fym.imag()) / (2 * h);
    return std::max(std::abs(ux - vy), std::abs(uy + vx));
}

}  // namespace cvnn
