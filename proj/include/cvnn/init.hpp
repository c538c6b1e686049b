#pragma once

// Complex weight initialization: Rayleigh magnitude with uniform phase, the (semi-)unitary
// variant rescaled to a variance criterion, and the real orthogonal analogue.

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cvnn/random.hpp"
#include "cvnn/tensor.hpp"

namespace cvnn {

enum class Criterion { glorot, he };
enum class InitFlavor { rayleigh_iid, unitary, orthogonal_real };

struct InitSpec {
    Criterion criterion = Criterion::he;
    InitFlavor flavor = InitFlavor::unitary;
    std::size_t fan_in = 1;
    std::size_t fan_out = 1;
    std::uint64_t seed = 0;
};

inline Criterion parse_criterion(const std::string& s) {
    if (s == "glorot") return Criterion::glorot;
    if (s == "he") return Criterion::he;
    throw std::invalid_argument("unknown init criterion '" + s + "' (expected glorot|he)");
}
inline std::string to_string(Criterion c) { return c == Criterion::glorot ? "glorot" : "he"; }

inline InitFlavor parse_flavor(const std::string& s) {
    if (s == "rayleigh" || s == "rayleigh_iid") return InitFlavor::rayleigh_iid;
    if (s == "unitary") return InitFlavor::unitary;
    if (s == "orthogonal" || s == "orthogonal_real") return InitFlavor::orthogonal_real;
    throw std::invalid_argument("unknown init flavor '" + s +
                                "' (expected rayleigh|unitary|orthogonal)");
}
inline std::string to_string(InitFlavor f) {
    switch (f) {
        case InitFlavor::rayleigh_iid: return "rayleigh";
        case InitFlavor::unitary: return "unitary";
        case InitFlavor::orthogonal_real: return "orthogonal";
    }
    return "?";
}

/// Var(W) = 2/(n_in + n_out) for Glorot, 2/n_in for He.
inline double target_variance(Criterion c, std::size_t fan_in, std::size_t fan_out) {
    if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("fan_in and fan_out must be >= 1");
    return c == Criterion::glorot ? 2.0 / static_cast<double>(fan_in + fan_out)
                                  : 2.0 / static_cast<double>(fan_in);
}

/// Rayleigh mode parameter with Var(W) = 2 sigma^2.
inline double rayleigh_sigma(Criterion c, std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(target_variance(c, fan_in, fan_out) / 2.0);
}

/// Fans of an (out, in, k, k) kernel or (out, in) matrix: n_in = in*k*k, n_out = out*k*k.
inline std::pair<std::size_t, std::size_t> kernel_fans(const Shape& s) {
    if (s.size() < 2) throw ShapeError("kernel shape needs rank >= 2, got " + shape_str(s));
    std::size_t receptive = 1;
    for (std::size_t i = 2; i < s.size(); ++i) receptive *= s[i];
    return {s[1] * receptive, s[0] * receptive};
}

using CMatrix = std::vector<std::vector<std::complex<double>>>;
using RMatrix = std::vector<std::vector<double>>;

namespace detail {

class RankDeficient : public std::runtime_error {
public:
    RankDeficient() : std::runtime_error("rank deficient draw") {}
};

/// Modified Gram-Schmidt with one re-orthogonalization pass, in place on the rows.
template <typename S>
void orthonormalize_rows(std::vector<std::vector<S>>& rows) {
    auto inner = [](const std::vector<S>& a, const std::vector<S>& b) {
        S acc{};
        for (std::size_t k = 0; k < a.size(); ++k) {
            if constexpr (std::is_same_v<S, double>)
                acc += a[k] * b[k];
            else
                acc += a[k] * std::conj(b[k]);
        }
        return acc;
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& v = rows[i];
        const double initial = std::sqrt(std::abs(inner(v, v)));
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t j = 0; j < i; ++j) {
                const S proj = inner(v, rows[j]);
                for (std::size_t k = 0; k < v.size(); ++k) v[k] -= proj * rows[j][k];
            }
        const double norm = std::sqrt(std::abs(inner(v, v)));
        if (!(norm > 1e-10 * initial) || norm == 0.0) throw RankDeficient();
        for (auto& x : v) x /= norm;
    }
}

template <typename S>
std::vector<std::vector<S>> transpose(const std::vector<std::vector<S>>& m) {
    if (m.empty()) return {};
    std::vector<std::vector<S>> t(m[0].size(), std::vector<S>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m[i].size(); ++j) t[j][i] = m[i][j];
    return t;
}

template <typename S, typename Draw>
std::vector<std::vector<S>> semi_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                             Draw&& draw) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("matrix dimensions must be >= 1");
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(seed + attempt);
        std::vector<std::vector<S>> m(rows, std::vector<S>(cols));
        for (auto& r : m)
            for (auto& x : r) x = draw(rng);
        try {
            if (rows <= cols) {
                orthonormalize_rows(m);
                return m;
            }
            auto t = transpose(m);
            orthonormalize_rows(t);
            return transpose(t);
        } catch (const RankDeficient&) {
            if (attempt > 64) throw std::runtime_error("orthonormalization failed repeatedly");
        }
    }
}

}  // namespace detail

/// Random complex matrix with orthonormal rows (rows <= cols) or columns (rows > cols),
/// from i.i.d. standard complex normal entries.
inline CMatrix semi_unitary(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    return detail::semi_orthonormal<std::complex<double>>(rows, cols, seed, [](Rng& r) {
        const double a = r.normal() / std::sqrt(2.0);
        const double b = r.normal() / std::sqrt(2.0);
        return std::complex<double>(a, b);
    });
}

/// Real analogue of semi_unitary.
inline RMatrix semi_orthogonal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    return detail::semi_orthonormal<double>(rows, cols, seed, [](Rng& r) { return r.normal(); });
}

/// |W| ~ Rayleigh(sigma), arg W ~ U(-pi, pi).
template <typename T>
ComplexTensor<T> rayleigh_complex_init(const InitSpec& spec, const Shape& shape) {
    const double sigma = rayleigh_sigma(spec.criterion, spec.fan_in, spec.fan_out);
    Rng rng(spec.seed);
    ComplexTensor<T> w(shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
        // Inverse CDF of the Rayleigh distribution.
        const double mag = sigma * std::sqrt(-2.0 * std::log1p(-rng.uniform()));
        const double theta = rng.uniform(-M_PI, M_PI);
        w.re[i] = static_cast<T>(mag * std::cos(theta));
        w.im[i] = static_cast<T>(mag * std::sin(theta));
    }
    return w;
}

/// Semi-unitary (out, in*k*k) matrix reshaped row-major to the kernel, then scaled so that the
/// empirical E|W|^2 equals the criterion variance.
template <typename T>
ComplexTensor<T> unitary_complex_init(const InitSpec& spec, const Shape& kernel_shape) {
    const std::size_t rows = kernel_shape.at(0);
    const std::size_t cols = shape_numel(kernel_shape) / rows;
    const CMatrix u = semi_unitary(rows, cols, spec.seed);
    double power = 0.0;
    for (const auto& r : u)
        for (const auto& x : r) power += std::norm(x);
    power /= static_cast<double>(rows * cols);
    const double f = std::sqrt(target_variance(spec.criterion, spec.fan_in, spec.fan_out) / power);
    ComplexTensor<T> w(kernel_shape);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            w.re[i * cols + j] = static_cast<T>(f * u[i][j].real());
            w.im[i * cols + j] = static_cast<T>(f * u[i][j].imag());
        }
    return w;
}

template <typename T>
Tensor<T> orthogonal_real_init(const InitSpec& spec, const Shape& kernel_shape) {
    const std::size_t rows = kernel_shape.at(0);
    const std::size_t cols = shape_numel(kernel_shape) / rows;
    const RMatrix q = semi_orthogonal(rows, cols, spec.seed);
    double power = 0.0;
    for (const auto& r : q)
        for (double x : r) power += x * x;
    power /= static_cast<double>(rows * cols);
    const double f = std::sqrt(target_variance(spec.criterion, spec.fan_in, spec.fan_out) / power);
    Tensor<T> w(kernel_shape);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) w[i * cols + j] = static_cast<T>(f * q[i][j]);
    return w;
}

/// Layer-level init policy: flavor and criterion, with per-layer seeds from a root seed.
struct InitPolicy {
    InitFlavor complex_flavor = InitFlavor::unitary;
    Criterion criterion = Criterion::he;
    std::uint64_t root_seed = 0;

    InitSpec spec_for(const Shape& kernel, const std::string& path, InitFlavor flavor) const {
        auto [fi, fo] = kernel_fans(kernel);
        return InitSpec{criterion, flavor, fi, fo, derive_seed(root_seed, path)};
    }

    template <typename T>
    ComplexTensor<T> complex_kernel(const Shape& kernel, const std::string& path) const {
        const InitSpec s = spec_for(kernel, path, complex_flavor);
        if (complex_flavor == InitFlavor::rayleigh_iid) return rayleigh_complex_init<T>(s, kernel);
        if (complex_flavor == InitFlavor::unitary) return unitary_complex_init<T>(s, kernel);
        throw std::invalid_argument("complex layers need a rayleigh or unitary init flavor");
    }

    template <typename T>
    Tensor<T> real_kernel(const Shape& kernel, const std::string& path) const {
        return orthogonal_real_init<T>(spec_for(kernel, path, InitFlavor::orthogonal_real), kernel);
    }
};

}  // namespace cvnn
