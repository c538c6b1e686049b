#pragma once

// Define-by-run reverse-mode differentiation over real tensors.
//
// Every node on the tape holds one real tensor. A complex quantity z = x + iy is a pair of
// nodes (CVar), so its adjoint pair (dL/dx, dL/dy) is exactly the complex gradient
// dL/dx + i dL/dy of a real-valued loss. Composite complex ops chain through their real and
// imaginary parts independently; no holomorphic shortcut is taken.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cvnn/tensor.hpp"

namespace cvnn {

/// Raised when a loss, gradient or statistic is non-finite.
class NanGuardError : public std::runtime_error {
public:
    NanGuardError(std::string where, const std::string& what)
        : std::runtime_error("NaN guard tripped at " + where + ": " + what),
          where_(std::move(where)) {}
    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

/// A learnable tensor. Complex parameters carry both planes; real ones leave `im` empty.
template <typename T>
struct Parameter {
    std::string name;
    bool is_complex = false;
    Tensor<T> re, im;
    Tensor<T> grad_re, grad_im;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> value)
        : name(std::move(n)), re(std::move(value)), grad_re(re.shape()) {}
    Parameter(std::string n, ComplexTensor<T> value)
        : name(std::move(n)),
          is_complex(true),
          re(std::move(value.re)),
          im(std::move(value.im)),
          grad_re(re.shape()),
          grad_im(im.shape()) {}

    const Shape& shape() const noexcept { return re.shape(); }
    std::size_t real_count() const noexcept { return is_complex ? 2 * re.size() : re.size(); }
    ComplexTensor<T> value() const { return {re, is_complex ? im : Tensor<T>(re.shape())}; }
    ComplexTensor<T> grad() const {
        return {grad_re, is_complex ? grad_im : Tensor<T>(re.shape())};
    }

    void zero_grad() {
        grad_re.fill(T{0});
        if (is_complex) grad_im.fill(T{0});
    }
};

/// Non-learnable state that persists across steps (e.g. running statistics).
template <typename T>
struct Buffer {
    std::string name;
    Tensor<T> value;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
};

/// A complex tape value: real part node and imaginary part node.
template <typename T>
struct CVar {
    Var<T> re;
    Var<T> im;

    const Shape& shape() const { return re.shape(); }
    ComplexTensor<T> value() const { return {re.value(), im.value()}; }
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, false, nullptr); }
    Var<T> leaf(Tensor<T> v) { return push(std::move(v), {}, true, nullptr); }
    CVar<T> constant(ComplexTensor<T> v) {
        return {constant(std::move(v.re)), constant(std::move(v.im))};
    }
    CVar<T> leaf(ComplexTensor<T> v) { return {leaf(std::move(v.re)), leaf(std::move(v.im))}; }

    /// Binds a real parameter. Binding the same parameter twice returns the same node.
    Var<T> param(Parameter<T>& p) {
        if (p.is_complex) throw std::logic_error("parameter " + p.name + " is complex");
        return bind(p).re;
    }
    CVar<T> cparam(Parameter<T>& p) {
        if (!p.is_complex) throw std::logic_error("parameter " + p.name + " is real");
        return bind(p);
    }

    /// Appends an op result. `fn` receives the output adjoint and must only touch inputs.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                      std::move(fn));
    }
    Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
        std::vector<std::size_t> ids;
        bool rg = false;
        for (const auto& v : inputs) {
            check_owner(v);
            ids.push_back(v.id);
            rg = rg || nodes_[v.id].requires_grad;
        }
        Var<T> out = push(std::move(value), std::move(ids), rg, nullptr);
        if (rg) nodes_[out.id].backward = std::move(fn);
        return out;
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adjoint accumulator of a node, allocated on first touch.
    Tensor<T>& grad(std::size_t id) {
        auto& n = nodes_.at(id);
        if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }
    Tensor<T> adjoint(Var<T> v) const {
        const auto& n = nodes_.at(v.id);
        return n.grad.shape() == n.value.shape() ? n.grad : Tensor<T>(n.value.shape());
    }
    ComplexTensor<T> adjoint(CVar<T> v) const { return {adjoint(v.re), adjoint(v.im)}; }

    /// Reverse sweep from a scalar loss; accumulates into every bound parameter's grad.
    void backward(Var<T> loss) {
        check_owner(loss);
        if (loss.value().size() != 1)
            throw ShapeError("backward needs a scalar loss, got shape " +
                             shape_str(loss.value().shape()));
        grad(loss.id)[0] += T{1};
        for (std::size_t k = loss.id + 1; k-- > 0;) {
            Node& n = nodes_[k];
            for (std::size_t in : n.inputs)
                if (in >= k) throw std::logic_error("tape is not topologically ordered (cycle)");
            if (!n.requires_grad || n.grad.shape() != n.value.shape()) continue;
            // Closures only write to inputs (ids < k), so n.grad stays valid.
            if (n.backward) n.backward(*this, n.grad);
        }
        for (auto& n : nodes_) {
            if (!n.param || n.grad.shape() != n.value.shape()) continue;
            Tensor<T>& dst = n.imag_plane ? n.param->grad_im : n.param->grad_re;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
        }
    }

    /// Kink-crossing detection for finite-difference checks: non-smooth ops fold their
    /// branch masks into this running hash.
    void note_branch(std::span<const std::uint8_t> mask) {
        for (auto b : mask) {
            branch_hash_ ^= b;
            branch_hash_ *= 1099511628211ULL;
        }
    }
    std::uint64_t branch_signature() const noexcept { return branch_hash_; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
        bool imag_plane = false;
    };

    Var<T> push(Tensor<T> v, std::vector<std::size_t> inputs, bool rg, Parameter<T>* p) {
        Node n;
        n.value = std::move(v);
        n.inputs = std::move(inputs);
        n.requires_grad = rg;
        n.param = p;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    CVar<T> bind(Parameter<T>& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) return it->second;
        CVar<T> v;
        v.re = push(p.re, {}, true, &p);
        if (p.is_complex) {
            v.im = push(p.im, {}, true, &p);
            nodes_[v.im.id].imag_plane = true;
        } else {
            v.im = v.re;
        }
        bound_.emplace(&p, v);
        return v;
    }

    void check_owner(const Var<T>& v) const {
        if (v.tape != this || v.id >= nodes_.size())
            throw std::logic_error("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T>*, CVar<T>> bound_;
    std::uint64_t branch_hash_ = 1469598103934665603ULL;
};

// ---------------------------------------------------------------------------------------------
// Elementwise primitives

namespace detail {

template <typename T>
void accumulate(Tape<T>& tape, Var<T> v, const Tensor<T>& g, T scale = T{1}) {
    if (!tape.requires_grad(v.id)) return;
    Tensor<T>& dst = tape.grad(v.id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

/// Elementwise op; dfdx(x, y) is the derivative given input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F&& f, D dfdx) {
    const Tensor<T>& av = a.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    Tensor<T> saved = out;
    return a.tape->record(std::move(out), {a},
                          [a, saved = std::move(saved), dfdx](Tape<T>& t, const Tensor<T>& g) {
                              if (!t.requires_grad(a.id)) return;
                              const Tensor<T>& x = t.value(a.id);
                              Tensor<T>& ga = t.grad(a.id);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  ga[i] += g[i] * dfdx(x[i], saved[i]);
                          });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        detail::accumulate(t, a, g);
        detail::accumulate(t, b, g);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        detail::accumulate(t, a, g);
        detail::accumulate(t, b, g, T{-1});
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& x = t.value(a.id);
        const Tensor<T>& y = t.value(b.id);
        if (t.requires_grad(a.id)) {
            Tensor<T>& ga = t.grad(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (t.requires_grad(b.id)) {
            Tensor<T>& gb = t.grad(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    require_same_shape(a.shape(), b.shape(), "div");
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& x = t.value(a.id);
        const Tensor<T>& y = t.value(b.id);
        if (t.requires_grad(a.id)) {
            Tensor<T>& ga = t.grad(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / y[i];
        }
        if (t.requires_grad(b.id)) {
            Tensor<T>& gb = t.grad(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    return detail::unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> neg(Var<T> a) {
    return scale(a, T{-1});
}

template <typename T>
Var<T> sqrt(Var<T> a) {
    return detail::unary(
        a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Var<T> reciprocal(Var<T> a) {
    return detail::unary(
        a, [](T x) { return T{1} / x; }, [](T, T y) { return -y * y; });
}

template <typename T>
Var<T> square(Var<T> a) {
    return detail::unary(
        a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return detail::unary(
        a, [](T x) { return T{1} / (T{1} + std::exp(-x)); },
        [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    return detail::unary(
        a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

/// max(x, 0); subgradient 0 at the kink.
template <typename T>
Var<T> relu(Var<T> a) {
    const Tensor<T>& av = a.value();
    std::vector<std::uint8_t> mask(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) mask[i] = av[i] > T{0};
    a.tape->note_branch(mask);
    return detail::unary(
        a, [](T x) { return x > T{0} ? x : T{0}; },
        [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
    return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
    return sub(a, b);
}
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
    return mul(a, b);
}

// ---------------------------------------------------------------------------------------------
// Reductions and channel broadcasting. "Channel" is axis 1 of a rank >= 2 tensor.

namespace detail {
inline void channel_dims(const Shape& s, std::size_t& outer, std::size_t& channels,
                         std::size_t& inner) {
    if (s.size() < 2) throw ShapeError("channel op needs rank >= 2, got " + shape_str(s));
    split_dims(s, 1, outer, channels, inner);
}
}  // namespace detail

template <typename T>
Var<T> sum(Var<T> a) {
    T s{0};
    for (T v : a.value().vec()) s += v;
    return a.tape->record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        if (!t.requires_grad(a.id)) return;
        Tensor<T>& ga = t.grad(a.id);
        for (auto& v : ga.vec()) v += g[0];
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

/// sum(a * weights) with constant weights.
template <typename T>
Var<T> dot_const(Var<T> a, const Tensor<T>& weights) {
    require_same_shape(a.shape(), weights.shape(), "dot_const");
    T s{0};
    const Tensor<T>& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * weights[i];
    return a.tape->record(Tensor<T>::scalar(s), {a}, [a, weights](Tape<T>& t, const Tensor<T>& g) {
        detail::accumulate(t, a, weights, g[0]);
    });
}

/// Mean over every axis except the channel axis: (N, C, ...) -> (C).
template <typename T>
Var<T> channel_mean(Var<T> a) {
    std::size_t outer, channels, inner;
    detail::channel_dims(a.shape(), outer, channels, inner);
    const Tensor<T>& av = a.value();
    Tensor<T> out(Shape{channels});
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c) {
            const T* p = av.data() + (o * channels + c) * inner;
            T s{0};
            for (std::size_t i = 0; i < inner; ++i) s += p[i];
            out[c] += s;
        }
    const T inv = T{1} / static_cast<T>(outer * inner);
    for (auto& v : out.vec()) v *= inv;
    return a.tape->record(std::move(out), {a},
                          [a, outer, channels, inner, inv](Tape<T>& t, const Tensor<T>& g) {
                              if (!t.requires_grad(a.id)) return;
                              Tensor<T>& ga = t.grad(a.id);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t c = 0; c < channels; ++c) {
                                      T* p = ga.data() + (o * channels + c) * inner;
                                      const T d = g[c] * inv;
                                      for (std::size_t i = 0; i < inner; ++i) p[i] += d;
                                  }
                          });
}

/// x[n, c, ...] * v[c]
template <typename T>
Var<T> mul_channel(Var<T> x, Var<T> v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), outer, channels, inner);
    if (v.shape() != Shape{channels})
        throw ShapeError("mul_channel: vector " + shape_str(v.shape()) + " vs channels " +
                         std::to_string(channels));
    const Tensor<T>& xv = x.value();
    const Tensor<T>& vv = v.value();
    Tensor<T> out(xv.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (o * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] * vv[c];
        }
    return x.tape->record(
        std::move(out), {x, v}, [x, v, outer, channels, inner](Tape<T>& t, const Tensor<T>& g) {
            const Tensor<T>& xv = t.value(x.id);
            const Tensor<T>& vv = t.value(v.id);
            const bool gx = t.requires_grad(x.id), gv = t.requires_grad(v.id);
            Tensor<T>* dx = gx ? &t.grad(x.id) : nullptr;
            Tensor<T>* dv = gv ? &t.grad(v.id) : nullptr;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (o * channels + c) * inner;
                    T acc{0};
                    for (std::size_t i = 0; i < inner; ++i) {
                        if (dx) (*dx)[base + i] += g[base + i] * vv[c];
                        acc += g[base + i] * xv[base + i];
                    }
                    if (dv) (*dv)[c] += acc;
                }
        });
}

/// x[n, c, ...] + v[c]
template <typename T>
Var<T> add_channel(Var<T> x, Var<T> v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), outer, channels, inner);
    if (v.shape() != Shape{channels})
        throw ShapeError("add_channel: vector " + shape_str(v.shape()) + " vs channels " +
                         std::to_string(channels));
    Tensor<T> out = x.value();
    const Tensor<T>& vv = v.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (o * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] += vv[c];
        }
    return x.tape->record(
        std::move(out), {x, v}, [x, v, outer, channels, inner](Tape<T>& t, const Tensor<T>& g) {
            detail::accumulate(t, x, g);
            if (!t.requires_grad(v.id)) return;
            Tensor<T>& dv = t.grad(v.id);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (o * channels + c) * inner;
                    T acc{0};
                    for (std::size_t i = 0; i < inner; ++i) acc += g[base + i];
                    dv[c] += acc;
                }
        });
}

template <typename T>
Var<T> sub_channel(Var<T> x, Var<T> v) {
    return add_channel(x, neg(v));
}

// ---------------------------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
    Tensor<T> out = a.value().reshaped(s);
    return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        detail::accumulate(t, a, g);
    });
}

/// Concatenates along axis 1.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] ||
        !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2))
        throw ShapeError("concat_channels: incompatible " + shape_str(sa) + " and " +
                         shape_str(sb));
    std::size_t outer, ca, inner, cb;
    detail::channel_dims(sa, outer, ca, inner);
    cb = sb[1];
    Shape so = sa;
    so[1] = ca + cb;
    Tensor<T> out(so);
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.data() + o * ca * inner, ca * inner, out.data() + o * (ca + cb) * inner);
        std::copy_n(bv.data() + o * cb * inner, cb * inner,
                    out.data() + (o * (ca + cb) + ca) * inner);
    }
    return a.tape->record(
        std::move(out), {a, b}, [a, b, outer, ca, cb, inner](Tape<T>& t, const Tensor<T>& g) {
            if (t.requires_grad(a.id)) {
                Tensor<T>& ga = t.grad(a.id);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < ca * inner; ++i)
                        ga[o * ca * inner + i] += g[o * (ca + cb) * inner + i];
            }
            if (t.requires_grad(b.id)) {
                Tensor<T>& gb = t.grad(b.id);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < cb * inner; ++i)
                        gb[o * cb * inner + i] += g[(o * (ca + cb) + ca) * inner + i];
            }
        });
}

/// Channels [begin, end) along axis 1.
template <typename T>
Var<T> slice_channels(Var<T> a, std::size_t begin, std::size_t end) {
    std::size_t outer, channels, inner;
    detail::channel_dims(a.shape(), outer, channels, inner);
    if (begin >= end || end > channels)
        throw ShapeError("slice_channels: bad range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") of " + std::to_string(channels));
    Shape so = a.shape();
    so[1] = end - begin;
    const std::size_t w = end - begin;
    Tensor<T> out(so);
    const Tensor<T>& av = a.value();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(av.data() + (o * channels + begin) * inner, w * inner,
                    out.data() + o * w * inner);
    return a.tape->record(
        std::move(out), {a}, [a, outer, channels, inner, begin, w](Tape<T>& t, const Tensor<T>& g) {
            if (!t.requires_grad(a.id)) return;
            Tensor<T>& ga = t.grad(a.id);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < w * inner; ++i)
                    ga[(o * channels + begin) * inner + i] += g[o * w * inner + i];
        });
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    const Shape inner_shape = parts[0].shape();
    Shape so{parts.size()};
    so.insert(so.end(), inner_shape.begin(), inner_shape.end());
    Tensor<T> out(so);
    const std::size_t m = shape_numel(inner_shape);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        require_same_shape(parts[k].shape(), inner_shape, "stack");
        std::copy_n(parts[k].value().data(), m, out.data() + k * m);
    }
    return parts[0].tape->record(std::move(out), std::span<const Var<T>>(parts),
                                 [parts, m](Tape<T>& t, const Tensor<T>& g) {
                                     for (std::size_t k = 0; k < parts.size(); ++k) {
                                         if (!t.requires_grad(parts[k].id)) continue;
                                         Tensor<T>& gk = t.grad(parts[k].id);
                                         for (std::size_t i = 0; i < m; ++i)
                                             gk[i] += g[k * m + i];
                                     }
                                 });
}

/// Zero-pads odd spatial extents to even, then keeps every second row and column.
template <typename T>
Var<T> subsample2(Var<T> x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("subsample2 needs (N, C, H, W), got " + shape_str(s));
    const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
    const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
    Tensor<T> out(Shape{N, C, OH, OW});
    const Tensor<T>& xv = x.value();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < OH; ++i)
            for (std::size_t j = 0; j < OW; ++j)
                out[(nc * OH + i) * OW + j] = xv[(nc * H + 2 * i) * W + 2 * j];
    return x.tape->record(std::move(out), {x}, [x, N, C, H, W, OH, OW](Tape<T>& t,
                                                                       const Tensor<T>& g) {
        if (!t.requires_grad(x.id)) return;
        Tensor<T>& gx = t.grad(x.id);
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t i = 0; i < OH; ++i)
                for (std::size_t j = 0; j < OW; ++j)
                    gx[(nc * H + 2 * i) * W + 2 * j] += g[(nc * OH + i) * OW + j];
    });
}

/// (N, C, H, W) -> (N, C), mean over spatial positions.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool needs (N, C, H, W), got " + shape_str(s));
    const std::size_t NC = s[0] * s[1], P = s[2] * s[3];
    Tensor<T> out(Shape{s[0], s[1]});
    const Tensor<T>& xv = x.value();
    const T inv = T{1} / static_cast<T>(P);
    for (std::size_t k = 0; k < NC; ++k) {
        T acc{0};
        for (std::size_t p = 0; p < P; ++p) acc += xv[k * P + p];
        out[k] = acc * inv;
    }
    return x.tape->record(std::move(out), {x}, [x, NC, P, inv](Tape<T>& t, const Tensor<T>& g) {
        if (!t.requires_grad(x.id)) return;
        Tensor<T>& gx = t.grad(x.id);
        for (std::size_t k = 0; k < NC; ++k)
            for (std::size_t p = 0; p < P; ++p) gx[k * P + p] += g[k] * inv;
    });
}

// ---------------------------------------------------------------------------------------------
// Dense and convolution

/// x (N, in) times w (out, in)^T -> (N, out)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
        throw ShapeError("linear: input " + shape_str(sx) + " incompatible with weight " +
                         shape_str(sw));
    const std::size_t N = sx[0], I = sx[1], O = sw[0];
    Tensor<T> out(Shape{N, O});
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            T acc{0};
            for (std::size_t i = 0; i < I; ++i) acc += xv[n * I + i] * wv[o * I + i];
            out[n * O + o] = acc;
        }
    return x.tape->record(std::move(out), {x, w}, [x, w, N, I, O](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& xv = t.value(x.id);
        const Tensor<T>& wv = t.value(w.id);
        if (t.requires_grad(x.id)) {
            Tensor<T>& gx = t.grad(x.id);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T d = g[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) gx[n * I + i] += d * wv[o * I + i];
                }
        }
        if (t.requires_grad(w.id)) {
            Tensor<T>& gw = t.grad(w.id);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T d = g[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) gw[o * I + i] += d * xv[n * I + i];
                }
        }
    });
}

struct Conv2dGeometry {
    std::size_t batch = 0, in_c = 0, height = 0, width = 0;
    std::size_t out_c = 0, kernel = 0, stride = 1, pad = 0;
    std::size_t out_h = 0, out_w = 0;

    std::size_t col_rows() const { return in_c * kernel * kernel; }
    std::size_t positions() const { return out_h * out_w; }
};

namespace detail {

template <typename T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.in_c; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki)
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw =
                            static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
                        const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                                            iw < static_cast<long>(g.width);
                        row[oh * g.out_w + ow] =
                            inside ? x[(c * g.height + ih) * g.width + iw] : T{0};
                    }
                }
            }
}

template <typename T>
void col2im(const T* col, const Conv2dGeometry& g, T* dx) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.in_c; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki)
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
                    if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw =
                            static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
                        if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
                        dx[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
                    }
                }
            }
}

inline bool is_pointwise(const Conv2dGeometry& g) {
    return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

inline Conv2dGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                    std::size_t pad) {
    if (x.size() != 4 || w.size() != 4)
        throw ShapeError("conv2d needs (N, C, H, W) input and (O, C, k, k) kernel, got " +
                         shape_str(x) + " and " + shape_str(w));
    if (x[1] != w[1])
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x[1]) +
                         " channels, kernel expects " + std::to_string(w[1]));
    if (w[2] != w[3]) throw ShapeError("conv2d kernel must be square, got " + shape_str(w));
    if (stride == 0) throw ShapeError("conv2d stride must be positive");
    Conv2dGeometry g;
    g.batch = x[0];
    g.in_c = x[1];
    g.height = x[2];
    g.width = x[3];
    g.out_c = w[0];
    g.kernel = w[2];
    g.stride = stride;
    g.pad = pad;
    const long eh = static_cast<long>(g.height + 2 * pad) - static_cast<long>(g.kernel);
    const long ew = static_cast<long>(g.width + 2 * pad) - static_cast<long>(g.kernel);
    if (eh < 0 || ew < 0)
        throw ShapeError("conv2d output spatial size < 1 for input " + shape_str(x) +
                         " kernel " + shape_str(w));
    g.out_h = static_cast<std::size_t>(eh) / stride + 1;
    g.out_w = static_cast<std::size_t>(ew) / stride + 1;
    return g;
}

/// Real 2D cross-correlation: x (N, C, H, W), w (O, C, k, k) -> (N, O, OH, OW).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride = 1, std::size_t pad = 0) {
    const Conv2dGeometry geo = conv_geometry(x.shape(), w.shape(), stride, pad);
    const std::size_t Q = geo.col_rows(), P = geo.positions(), O = geo.out_c;
    const std::size_t in_stride = geo.in_c * geo.height * geo.width;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    Tensor<T> out(Shape{geo.batch, O, geo.out_h, geo.out_w});
    std::vector<T> colbuf(detail::is_pointwise(geo) ? 0 : Q * P);
    for (std::size_t n = 0; n < geo.batch; ++n) {
        const T* col = xv.data() + n * in_stride;
        if (!colbuf.empty()) {
            detail::im2col(col, geo, colbuf.data());
            col = colbuf.data();
        }
        T* dst = out.data() + n * O * P;
        for (std::size_t o = 0; o < O; ++o) {
            T* orow = dst + o * P;
            for (std::size_t q = 0; q < Q; ++q) {
                const T a = wv[o * Q + q];
                const T* crow = col + q * P;
                for (std::size_t p = 0; p < P; ++p) orow[p] += a * crow[p];
            }
        }
    }
    return x.tape->record(std::move(out), {x, w}, [x, w, geo](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t Q = geo.col_rows(), P = geo.positions(), O = geo.out_c;
        const std::size_t in_stride = geo.in_c * geo.height * geo.width;
        const bool gx = t.requires_grad(x.id), gw = t.requires_grad(w.id);
        const Tensor<T>& xv = t.value(x.id);
        const Tensor<T>& wv = t.value(w.id);
        Tensor<T>* dx = gx ? &t.grad(x.id) : nullptr;
        Tensor<T>* dw = gw ? &t.grad(w.id) : nullptr;
        const bool pointwise = detail::is_pointwise(geo);
        std::vector<T> colbuf(pointwise ? 0 : Q * P);
        std::vector<T> dcol(Q * P);
        for (std::size_t n = 0; n < geo.batch; ++n) {
            const T* gn = g.data() + n * O * P;
            if (dw) {
                const T* col = xv.data() + n * in_stride;
                if (!pointwise) {
                    detail::im2col(col, geo, colbuf.data());
                    col = colbuf.data();
                }
                for (std::size_t o = 0; o < O; ++o) {
                    const T* grow = gn + o * P;
                    for (std::size_t q = 0; q < Q; ++q) {
                        const T* crow = col + q * P;
                        T acc{0};
                        for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
                        (*dw)[o * Q + q] += acc;
                    }
                }
            }
            if (dx) {
                T* target = pointwise ? dx->data() + n * in_stride : dcol.data();
                if (!pointwise) std::fill(dcol.begin(), dcol.end(), T{0});
                for (std::size_t o = 0; o < O; ++o) {
                    const T* grow = gn + o * P;
                    for (std::size_t q = 0; q < Q; ++q) {
                        const T a = wv[o * Q + q];
                        T* drow = target + q * P;
                        for (std::size_t p = 0; p < P; ++p) drow[p] += a * grow[p];
                    }
                }
                if (!pointwise) detail::col2im(dcol.data(), geo, dx->data() + n * in_stride);
            }
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Losses

/// Mean cross-entropy of softmax(scores) against integer labels, via log-sum-exp.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> scores, const std::vector<int>& labels) {
    const Shape& s = scores.shape();
    if (s.size() != 2 || s[0] != labels.size())
        throw ShapeError("cross_entropy: scores " + shape_str(s) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t N = s[0], K = s[1];
    const Tensor<T>& sv = scores.value();
    Tensor<T> prob(Shape{N, K});
    T loss{0};
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K)
            throw std::out_of_range("label " + std::to_string(labels[n]) + " outside [0, " +
                                    std::to_string(K) + ")");
        const T* row = sv.data() + n * K;
        const T mx = *std::max_element(row, row + K);
        T z{0};
        for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - lse);
        loss += lse - row[labels[n]];
    }
    loss /= static_cast<T>(N);
    return scores.tape->record(
        Tensor<T>::scalar(loss), {scores},
        [scores, prob = std::move(prob), labels, N, K](Tape<T>& t, const Tensor<T>& g) {
            if (!t.requires_grad(scores.id)) return;
            Tensor<T>& gs = t.grad(scores.id);
            const T f = g[0] / static_cast<T>(N);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < K; ++k) {
                    const T onehot = static_cast<int>(k) == labels[n] ? T{1} : T{0};
                    gs[n * K + k] += f * (prob[n * K + k] - onehot);
                }
        });
}

/// Mean binary cross-entropy of independent sigmoids.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets) {
    require_same_shape(logits.shape(), targets.shape(), "bce_with_logits");
    const Tensor<T>& x = logits.value();
    T loss{0};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        loss += std::max(v, T{0}) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
    }
    const T m = static_cast<T>(x.size());
    loss /= m;
    return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                               [logits, targets, m](Tape<T>& t, const Tensor<T>& g) {
                                   if (!t.requires_grad(logits.id)) return;
                                   const Tensor<T>& x = t.value(logits.id);
                                   Tensor<T>& gl = t.grad(logits.id);
                                   for (std::size_t i = 0; i < x.size(); ++i) {
                                       const T sig = T{1} / (T{1} + std::exp(-x[i]));
                                       gl[i] += g[0] * (sig - targets[i]) / m;
                                   }
                               });
}

/// Mean squared error over all elements.
template <typename T>
Var<T> mse(Var<T> pred, const Tensor<T>& target) {
    require_same_shape(pred.shape(), target.shape(), "mse");
    const Tensor<T>& p = pred.value();
    T loss{0};
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - target[i];
        loss += d * d;
    }
    const T m = static_cast<T>(p.size());
    loss /= m;
    return pred.tape->record(Tensor<T>::scalar(loss), {pred},
                             [pred, target, m](Tape<T>& t, const Tensor<T>& g) {
                                 if (!t.requires_grad(pred.id)) return;
                                 const Tensor<T>& p = t.value(pred.id);
                                 Tensor<T>& gp = t.grad(pred.id);
                                 for (std::size_t i = 0; i < p.size(); ++i)
                                     gp[i] += g[0] * T{2} * (p[i] - target[i]) / m;
                             });
}

// ---------------------------------------------------------------------------------------------
// Complex helpers over CVar: per-part ops and complex addition.

template <typename T>
CVar<T> operator+(CVar<T> a, CVar<T> b) {
    return {add(a.re, b.re), add(a.im, b.im)};
}
template <typename T>
CVar<T> operator-(CVar<T> a, CVar<T> b) {
    return {sub(a.re, b.re), sub(a.im, b.im)};
}
/// Part-wise (Hadamard per plane) product, not complex multiplication.
template <typename T>
CVar<T> mul_parts(CVar<T> a, CVar<T> b) {
    return {mul(a.re, b.re), mul(a.im, b.im)};
}
template <typename T>
CVar<T> sigmoid(CVar<T> a) {
    return {sigmoid(a.re), sigmoid(a.im)};
}
template <typename T>
CVar<T> tanh(CVar<T> a) {
    return {tanh(a.re), tanh(a.im)};
}
/// Complex elementwise product on the tape.
template <typename T>
CVar<T> cmul(CVar<T> a, CVar<T> b) {
    return {sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.im, b.re), mul(a.re, b.im))};
}
template <typename T>
CVar<T> concat_channels(CVar<T> a, CVar<T> b) {
    return {concat_channels(a.re, b.re), concat_channels(a.im, b.im)};
}
template <typename T>
CVar<T> subsample2(CVar<T> a) {
    return {subsample2(a.re), subsample2(a.im)};
}
template <typename T>
Var<T> sum_parts(CVar<T> a) {
    return add(sum(a.re), sum(a.im));
}
/// Real (N, 2C, ...) as complex (N, C, ...): first half real, second half imaginary.
template <typename T>
CVar<T> split_channels(Var<T> x) {
    const std::size_t c = x.shape().at(1);
    if (c % 2 != 0)
        throw ShapeError("channel split needs an even channel count, got " + std::to_string(c));
    return {slice_channels(x, 0, c / 2), slice_channels(x, c / 2, c)};
}
template <typename T>
Var<T> merge_channels(CVar<T> z) {
    return concat_channels(z.re, z.im);
}

// ---------------------------------------------------------------------------------------------
// Gradient utilities

/// Global L2 norm over every real scalar of every gradient (both planes of complex ones).
template <typename T>
T gradient_norm(std::span<Parameter<T>* const> params) {
    long double acc = 0;
    for (const auto* p : params) {
        for (T v : p->grad_re.vec()) acc += static_cast<long double>(v) * v;
        if (p->is_complex)
            for (T v : p->grad_im.vec()) acc += static_cast<long double>(v) * v;
    }
    return static_cast<T>(std::sqrt(acc));
}

/// Rescales all gradients so their global norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
T clip_gradient_norm(std::span<Parameter<T>* const> params, T max_norm) {
    if (!(max_norm > T{0})) throw std::invalid_argument("clip_gradient_norm: max_norm must be > 0");
    const T norm = gradient_norm(params);
    if (!std::isfinite(norm)) throw NanGuardError("gradient clipping", "non-finite gradient norm");
    if (norm > max_norm) {
        const T f = max_norm / norm;
        for (auto* p : params) {
            for (auto& v : p->grad_re.vec()) v *= f;
            if (p->is_complex)
                for (auto& v : p->grad_im.vec()) v *= f;
        }
    }
    return norm;
}

/// Central-difference estimate of dL/d(component) for every real and imaginary scalar.
/// Returned in parameter order as (d/d re, d/d im) planes; real parameters get a zero im plane.
template <typename T>
std::vector<ComplexTensor<T>> finite_difference_grad(const std::function<T()>& f,
                                                     std::span<Parameter<T>* const> params,
                                                     T step) {
    if (!(step > T{0})) throw std::invalid_argument("finite_difference_grad: step must be > 0");
    std::vector<ComplexTensor<T>> out;
    for (auto* p : params) {
        ComplexTensor<T> est(p->shape());
        for (int plane = 0; plane < (p->is_complex ? 2 : 1); ++plane) {
            Tensor<T>& v = plane == 0 ? p->re : p->im;
            Tensor<T>& dst = plane == 0 ? est.re : est.im;
            for (std::size_t i = 0; i < v.size(); ++i) {
                const T orig = v[i];
                v[i] = orig + step;
                const T fp = f();
                v[i] = orig - step;
                const T fm = f();
                v[i] = orig;
                if (!std::isfinite(fp) || !std::isfinite(fm))
                    throw NanGuardError(p->name + (plane == 0 ? ".re[" : ".im[") +
                                            std::to_string(i) + "]",
                                        "non-finite loss under perturbation");
                dst[i] = (fp - fm) / (T{2} * step);
            }
        }
        out.push_back(std::move(est));
    }
    return out;
}

}  // namespace cvnn
