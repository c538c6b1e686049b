#pragma once

// Complex convolution and dense transforms built from real cross-correlations:
//   W * h = (A * x - B * y) + i (B * x + A * y),  W = A + iB,  h = x + iy.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvnn/autograd.hpp"
#include "cvnn/init.hpp"

namespace cvnn {

/// Per-layer real-multiply count used by FLOP accounting.
struct LayerCost {
    std::string name;
    std::uint64_t multiplies = 0;
};

template <typename T>
CVar<T> complex_conv2d(CVar<T> h, CVar<T> w, std::size_t stride = 1, std::size_t pad = 0) {
    Var<T> ax = conv2d(h.re, w.re, stride, pad);
    Var<T> by = conv2d(h.im, w.im, stride, pad);
    Var<T> bx = conv2d(h.re, w.im, stride, pad);
    Var<T> ay = conv2d(h.im, w.re, stride, pad);
    return {sub(ax, by), add(bx, ay)};
}

/// v (N, in) complex times W (out, in) complex, transposed: (N, out).
template <typename T>
CVar<T> complex_linear(CVar<T> v, CVar<T> w) {
    return {sub(linear(v.re, w.re), linear(v.im, w.im)),
            add(linear(v.re, w.im), linear(v.im, w.re))};
}

/// Real-multiply count of a real conv producing out_h*out_w positions.
inline std::uint64_t conv_multiplies(const Conv2dGeometry& g) {
    return static_cast<std::uint64_t>(g.out_c) * g.in_c * g.kernel * g.kernel * g.out_h *
           g.out_w;
}

template <typename T>
class Conv2d {
public:
    Conv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t kernel,
           std::size_t stride, std::size_t pad, bool bias, const InitPolicy& init)
        : name_(std::move(name)),
          stride_(stride),
          pad_(pad),
          weight_(name_ + ".weight",
                  init.real_kernel<T>(Shape{out_c, in_c, kernel, kernel}, name_ + ".weight")) {
        if (bias) bias_.emplace(name_ + ".bias", Tensor<T>(Shape{out_c}));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        Var<T> y = conv2d(x, tape.param(weight_), stride_, pad_);
        if (bias_) y = add_channel(y, tape.param(*bias_));
        return y;
    }

    Conv2dGeometry geometry(const Shape& input) const {
        return conv_geometry(input, weight_.shape(), stride_, pad_);
    }
    std::uint64_t real_multiplies(const Shape& input) const {
        return conv_multiplies(geometry(input));
    }
    Shape output_shape(const Shape& input) const {
        auto g = geometry(input);
        return {g.batch, g.out_c, g.out_h, g.out_w};
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        if (bias_) out.push_back(&*bias_);
    }
    Parameter<T>& weight() { return weight_; }
    const Parameter<T>& weight() const { return weight_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::size_t stride_, pad_;
    Parameter<T> weight_;
    std::optional<Parameter<T>> bias_;
};

/// Complex convolution layer: complex kernel W = A + iB of shape (out, in, k, k).
template <typename T>
class ComplexConv2d {
public:
    ComplexConv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t kernel,
                  std::size_t stride, std::size_t pad, bool bias, const InitPolicy& init)
        : name_(std::move(name)),
          stride_(stride),
          pad_(pad),
          weight_(name_ + ".weight",
                  init.complex_kernel<T>(Shape{out_c, in_c, kernel, kernel}, name_ + ".weight")) {
        if (bias) bias_.emplace(name_ + ".bias", ComplexTensor<T>(Shape{out_c}));
    }

    /// From explicit A (real part) and B (imaginary part) kernels.
    ComplexConv2d(std::string name, Tensor<T> a, Tensor<T> b, std::size_t stride, std::size_t pad,
                  std::optional<ComplexTensor<T>> bias = std::nullopt)
        : name_(std::move(name)),
          stride_(stride),
          pad_(pad),
          weight_(name_ + ".weight", ComplexTensor<T>(std::move(a), std::move(b))) {
        if (weight_.shape().size() != 4)
            throw ShapeError("complex conv kernel must be (out, in, k, k), got " +
                             shape_str(weight_.shape()));
        if (bias) bias_.emplace(name_ + ".bias", std::move(*bias));
    }

    CVar<T> forward(Tape<T>& tape, CVar<T> h) {
        CVar<T> y = complex_conv2d(h, tape.cparam(weight_), stride_, pad_);
        if (bias_) {
            CVar<T> b = tape.cparam(*bias_);
            y = {add_channel(y.re, b.re), add_channel(y.im, b.im)};
        }
        return y;
    }

    Conv2dGeometry geometry(const Shape& input) const {
        return conv_geometry(input, weight_.shape(), stride_, pad_);
    }
    /// Four real convolutions of the complex-filter geometry.
    std::uint64_t real_multiplies(const Shape& input) const {
        return 4 * conv_multiplies(geometry(input));
    }
    Shape output_shape(const Shape& input) const {
        auto g = geometry(input);
        return {g.batch, g.out_c, g.out_h, g.out_w};
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        if (bias_) out.push_back(&*bias_);
    }
    Parameter<T>& weight() { return weight_; }
    const Parameter<T>& weight() const { return weight_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::size_t stride_, pad_;
    Parameter<T> weight_;
    std::optional<Parameter<T>> bias_;
};

template <typename T>
class Dense {
public:
    Dense(std::string name, std::size_t in, std::size_t out, const InitPolicy& init,
          Criterion criterion = Criterion::glorot)
        : name_(std::move(name)),
          weight_(name_ + ".weight", make_weight(in, out, init, criterion)),
          bias_(name_ + ".bias", Tensor<T>(Shape{out})) {}

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        return add_channel(linear(x, tape.param(weight_)), tape.param(bias_));
    }
    std::uint64_t real_multiplies() const { return weight_.re.size(); }
    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }
    Parameter<T>& bias() { return bias_; }
    Parameter<T>& weight() { return weight_; }

private:
    Tensor<T> make_weight(std::size_t in, std::size_t out, const InitPolicy& init, Criterion c) {
        InitPolicy p = init;
        p.criterion = c;
        return p.real_kernel<T>(Shape{out, in}, name_ + ".weight");
    }

    std::string name_;
    Parameter<T> weight_;
    Parameter<T> bias_;
};

/// Complex fully connected layer, W (out, in) = A + iB, complex bias.
template <typename T>
class ComplexDense {
public:
    ComplexDense(std::string name, std::size_t in, std::size_t out, const InitPolicy& init)
        : name_(std::move(name)),
          weight_(name_ + ".weight", init.complex_kernel<T>(Shape{out, in}, name_ + ".weight")),
          bias_(name_ + ".bias", ComplexTensor<T>(Shape{out})) {}
    ComplexDense(std::string name, Tensor<T> a, Tensor<T> b)
        : name_(std::move(name)),
          weight_(name_ + ".weight", ComplexTensor<T>(std::move(a), std::move(b))),
          bias_(name_ + ".bias", ComplexTensor<T>(Shape{weight_.shape().at(0)})) {
        if (weight_.shape().size() != 2)
            throw ShapeError("complex dense weight must be (out, in), got " +
                             shape_str(weight_.shape()));
    }

    /// v is (N, in) or (in).
    CVar<T> forward(Tape<T>& tape, CVar<T> v) {
        const bool vec = v.shape().size() == 1;
        const std::size_t in = weight_.shape()[1];
        if (v.shape().back() != in)
            throw ShapeError("complex dense: input " + shape_str(v.shape()) +
                             " does not match weight " + shape_str(weight_.shape()));
        if (vec) v = {reshape(v.re, Shape{1, in}), reshape(v.im, Shape{1, in})};
        CVar<T> y = complex_linear(v, tape.cparam(weight_));
        CVar<T> b = tape.cparam(bias_);
        y = {add_channel(y.re, b.re), add_channel(y.im, b.im)};
        if (vec) {
            const Shape s{weight_.shape()[0]};
            y = {reshape(y.re, s), reshape(y.im, s)};
        }
        return y;
    }
    std::uint64_t real_multiplies() const { return 4 * weight_.re.size(); }
    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    std::string name_;
    Parameter<T> weight_;
    Parameter<T> bias_;
};

/// Spatial mean per channel of each plane: (N, C, H, W) -> (N, C).
template <typename T>
CVar<T> global_avg_pool(CVar<T> z) {
    return {global_avg_pool(z.re), global_avg_pool(z.im)};
}

/// Complex features (N, C) to real features (N, 2C) as [re ; im].
template <typename T>
Var<T> head_bridge(CVar<T> v) {
    return concat_channels(v.re, v.im);
}

// Eager (tape-free) entry points.

template <typename T>
ComplexTensor<T> complex_conv2d(const ComplexTensor<T>& h, ComplexConv2d<T>& layer) {
    Tape<T> tape;
    return layer.forward(tape, tape.constant(h)).value();
}

template <typename T>
ComplexTensor<T> complex_dense(const ComplexTensor<T>& v, ComplexDense<T>& layer) {
    Tape<T> tape;
    return layer.forward(tape, tape.constant(v)).value();
}

template <typename T>
ComplexTensor<T> global_avg_pool(const ComplexTensor<T>& t) {
    Tape<T> tape;
    return global_avg_pool(tape.constant(t)).value();
}

template <typename T>
Tensor<T> head_bridge(const ComplexTensor<T>& v) {
    Tape<T> tape;
    return head_bridge(tape.constant(v)).value();
}

}  // namespace cvnn
