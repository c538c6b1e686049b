#pragma once

// Convolutional LSTM cells. The complex cell swaps every convolution for its complex
// counterpart; gate products stay part-wise and sigmoid/tanh act on Re and Im separately.
//
//   i = sig(Wxi*x + Whi*h + bi)     f = sig(Wxf*x + Whf*h + bf)
//   c = f o c + i o tanh(Wxc*x + Whc*h + bc)
//   o = sig(Wxo*x + Who*h + bo)     h = o o tanh(c)

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "cvnn/network.hpp"
#include "cvnn/resnet.hpp"

namespace cvnn {

namespace detail {
template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
    return mul(a, b);
}
template <typename T>
CVar<T> hadamard(CVar<T> a, CVar<T> b) {
    return mul_parts(a, b);
}
template <typename T>
Var<T> zeros_like_state(Tape<T>& tape, const Shape& s, Var<T>*) {
    return tape.constant(Tensor<T>(s));
}
template <typename T>
CVar<T> zeros_like_state(Tape<T>& tape, const Shape& s, CVar<T>*) {
    return tape.constant(ComplexTensor<T>(s));
}
}  // namespace detail

template <typename T, bool Complex>
class ConvLstmCell {
    using P = PathTypes<T, Complex>;

public:
    using Value = typename P::Value;
    struct State {
        Value h, c;
    };

    enum Gate { input = 0, forget = 1, cell = 2, output = 3 };

    ConvLstmCell(const std::string& name, std::size_t in_c, std::size_t maps, std::size_t kernel,
                 const InitPolicy& init, T forget_bias = T{1})
        : maps_(maps) {
        if (kernel % 2 == 0) throw SpecError(name + ": kernel size must be odd for same padding");
        static const char* gate_names[4] = {"i", "f", "c", "o"};
        for (int g = 0; g < 4; ++g) {
            const std::string n = name + "." + gate_names[g];
            wx_.emplace_back(n + ".wx", in_c, maps, kernel, 1, kernel / 2, false, init);
            wh_.emplace_back(n + ".wh", maps, maps, kernel, 1, kernel / 2, false, init);
            const T fill = g == forget ? forget_bias : T{0};
            if constexpr (Complex)
                bias_.emplace_back(n + ".b", ComplexTensor<T>(Tensor<T>(Shape{maps}, fill),
                                                              Tensor<T>(Shape{maps}, fill)));
            else
                bias_.emplace_back(n + ".b", Tensor<T>(Shape{maps}, fill));
        }
    }

    State zero_state(Tape<T>& tape, const Shape& x_shape) const {
        const Shape s{x_shape.at(0), maps_, x_shape.at(2), x_shape.at(3)};
        return {detail::zeros_like_state(tape, s, static_cast<Value*>(nullptr)),
                detail::zeros_like_state(tape, s, static_cast<Value*>(nullptr))};
    }

    /// One time step; returns the new state (its h is the output).
    State step(Tape<T>& tape, Value x, const State& prev) {
        if (x.shape().size() != 4 || x.shape()[1] != in_channels())
            throw ShapeError("convlstm step: input " + shape_str(x.shape()) + " vs " +
                             std::to_string(in_channels()) + " input channels");
        if (prev.h.shape()[0] != x.shape()[0] || prev.h.shape()[2] != x.shape()[2] ||
            prev.h.shape()[3] != x.shape()[3])
            throw ShapeError("convlstm step: state " + shape_str(prev.h.shape()) +
                             " does not match input " + shape_str(x.shape()));
        std::array<Value, 4> pre;
        for (int g = 0; g < 4; ++g) {
            Value a = wx_[g].forward(tape, x) + wh_[g].forward(tape, prev.h);
            pre[g] = add_bias(tape, a, bias_[g]);
        }
        Value i = sigmoid(pre[input]);
        Value f = sigmoid(pre[forget]);
        Value o = sigmoid(pre[output]);
        Value c = detail::hadamard(f, prev.c) + detail::hadamard(i, tanh(pre[cell]));
        Value h = detail::hadamard(o, tanh(c));
        return {h, c};
    }

    /// Hidden outputs for every step starting from `init` (zero state when empty).
    std::pair<std::vector<Value>, State> unroll(Tape<T>& tape, const std::vector<Value>& seq,
                                                std::optional<State> init = std::nullopt) {
        if (seq.empty()) throw std::invalid_argument("convlstm unroll: empty sequence");
        State s = init ? *init : zero_state(tape, seq.front().shape());
        std::vector<Value> hs;
        hs.reserve(seq.size());
        for (const auto& x : seq) {
            s = step(tape, x, s);
            hs.push_back(s.h);
        }
        return {std::move(hs), s};
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (int g = 0; g < 4; ++g) {
            wx_[g].collect(out);
            wh_[g].collect(out);
            out.push_back(&bias_[g]);
        }
    }

    /// Real multiplies of one step for input (N, in_c, H, W).
    std::uint64_t step_multiplies(const Shape& x_shape) const {
        const Shape hs{x_shape.at(0), maps_, x_shape.at(2), x_shape.at(3)};
        std::uint64_t n = 0;
        for (int g = 0; g < 4; ++g) n += wx_[g].real_multiplies(x_shape) + wh_[g].real_multiplies(hs);
        return n;
    }

    std::size_t maps() const { return maps_; }
    std::size_t in_channels() const { return wx_[0].weight().shape()[1]; }
    typename P::Conv& wx(Gate g) { return wx_[g]; }
    typename P::Conv& wh(Gate g) { return wh_[g]; }
    Parameter<T>& bias(Gate g) { return bias_[g]; }

private:
    static Value add_bias(Tape<T>& tape, Value a, Parameter<T>& b) {
        if constexpr (Complex) {
            CVar<T> bv = tape.cparam(b);
            return {add_channel(a.re, bv.re), add_channel(a.im, bv.im)};
        } else {
            return add_channel(a, tape.param(b));
        }
    }

    std::size_t maps_;
    std::vector<typename P::Conv> wx_, wh_;
    std::vector<Parameter<T>> bias_;
};

/// Next-frame predictor over channel-split sequences (N, T, 2, H, W): frame t+1 is predicted
/// as frame t plus a 1x1 readout of h_t. Output (T-1, N, 2, H, W).
template <typename T, bool Complex>
class ConvLstmPredictor : public Network<T> {
public:
    ConvLstmPredictor(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec.validate();
        if (!spec.is_convlstm()) throw SpecError("ConvLstmPredictor needs variant convlstm");
        if (spec.complex != Complex) throw SpecError("model spec complex flag mismatch");
        InitPolicy init;
        init.complex_flavor = Complex ? parse_flavor(spec.init) : InitFlavor::unitary;
        init.criterion = parse_criterion(spec.criterion);
        init.root_seed = seed;
        const std::size_t in_c = Complex ? 1 : 2;
        cell_.emplace("lstm", in_c, spec.feature_maps, spec.kernel_size, init, T(spec.forget_bias));
        readout_.emplace("readout", spec.feature_maps, in_c, 1, 1, 0, true, init);
    }

    TaskKind task() const override { return TaskKind::regression; }

    Var<T> forward(Tape<T>& tape, const Tensor<T>& x, bool) override {
        const Shape& s = x.shape();
        if (s.size() != 5 || s[2] != 2 || s[1] < 2)
            throw ShapeError("sequence input must be (N, T >= 2, 2, H, W), got " + shape_str(s));
        const std::size_t N = s[0], Tn = s[1], H = s[3], W = s[4];
        std::vector<typename ConvLstmCell<T, Complex>::Value> frames;
        for (std::size_t t = 0; t + 1 < Tn; ++t) {
            Tensor<T> f(Shape{N, 2, H, W});
            for (std::size_t n = 0; n < N; ++n)
                std::copy_n(x.data() + (n * Tn + t) * 2 * H * W, 2 * H * W,
                            f.data() + n * 2 * H * W);
            Var<T> fr = tape.constant(std::move(f));
            if constexpr (Complex)
                frames.push_back(split_channels(fr));
            else
                frames.push_back(fr);
        }
        auto [hs, last] = cell_->unroll(tape, frames);
        std::vector<Var<T>> preds;
        for (std::size_t t = 0; t < hs.size(); ++t) {
            auto p = frames[t] + readout_->forward(tape, hs[t]);
            if constexpr (Complex)
                preds.push_back(merge_channels(p));
            else
                preds.push_back(p);
        }
        return stack(preds);
    }

    Var<T> loss(Tape<T>&, Var<T> out, const Batch<T>& b) override {
        return mse(out, next_frames(b.x));
    }

    /// Frames 1..T-1 of (N, T, 2, H, W) arranged as (T-1, N, 2, H, W).
    static Tensor<T> next_frames(const Tensor<T>& x) {
        const Shape& s = x.shape();
        const std::size_t N = s[0], Tn = s[1], F = 2 * s[3] * s[4];
        Tensor<T> out(Shape{Tn - 1, N, 2, s[3], s[4]});
        for (std::size_t t = 1; t < Tn; ++t)
            for (std::size_t n = 0; n < N; ++n)
                std::copy_n(x.data() + (n * Tn + t) * F, F, out.data() + ((t - 1) * N + n) * F);
        return out;
    }

    std::vector<LayerCost> flops(const Shape& example) const override {
        Shape s = example;
        if (s.size() == 4) s.insert(s.begin(), 1);
        const std::size_t steps = s.at(1) - 1;
        const Shape xs{s[0], Complex ? 1u : 2u, s[3], s[4]};
        const Shape hs{s[0], spec_.feature_maps, s[3], s[4]};
        return {{"lstm", steps * cell_->step_multiplies(xs)},
                {"readout", steps * readout_->real_multiplies(hs)}};
    }

    void collect_parameters(std::vector<Parameter<T>*>& out) override {
        cell_->collect(out);
        readout_->collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>&) override {}

    ConvLstmCell<T, Complex>& cell() { return *cell_; }

private:
    ModelSpec spec_;
    std::optional<ConvLstmCell<T, Complex>> cell_;
    std::optional<typename PathTypes<T, Complex>::Conv> readout_;
};

/// MSE of predicting every next frame by the current one.
template <typename T>
double last_frame_baseline_mse(const Tensor<T>& x) {
    const Shape& s = x.shape();
    const std::size_t N = s[0], Tn = s[1], F = 2 * s[3] * s[4];
    double acc = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 1; t < Tn; ++t)
            for (std::size_t k = 0; k < F; ++k) {
                const double d = x[(n * Tn + t) * F + k] - x[(n * Tn + t - 1) * F + k];
                acc += d * d;
            }
    return acc / double(N * (Tn - 1) * F);
}

}  // namespace cvnn
