#pragma once

// Dense real tensors and the split (real plane / imaginary plane) complex tensor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvnn {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Row-major dense tensor of real scalars.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Complex tensor stored as two real planes of identical shape.
template <typename T>
struct ComplexTensor {
    Tensor<T> re;
    Tensor<T> im;

    ComplexTensor() = default;
    explicit ComplexTensor(const Shape& shape) : re(shape), im(shape) {}
    ComplexTensor(Tensor<T> r, Tensor<T> i) : re(std::move(r)), im(std::move(i)) {
        if (re.shape() != im.shape())
            throw ShapeError("real plane " + shape_str(re.shape()) + " and imaginary plane " +
                             shape_str(im.shape()) + " differ");
    }

    const Shape& shape() const noexcept { return re.shape(); }
    std::size_t size() const noexcept { return re.size(); }

    friend bool operator==(const ComplexTensor& a, const ComplexTensor& b) {
        return a.re == b.re && a.im == b.im;
    }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

template <typename T>
ComplexTensor<T> complex_elementwise_mul(const ComplexTensor<T>& a, const ComplexTensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "complex_elementwise_mul");
    ComplexTensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.re[i] = a.re[i] * b.re[i] - a.im[i] * b.im[i];
        out.im[i] = a.im[i] * b.re[i] + a.re[i] * b.im[i];
    }
    return out;
}

template <typename T>
ComplexTensor<T> conj(const ComplexTensor<T>& a) {
    ComplexTensor<T> out = a;
    for (auto& v : out.im.vec()) v = -v;
    return out;
}

template <typename T>
Tensor<T> modulus(const ComplexTensor<T>& t) {
    Tensor<T> out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = std::hypot(t.re[i], t.im[i]);
    return out;
}

/// Phase in (-pi, pi]; phase(0) is 0.
template <typename T>
Tensor<T> phase(const ComplexTensor<T>& t) {
    Tensor<T> out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        // atan2(+0, -1) is pi, atan2(-0, -1) is -pi; fold the latter into the half-open range.
        T v = std::atan2(t.im[i], t.re[i]);
        if (v <= -T(M_PI)) v = T(M_PI);
        out[i] = v;
    }
    return out;
}

namespace detail {
inline void split_dims(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& channels,
                       std::size_t& inner) {
    if (axis >= s.size())
        throw ShapeError("channel axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    channels = s[axis];
}
}  // namespace detail

/// Relabels the first half of the channels as real parts and the second half as imaginary parts.
template <typename T>
ComplexTensor<T> from_channel_split(const Tensor<T>& t, std::size_t channel_axis = 1) {
    std::size_t outer, channels, inner;
    detail::split_dims(t.shape(), channel_axis, outer, channels, inner);
    if (channels % 2 != 0)
        throw ShapeError("channel split needs an even channel count, got " +
                         std::to_string(channels));
    Shape half = t.shape();
    half[channel_axis] = channels / 2;
    ComplexTensor<T> out(half);
    const std::size_t hc = channels / 2;
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = t.data() + o * channels * inner;
        std::copy(src, src + hc * inner, out.re.data() + o * hc * inner);
        std::copy(src + hc * inner, src + channels * inner, out.im.data() + o * hc * inner);
    }
    return out;
}

template <typename T>
Tensor<T> to_channel_split(const ComplexTensor<T>& z, std::size_t channel_axis = 1) {
    std::size_t outer, hc, inner;
    detail::split_dims(z.shape(), channel_axis, outer, hc, inner);
    Shape full = z.shape();
    full[channel_axis] = 2 * hc;
    Tensor<T> out(full);
    for (std::size_t o = 0; o < outer; ++o) {
        T* dst = out.data() + o * 2 * hc * inner;
        std::copy(z.re.data() + o * hc * inner, z.re.data() + (o + 1) * hc * inner, dst);
        std::copy(z.im.data() + o * hc * inner, z.im.data() + (o + 1) * hc * inner,
                  dst + hc * inner);
    }
    return out;
}

/// Non-owning view of a real tensor whose channel axis is read as [real half | imaginary half].
/// Writes through the view land in the underlying tensor.
template <typename T>
class ChannelSplitView {
public:
    ChannelSplitView(Tensor<T>& underlying, std::size_t channel_axis = 1) : t_(&underlying) {
        detail::split_dims(underlying.shape(), channel_axis, outer_, channels_, inner_);
        if (channels_ % 2 != 0)
            throw ShapeError("channel split needs an even channel count, got " +
                             std::to_string(channels_));
    }

    std::size_t outer() const noexcept { return outer_; }
    std::size_t half_channels() const noexcept { return channels_ / 2; }
    std::size_t inner() const noexcept { return inner_; }

    T& re(std::size_t o, std::size_t c, std::size_t i) {
        return (*t_)[(o * channels_ + c) * inner_ + i];
    }
    T& im(std::size_t o, std::size_t c, std::size_t i) {
        return (*t_)[(o * channels_ + channels_ / 2 + c) * inner_ + i];
    }

private:
    Tensor<T>* t_;
    std::size_t outer_ = 0, channels_ = 0, inner_ = 0;
};

}  // namespace cvnn
