#pragma once

// Dataset ingestion: CIFAR-10 binary records and two synthetic generators (oriented gratings
// for classification, rotating phasor maps for next-frame prediction).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/random.hpp"
#include "cvnn/train.hpp"

namespace cvnn {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kCifarRecord = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// Raw CIFAR-10 binary file: images (N, 3, 32, 32) scaled to [0, 1], labels in [0, 9].
template <typename T>
Dataset<T> load_cifar_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open CIFAR file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kCifarRecord != 0)
        throw DataError("CIFAR file " + path.string() + " has " + std::to_string(bytes.size()) +
                        " bytes; expected a positive multiple of " + std::to_string(kCifarRecord) +
                        " (next valid size " +
                        std::to_string((bytes.size() / kCifarRecord + 1) * kCifarRecord) + ")");
    const std::size_t n = bytes.size() / kCifarRecord;
    Dataset<T> d;
    d.x = Tensor<T>(Shape{n, 3, kCifarSide, kCifarSide});
    d.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const unsigned char* rec = bytes.data() + r * kCifarRecord;
        if (rec[0] > 9)
            throw DataError("CIFAR record " + std::to_string(r) + " has label " +
                            std::to_string(rec[0]) + " > 9");
        d.labels[r] = rec[0];
        for (std::size_t k = 0; k < kCifarRecord - 1; ++k)
            d.x[r * (kCifarRecord - 1) + k] = T(rec[1 + k]) / T(255);
    }
    return d;
}

/// Per-channel mean and standard deviation of (N, C, ...) images.
struct Normalization {
    std::vector<double> mean, std;
    bool empty() const { return mean.empty(); }
};

template <typename T>
Normalization channel_statistics(const Tensor<T>& x) {
    std::size_t outer, C, inner;
    detail::split_dims(x.shape(), 1, outer, C, inner);
    Normalization s;
    s.mean.assign(C, 0.0);
    s.std.assign(C, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) s.mean[c] += x[(o * C + c) * inner + i];
    const double cnt = double(outer * inner);
    for (auto& m : s.mean) m /= cnt;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const double d = x[(o * C + c) * inner + i] - s.mean[c];
                s.std[c] += d * d;
            }
    for (auto& v : s.std) v = std::sqrt(v / cnt);
    for (auto& v : s.std)
        if (!(v > 0.0)) v = 1.0;
    return s;
}

template <typename T>
void apply_normalization(Tensor<T>& x, const Normalization& s) {
    std::size_t outer, C, inner;
    detail::split_dims(x.shape(), 1, outer, C, inner);
    if (s.mean.size() != C || s.std.size() != C)
        throw DataError("normalization has " + std::to_string(s.mean.size()) + " channels, data " +
                        std::to_string(C));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                T& v = x[(o * C + c) * inner + i];
                v = T((double(v) - s.mean[c]) / s.std[c]);
            }
}

struct GratingParams {
    std::size_t size = 16;
    std::size_t channels = 1;
    double frequency = 3.0;  // cycles across the image
    double noise = 0.5;
    double jitter = 0.2;     // orientation jitter in radians
};

/// Two classes: gratings near 0 rad (class 0) and near pi/2 (class 1), random phase, additive
/// Gaussian noise.
template <typename T>
Dataset<T> synthetic_image_task(std::size_t n, std::uint64_t seed, const GratingParams& p = {}) {
    if (n == 0) throw std::invalid_argument("synthetic_image_task: n must be >= 1");
    Rng rng(seed);
    Dataset<T> d;
    const std::size_t S = p.size;
    d.x = Tensor<T>(Shape{n, p.channels, S, S});
    d.labels.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const int label = static_cast<int>(rng.index(2));
        d.labels[k] = label;
        const double theta = (label ? M_PI / 2 : 0.0) + rng.uniform(-p.jitter, p.jitter);
        const double phi = rng.uniform(-M_PI, M_PI);
        const double w = 2 * M_PI * p.frequency / double(S);
        for (std::size_t c = 0; c < p.channels; ++c)
            for (std::size_t i = 0; i < S; ++i)
                for (std::size_t j = 0; j < S; ++j) {
                    const double u = double(j) * std::cos(theta) + double(i) * std::sin(theta);
                    const double v = std::sin(w * u + phi) + p.noise * rng.normal();
                    d.x[((k * p.channels + c) * S + i) * S + j] = T(v);
                }
    }
    return d;
}

struct PhasorParams {
    std::size_t size = 8;
    double omega = 0.5;  // phase advance per frame
    double noise = 0.02;
};

/// Sequences (n, T, 2, H, W) of z_t(x, y) = a(x, y) e^{i(omega t + phi(x, y))} plus noise, with a
/// linear phase ramp phi and a smooth positive amplitude a. Channel 0 holds Re, channel 1 Im.
template <typename T>
Dataset<T> synthetic_phasor_sequences(std::size_t n, std::size_t steps, std::uint64_t seed,
                                      const PhasorParams& p = {}) {
    if (n == 0) throw std::invalid_argument("synthetic_phasor_sequences: n must be >= 1");
    if (steps < 2) throw std::invalid_argument("synthetic_phasor_sequences: need >= 2 frames");
    Rng rng(seed);
    Dataset<T> d;
    const std::size_t S = p.size;
    d.x = Tensor<T>(Shape{n, steps, 2, S, S});
    for (std::size_t k = 0; k < n; ++k) {
        const double kx = rng.uniform(-1, 1), ky = rng.uniform(-1, 1), phi0 = rng.uniform(-M_PI, M_PI);
        const double a0 = rng.uniform(0.5, 1.5), ax = rng.uniform(-0.3, 0.3) / double(S);
        for (std::size_t t = 0; t < steps; ++t)
            for (std::size_t i = 0; i < S; ++i)
                for (std::size_t j = 0; j < S; ++j) {
                    const double ang = p.omega * double(t) + kx * double(j) + ky * double(i) + phi0;
                    const double amp = a0 + ax * (double(i) + double(j));
                    const std::size_t base = ((k * steps + t) * 2) * S * S + i * S + j;
                    d.x[base] = T(amp * std::cos(ang) + p.noise * rng.normal());
                    d.x[base + S * S] = T(amp * std::sin(ang) + p.noise * rng.normal());
                }
    }
    return d;
}

}  // namespace cvnn
