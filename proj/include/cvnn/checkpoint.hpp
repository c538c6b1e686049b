#pragma once

// Versioned binary checkpoint:
//   "CPLX" | u32 version | str spec | u64 seed | u32 n_meta {str key, str value}
//   | 4 tensor tables (params, buffers, optimizer, extras), each u32 count of
//     {str name, u8 dtype (0 f32, 1 f64), u8 complex, u32 rank, u64 dims[rank], re plane, im plane}
// Strings are u32 length + bytes. Everything little-endian. Writes go to a temp file then rename.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/autograd.hpp"

namespace cvnn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr Dtype dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
}

/// A stored tensor. Values are held as double; f32 records round-trip exactly.
struct TensorRecord {
    std::string name;
    Dtype dtype = Dtype::f64;
    bool complex = false;
    Shape shape;
    std::vector<double> re, im;

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;

    template <typename T>
    static TensorRecord from(std::string name, const Tensor<T>& re, const Tensor<T>* im = nullptr) {
        TensorRecord r;
        r.name = std::move(name);
        r.dtype = dtype_of<T>();
        r.shape = re.shape();
        r.re.assign(re.vec().begin(), re.vec().end());
        if (im) {
            r.complex = true;
            r.im.assign(im->vec().begin(), im->vec().end());
        }
        return r;
    }

    template <typename T>
    Tensor<T> real_plane() const {
        return Tensor<T>(shape, std::vector<T>(re.begin(), re.end()));
    }
    template <typename T>
    Tensor<T> imag_plane() const {
        return Tensor<T>(shape, std::vector<T>(im.begin(), im.end()));
    }
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string spec;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> meta;
    std::vector<TensorRecord> params, buffers, optimizer, extras;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

    const TensorRecord* find_extra(const std::string& name) const {
        for (const auto& r : extras)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

class Writer {
public:
    template <typename U>
    void pod(U v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(U));
    }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void tensor(const TensorRecord& r) {
        str(r.name);
        pod<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
        pod<std::uint8_t>(r.complex ? 1 : 0);
        pod<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) pod<std::uint64_t>(d);
        plane(r.re, r.dtype);
        if (r.complex) plane(r.im, r.dtype);
    }
    const std::vector<char>& bytes() const { return buf_; }

private:
    void plane(const std::vector<double>& v, Dtype dt) {
        for (double x : v) {
            if (dt == Dtype::f32)
                pod<float>(static_cast<float>(x));
            else
                pod<double>(x);
        }
    }
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> b) : buf_(std::move(b)) {}
    template <typename U>
    U pod() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    TensorRecord tensor() {
        TensorRecord r;
        r.name = str();
        const auto dt = pod<std::uint8_t>();
        if (dt > 1) throw CheckpointError("tensor " + r.name + ": unknown dtype " + std::to_string(dt));
        r.dtype = static_cast<Dtype>(dt);
        r.complex = pod<std::uint8_t>() != 0;
        const auto rank = pod<std::uint32_t>();
        if (rank > 8) throw CheckpointError("tensor " + r.name + ": implausible rank");
        for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(pod<std::uint64_t>());
        const std::size_t n = shape_numel(r.shape);
        r.re = plane(n, r.dtype);
        if (r.complex) r.im = plane(n, r.dtype);
        return r;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    std::vector<double> plane(std::size_t n, Dtype dt) {
        need(n * (dt == Dtype::f32 ? 4 : 8));
        std::vector<double> v(n);
        for (auto& x : v) x = dt == Dtype::f32 ? double(pod<float>()) : pod<double>();
        return v;
    }
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint is truncated");
    }
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
    detail::Writer w;
    for (char ch : std::string("CPLX")) w.pod<char>(ch);
    w.pod<std::uint32_t>(c.version);
    w.str(c.spec);
    w.pod<std::uint64_t>(c.seed);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        w.str(k);
        w.str(v);
    }
    for (const auto* table : {&c.params, &c.buffers, &c.optimizer, &c.extras}) {
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(table->size()));
        for (const auto& r : *table) w.tensor(r);
    }
    return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
    detail::Reader r(std::move(bytes));
    std::string magic;
    for (int i = 0; i < 4; ++i) magic.push_back(r.pod<char>());
    if (magic != "CPLX") throw CheckpointError("not a checkpoint (bad magic)");
    Checkpoint c;
    c.version = r.pod<std::uint32_t>();
    if (c.version != kCheckpointVersion)
        throw CheckpointError("checkpoint format version " + std::to_string(c.version) +
                              " is not supported (expected " + std::to_string(kCheckpointVersion) +
                              ")");
    c.spec = r.str();
    c.seed = r.pod<std::uint64_t>();
    const auto n_meta = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        c.meta[k] = r.str();
    }
    for (auto* table : {&c.params, &c.buffers, &c.optimizer, &c.extras}) {
        const auto n = r.pod<std::uint32_t>();
        for (std::uint32_t i = 0; i < n; ++i) table->push_back(r.tensor());
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
    return c;
}

/// Writes bytes to `path` via a sibling temp file and rename.
inline void atomic_write(const std::filesystem::path& path, const std::vector<char>& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void atomic_write(const std::filesystem::path& path, const std::string& text) {
    atomic_write(path, std::vector<char>(text.begin(), text.end()));
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    atomic_write(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(std::move(bytes));
}

// Parameter / buffer tables.

template <typename T>
std::vector<TensorRecord> parameter_records(std::span<Parameter<T>* const> params) {
    std::vector<TensorRecord> out;
    for (const auto* p : params)
        out.push_back(TensorRecord::from<T>(p->name, p->re, p->is_complex ? &p->im : nullptr));
    return out;
}

template <typename T>
std::vector<TensorRecord> buffer_records(std::span<Buffer<T>* const> buffers) {
    std::vector<TensorRecord> out;
    for (const auto* b : buffers) out.push_back(TensorRecord::from<T>(b->name, b->value));
    return out;
}

/// Copies stored values into live parameters, matching by name and checking shape and kind.
template <typename T>
void restore_parameters(std::span<Parameter<T>* const> params, const std::vector<TensorRecord>& recs) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : recs) by_name[r.name] = &r;
    if (by_name.size() != params.size())
        throw CheckpointError("checkpoint has " + std::to_string(by_name.size()) +
                              " parameters, model has " + std::to_string(params.size()));
    for (auto* p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p->name);
        const TensorRecord& r = *it->second;
        if (r.shape != p->shape() || r.complex != p->is_complex)
            throw CheckpointError("parameter " + p->name + " does not match the checkpoint");
        p->re = r.real_plane<T>();
        if (p->is_complex) p->im = r.imag_plane<T>();
    }
}

template <typename T>
void restore_buffers(std::span<Buffer<T>* const> buffers, const std::vector<TensorRecord>& recs) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : recs) by_name[r.name] = &r;
    for (auto* b : buffers) {
        auto it = by_name.find(b->name);
        if (it == by_name.end()) throw CheckpointError("checkpoint lacks buffer " + b->name);
        if (it->second->shape != b->value.shape())
            throw CheckpointError("buffer " + b->name + " does not match the checkpoint");
        b->value = it->second->template real_plane<T>();
    }
}

}  // namespace cvnn
