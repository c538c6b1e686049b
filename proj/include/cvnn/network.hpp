#pragma once

// Declarative model description, the common network interface, and normalization wrappers
// selectable by id ("cbn" | "ncbn" | "bn").

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cvnn/activations.hpp"
#include "cvnn/autograd.hpp"
#include "cvnn/cbn.hpp"
#include "cvnn/conv.hpp"
#include "cvnn/init.hpp"

namespace cvnn {

class SpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class NormKind { cbn, ncbn, bn };

inline NormKind parse_norm(const std::string& s) {
    if (s == "cbn") return NormKind::cbn;
    if (s == "ncbn") return NormKind::ncbn;
    if (s == "bn") return NormKind::bn;
    throw std::invalid_argument("unknown norm '" + s + "' (expected cbn|ncbn|bn)");
}
inline std::string to_string(NormKind n) {
    switch (n) {
        case NormKind::cbn: return "cbn";
        case NormKind::ncbn: return "ncbn";
        case NormKind::bn: return "bn";
    }
    return "?";
}

struct ModelSpec {
    std::string variant = "WS";  // WS | DN | IB | custom | convlstm
    bool complex = true;
    std::size_t start_filters = 12;
    std::size_t blocks_per_stage = 16;
    std::size_t n_stages = 3;
    std::string activation = "crelu";
    std::string norm = "cbn";
    std::size_t n_classes = 10;
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::string init = "unitary";
    std::string criterion = "he";
    bool imag_block_zero_init = false;
    // convlstm
    std::size_t feature_maps = 8;
    std::size_t kernel_size = 3;
    double forget_bias = 1.0;

    /// CWS, CDN, CIB, RWS, RDN, RIB.
    static ModelSpec preset(const std::string& name) {
        static const std::map<std::string, std::pair<std::size_t, std::size_t>> table{
            {"CWS", {12, 16}}, {"CDN", {10, 23}}, {"CIB", {11, 19}},
            {"RWS", {18, 14}}, {"RDN", {14, 23}}, {"RIB", {16, 18}}};
        auto it = table.find(name);
        if (it == table.end()) throw SpecError("unknown model preset '" + name + "'");
        ModelSpec s;
        s.complex = name[0] == 'C';
        s.variant = name.substr(1);
        s.start_filters = it->second.first;
        s.blocks_per_stage = it->second.second;
        if (!s.complex) {
            s.activation = "relu";
            s.norm = "bn";
        }
        return s;
    }

    bool is_convlstm() const { return variant == "convlstm"; }

    /// Throws SpecError listing every violated invariant.
    void validate() const {
        std::vector<std::string> bad;
        static const std::vector<std::string> variants{"WS", "DN", "IB", "custom", "convlstm"};
        if (std::find(variants.begin(), variants.end(), variant) == variants.end())
            bad.push_back("variant must be WS|DN|IB|custom|convlstm (got '" + variant + "')");
        try {
            const Activation a = parse_activation(activation);
            if (!complex && !is_convlstm() && a != Activation::relu)
                bad.push_back("real models use activation relu");
        } catch (const std::invalid_argument& e) {
            bad.push_back(e.what());
        }
        try {
            parse_flavor(init);
        } catch (const std::invalid_argument& e) {
            bad.push_back(e.what());
        }
        try {
            parse_criterion(criterion);
        } catch (const std::invalid_argument& e) {
            bad.push_back(e.what());
        }
        if (is_convlstm()) {
            if (feature_maps == 0) bad.push_back("feature_maps must be >= 1");
            if (kernel_size % 2 == 0) bad.push_back("kernel_size must be odd for same padding");
        } else {
            try {
                const NormKind n = parse_norm(norm);
                if (!complex && n != NormKind::bn && start_filters % 2 != 0)
                    bad.push_back("real models with complex norms need an even start_filters");
            } catch (const std::invalid_argument& e) {
                bad.push_back(e.what());
            }
            if (n_stages != 3) bad.push_back("n_stages must be 3");
            if (start_filters == 0) bad.push_back("start_filters must be >= 1");
            if (blocks_per_stage == 0) bad.push_back("blocks_per_stage must be >= 1");
            if (n_classes < 2) bad.push_back("n_classes must be >= 2");
            if (in_channels == 0) bad.push_back("in_channels must be >= 1");
            if (image_size == 0) bad.push_back("image_size must be >= 1");
        }
        if (bad.empty()) return;
        std::string msg = "invalid model spec:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw SpecError(msg);
    }

    std::vector<std::pair<std::string, std::string>> to_pairs() const {
        auto num = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        return {{"variant", variant},
                {"complex", complex ? "true" : "false"},
                {"start_filters", std::to_string(start_filters)},
                {"blocks_per_stage", std::to_string(blocks_per_stage)},
                {"n_stages", std::to_string(n_stages)},
                {"activation", activation},
                {"norm", norm},
                {"n_classes", std::to_string(n_classes)},
                {"in_channels", std::to_string(in_channels)},
                {"image_size", std::to_string(image_size)},
                {"init", init},
                {"criterion", criterion},
                {"imag_block_zero_init", imag_block_zero_init ? "true" : "false"},
                {"feature_maps", std::to_string(feature_maps)},
                {"kernel_size", std::to_string(kernel_size)},
                {"forget_bias", num(forget_bias)}};
    }

    /// Applies one `key = value` field; returns false for unknown keys.
    bool set(const std::string& key, const std::string& value) {
        auto to_size = [&](std::size_t& dst) {
            std::size_t pos = 0;
            long long v = 0;
            try {
                v = std::stoll(value, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != value.size() || v < 0)
                throw SpecError("model." + key + ": expected a non-negative integer, got '" +
                                value + "'");
            dst = static_cast<std::size_t>(v);
        };
        auto to_bool = [&](bool& dst) {
            if (value == "true" || value == "1") dst = true;
            else if (value == "false" || value == "0") dst = false;
            else throw SpecError("model." + key + ": expected true|false, got '" + value + "'");
        };
        if (key == "variant") variant = value;
        else if (key == "complex") to_bool(complex);
        else if (key == "start_filters") to_size(start_filters);
        else if (key == "blocks_per_stage") to_size(blocks_per_stage);
        else if (key == "n_stages") to_size(n_stages);
        else if (key == "activation") activation = value;
        else if (key == "norm") norm = value;
        else if (key == "n_classes") to_size(n_classes);
        else if (key == "in_channels") to_size(in_channels);
        else if (key == "image_size") to_size(image_size);
        else if (key == "init") init = value;
        else if (key == "criterion") criterion = value;
        else if (key == "imag_block_zero_init") to_bool(imag_block_zero_init);
        else if (key == "feature_maps") to_size(feature_maps);
        else if (key == "kernel_size") to_size(kernel_size);
        else if (key == "forget_bias") {
            try {
                std::size_t pos = 0;
                forget_bias = std::stod(value, &pos);
                if (pos != value.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw SpecError("model.forget_bias: expected a number, got '" + value + "'");
            }
        } else return false;
        return true;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : to_pairs()) out += k + " = " + v + "\n";
        return out;
    }

    static ModelSpec deserialize(const std::string& text) {
        ModelSpec s;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string x) {
                const auto b = x.find_first_not_of(" \t");
                const auto e = x.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : x.substr(b, e - b + 1);
            };
            const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
            if (!s.set(k, v)) throw SpecError("unknown model field '" + k + "'");
        }
        return s;
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class TaskKind { classification, multilabel, regression };

template <typename T>
struct Batch {
    Tensor<T> x;
    std::vector<int> labels;  // classification
    Tensor<T> targets;        // multilabel / regression
};

/// Common interface of everything the training loop can drive.
template <typename T>
class Network {
public:
    virtual ~Network() = default;

    virtual Var<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) = 0;
    virtual TaskKind task() const { return TaskKind::classification; }

    virtual Var<T> loss(Tape<T>& tape, Var<T> out, const Batch<T>& b) {
        (void)tape;
        switch (task()) {
            case TaskKind::classification: return softmax_cross_entropy(out, b.labels);
            case TaskKind::multilabel: return bce_with_logits(out, b.targets);
            case TaskKind::regression: return mse(out, b.targets);
        }
        throw std::logic_error("unhandled task kind");
    }

    virtual void collect_parameters(std::vector<Parameter<T>*>& out) = 0;
    virtual void collect_buffers(std::vector<Buffer<T>*>& out) = 0;
    /// Real multiplies per example of every conv and dense layer, for input of one example.
    virtual std::vector<LayerCost> flops(const Shape& example) const = 0;

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> p;
        collect_parameters(p);
        return p;
    }
    std::vector<Buffer<T>*> buffers() {
        std::vector<Buffer<T>*> b;
        collect_buffers(b);
        return b;
    }
    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->real_count();
        return n;
    }
    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }
};

inline std::uint64_t total_multiplies(const std::vector<LayerCost>& costs) {
    std::uint64_t n = 0;
    for (const auto& c : costs) n += c.multiplies;
    return n;
}

// ---------------------------------------------------------------------------------------------

/// Normalization of a complex feature map.
template <typename T>
class ComplexNorm {
public:
    ComplexNorm(const std::string& name, NormKind kind, std::size_t channels) : kind_(kind) {
        switch (kind) {
            case NormKind::cbn: cbn_.emplace(name, channels); break;
            case NormKind::ncbn: ncbn_.emplace(name, channels); break;
            case NormKind::bn:
                bn_re_.emplace(name + ".re", channels);
                bn_im_.emplace(name + ".im", channels);
                break;
        }
    }

    CVar<T> forward(Tape<T>& tape, CVar<T> z, bool training) {
        switch (kind_) {
            case NormKind::cbn: return cbn_->forward(tape, z, training);
            case NormKind::ncbn: return ncbn_->forward(tape, z, training);
            case NormKind::bn:
                return {bn_re_->forward(tape, z.re, training), bn_im_->forward(tape, z.im, training)};
        }
        throw std::logic_error("unhandled norm");
    }
    void collect(std::vector<Parameter<T>*>& out) {
        if (cbn_) cbn_->collect(out);
        if (ncbn_) ncbn_->collect(out);
        if (bn_re_) {
            bn_re_->collect(out);
            bn_im_->collect(out);
        }
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        if (cbn_) cbn_->collect_buffers(out);
        if (ncbn_) ncbn_->collect_buffers(out);
        if (bn_re_) {
            bn_re_->collect_buffers(out);
            bn_im_->collect_buffers(out);
        }
    }
    ComplexBatchNorm<T>* cbn() { return cbn_ ? &*cbn_ : nullptr; }

private:
    NormKind kind_;
    std::optional<ComplexBatchNorm<T>> cbn_;
    std::optional<NaiveComplexBatchNorm<T>> ncbn_;
    std::optional<BatchNorm<T>> bn_re_, bn_im_;
};

/// Normalization of a real feature map. The complex variants treat the first half of the
/// channels as real parts and the second half as imaginary parts.
template <typename T>
class RealNorm {
public:
    RealNorm(const std::string& name, NormKind kind, std::size_t channels) {
        if (kind == NormKind::bn) {
            bn_.emplace(name, channels);
        } else {
            if (channels % 2 != 0)
                throw SpecError(name + ": complex norm on a real map needs even channels");
            complex_.emplace(name, kind, channels / 2);
        }
    }
    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        if (bn_) return bn_->forward(tape, x, training);
        return merge_channels(complex_->forward(tape, split_channels(x), training));
    }
    void collect(std::vector<Parameter<T>*>& out) {
        if (bn_) bn_->collect(out);
        if (complex_) complex_->collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        if (bn_) bn_->collect_buffers(out);
        if (complex_) complex_->collect_buffers(out);
    }

private:
    std::optional<BatchNorm<T>> bn_;
    std::optional<ComplexNorm<T>> complex_;
};

}  // namespace cvnn
