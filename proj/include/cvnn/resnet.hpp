#pragma once

// Residual networks over complex or real feature maps: imaginary-part learning block, stem,
// three stages of pre-activation residual blocks joined by concatenation projections, global
// average pooling and a real dense classifier.

#include <string>
#include <type_traits>
#include <vector>

#include "cvnn/network.hpp"

namespace cvnn {

/// ReLU layer with the same interface as ComplexActivation.
template <typename T>
class RealActivation {
public:
    RealActivation(const std::string&, Activation, std::size_t) {}
    Var<T> forward(Tape<T>&, Var<T> x) { return relu(x); }
    void collect(std::vector<Parameter<T>*>&) {}
};

/// Layer types for the complex (true) or real (false) path.
template <typename T, bool Complex>
struct PathTypes;

template <typename T>
struct PathTypes<T, true> {
    using Value = CVar<T>;
    using Conv = ComplexConv2d<T>;
    using Norm = ComplexNorm<T>;
    using Act = ComplexActivation<T>;
};

template <typename T>
struct PathTypes<T, false> {
    using Value = Var<T>;
    using Conv = Conv2d<T>;
    using Norm = RealNorm<T>;
    using Act = RealActivation<T>;
};

/// norm -> act -> conv3x3, twice, plus the identity shortcut.
template <typename T, bool Complex>
class ResidualBlock {
    using P = PathTypes<T, Complex>;

public:
    ResidualBlock(const std::string& name, std::size_t width, NormKind norm, Activation act,
                  const InitPolicy& init)
        : norm1_(name + ".norm1", norm, width),
          norm2_(name + ".norm2", norm, width),
          act1_(name + ".act1", act, width),
          act2_(name + ".act2", act, width),
          conv1_(name + ".conv1", width, width, 3, 1, 1, false, init),
          conv2_(name + ".conv2", width, width, 3, 1, 1, false, init) {}

    typename P::Value forward(Tape<T>& tape, typename P::Value z, bool training) {
        auto h = conv1_.forward(tape, act1_.forward(tape, norm1_.forward(tape, z, training)));
        h = conv2_.forward(tape, act2_.forward(tape, norm2_.forward(tape, h, training)));
        if (h.shape() != z.shape())
            throw ShapeError("residual block changed shape " + shape_str(z.shape()) + " -> " +
                             shape_str(h.shape()));
        return z + h;
    }

    void flops(const Shape& in, std::vector<LayerCost>& out, const std::string& name) const {
        out.push_back({name + ".conv1", conv1_.real_multiplies(in)});
        out.push_back({name + ".conv2", conv2_.real_multiplies(in)});
    }

    void collect(std::vector<Parameter<T>*>& out) {
        norm1_.collect(out);
        act1_.collect(out);
        conv1_.collect(out);
        norm2_.collect(out);
        act2_.collect(out);
        conv2_.collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        norm1_.collect_buffers(out);
        norm2_.collect_buffers(out);
    }

private:
    typename P::Norm norm1_, norm2_;
    typename P::Act act1_, act2_;
    typename P::Conv conv1_, conv2_;
};

/// Real input -> imaginary part: BN -> ReLU -> Conv -> BN -> ReLU -> Conv.
template <typename T>
class ImaginaryBlock {
public:
    ImaginaryBlock(const std::string& name, std::size_t in_c, std::size_t width,
                   const InitPolicy& init, bool zero_init)
        : bn1_(name + ".bn1", in_c),
          bn2_(name + ".bn2", width),
          conv1_(name + ".conv1", in_c, width, 3, 1, 1, false, init),
          conv2_(name + ".conv2", width, in_c, 3, 1, 1, false, init) {
        if (zero_init) conv2_.weight().re.fill(T{0});
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        Var<T> h = conv1_.forward(tape, relu(bn1_.forward(tape, x, training)));
        return conv2_.forward(tape, relu(bn2_.forward(tape, h, training)));
    }

    void flops(const Shape& in, std::vector<LayerCost>& out, const std::string& name) const {
        out.push_back({name + ".conv1", conv1_.real_multiplies(in)});
        out.push_back({name + ".conv2", conv2_.real_multiplies(conv1_.output_shape(in))});
    }
    void collect(std::vector<Parameter<T>*>& out) {
        bn1_.collect(out);
        conv1_.collect(out);
        bn2_.collect(out);
        conv2_.collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        bn1_.collect_buffers(out);
        bn2_.collect_buffers(out);
    }

private:
    BatchNorm<T> bn1_, bn2_;
    Conv2d<T> conv1_, conv2_;
};

/// Concatenation projection between stages: subsample by 2, then [z, conv1x1(z)] along
/// channels. Decimating first equals a stride-2 1x1 conv on both branches.
template <typename T, bool Complex>
class StageProjection {
    using P = PathTypes<T, Complex>;

public:
    StageProjection(const std::string& name, std::size_t width, const InitPolicy& init)
        : conv_(name + ".conv1x1", width, width, 1, 1, 0, false, init) {}

    typename P::Value forward(Tape<T>& tape, typename P::Value z) {
        auto d = subsample2(z);
        return concat_channels(d, conv_.forward(tape, d));
    }
    void flops(const Shape& in, std::vector<LayerCost>& out, const std::string& name) const {
        out.push_back({name + ".conv1x1", conv_.real_multiplies(subsampled(in))});
    }
    static Shape subsampled(const Shape& s) { return {s[0], s[1], (s[2] + 1) / 2, (s[3] + 1) / 2}; }
    void collect(std::vector<Parameter<T>*>& out) { conv_.collect(out); }
    typename P::Conv& conv() { return conv_; }

private:
    typename P::Conv conv_;
};

template <typename T, bool Complex>
class ResNet : public Network<T> {
    using P = PathTypes<T, Complex>;

public:
    ResNet(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec.validate();
        if (spec.complex != Complex) throw SpecError("model spec complex flag mismatch");
        InitPolicy init;
        init.complex_flavor = Complex ? parse_flavor(spec.init) : InitFlavor::unitary;
        init.criterion = parse_criterion(spec.criterion);
        init.root_seed = seed;
        const NormKind norm = parse_norm(spec.norm);
        const Activation act = parse_activation(spec.activation);
        const std::size_t F = spec.start_filters;

        if constexpr (Complex)
            imag_.emplace("imag", spec.in_channels, F, init, spec.imag_block_zero_init);
        stem_conv_.emplace("stem.conv", spec.in_channels, F, 3, 1, 1, false, init);
        stem_norm_.emplace("stem.norm", norm, F);
        stem_act_.emplace("stem.act", act, F);

        std::size_t width = F;
        for (std::size_t s = 0; s < spec.n_stages; ++s) {
            std::vector<ResidualBlock<T, Complex>> blocks;
            blocks.reserve(spec.blocks_per_stage);
            for (std::size_t b = 0; b < spec.blocks_per_stage; ++b)
                blocks.emplace_back("stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1),
                                    width, norm, act, init);
            stages_.push_back(std::move(blocks));
            if (s + 1 < spec.n_stages) {
                projections_.emplace_back("stage" + std::to_string(s + 1) + ".proj", width, init);
                width *= 2;
            }
        }
        final_norm_.emplace("final.norm", norm, width);
        final_act_.emplace("final.act", act, width);
        head_.emplace("head", Complex ? 2 * width : width, spec.n_classes, init, Criterion::glorot);
    }

    Var<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) override {
        check_input(x.shape());
        Var<T> xr = tape.constant(x);
        typename P::Value z;
        if constexpr (Complex)
            z = CVar<T>{xr, imag_->forward(tape, xr, training)};
        else
            z = xr;
        z = stem_act_->forward(tape, stem_norm_->forward(tape, stem_conv_->forward(tape, z), training));
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (auto& b : stages_[s]) z = b.forward(tape, z, training);
            if (s < projections_.size()) z = projections_[s].forward(tape, z);
        }
        z = final_act_->forward(tape, final_norm_->forward(tape, z, training));
        auto pooled = global_avg_pool(z);
        Var<T> features;
        if constexpr (Complex)
            features = head_bridge(pooled);
        else
            features = pooled;
        return head_->forward(tape, features);
    }

    std::vector<LayerCost> flops(const Shape& example) const override {
        Shape in = example;
        if (in.size() == 3) in.insert(in.begin(), 1);
        check_input(in);
        std::vector<LayerCost> out;
        if constexpr (Complex) imag_->flops(in, out, "imag");
        out.push_back({"stem.conv", stem_conv_->real_multiplies(in)});
        Shape s = stem_conv_->output_shape(in);
        for (std::size_t k = 0; k < stages_.size(); ++k) {
            for (std::size_t b = 0; b < stages_[k].size(); ++b)
                stages_[k][b].flops(s, out,
                                    "stage" + std::to_string(k + 1) + ".block" + std::to_string(b + 1));
            if (k < projections_.size()) {
                projections_[k].flops(s, out, "stage" + std::to_string(k + 1) + ".proj");
                s = StageProjection<T, Complex>::subsampled(s);
                s[1] *= 2;
            }
        }
        out.push_back({"head", head_->real_multiplies()});
        return out;
    }

    void collect_parameters(std::vector<Parameter<T>*>& out) override {
        if constexpr (Complex) imag_->collect(out);
        stem_conv_->collect(out);
        stem_norm_->collect(out);
        stem_act_->collect(out);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (auto& b : stages_[s]) b.collect(out);
            if (s < projections_.size()) projections_[s].collect(out);
        }
        final_norm_->collect(out);
        final_act_->collect(out);
        head_->collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) override {
        if constexpr (Complex) imag_->collect_buffers(out);
        stem_norm_->collect_buffers(out);
        for (auto& stage : stages_)
            for (auto& b : stage) b.collect_buffers(out);
        final_norm_->collect_buffers(out);
    }

    const ModelSpec& spec() const { return spec_; }
    StageProjection<T, Complex>& projection(std::size_t k) { return projections_.at(k); }
    ImaginaryBlock<T>* imaginary_block() { return imag_ ? &*imag_ : nullptr; }

    /// Real input (N, in_c, H, W) to the complex stem input (imaginary part learned).
    CVar<T> learn_imaginary(Tape<T>& tape, Var<T> x, bool training) {
        if (!imag_) throw std::logic_error("real model has no imaginary-part block");
        return {x, imag_->forward(tape, x, training)};
    }

private:
    void check_input(const Shape& s) const {
        if (s.size() != 4 || s[1] != spec_.in_channels)
            throw ShapeError("model expects (N, " + std::to_string(spec_.in_channels) +
                             ", H, W) input, got " + shape_str(s));
    }

    ModelSpec spec_;
    std::optional<ImaginaryBlock<T>> imag_;
    std::optional<typename P::Conv> stem_conv_;
    std::optional<typename P::Norm> stem_norm_;
    std::optional<typename P::Act> stem_act_;
    std::vector<std::vector<ResidualBlock<T, Complex>>> stages_;
    std::vector<StageProjection<T, Complex>> projections_;
    std::optional<typename P::Norm> final_norm_;
    std::optional<typename P::Act> final_act_;
    std::optional<Dense<T>> head_;
};

/// Eager imaginary-part learning block on a real batch.
template <typename T>
ComplexTensor<T> learn_imaginary_block(const Tensor<T>& x, ImaginaryBlock<T>& block,
                                       bool training = true) {
    Tape<T> tape;
    Var<T> xr = tape.constant(x);
    return CVar<T>{xr, block.forward(tape, xr, training)}.value();
}

/// Eager stage projection.
template <typename T>
ComplexTensor<T> stage_projection(const ComplexTensor<T>& x, StageProjection<T, true>& proj) {
    Tape<T> tape;
    return proj.forward(tape, tape.constant(x)).value();
}

}  // namespace cvnn
