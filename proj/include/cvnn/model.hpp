#pragma once

#include <memory>

#include "cvnn/convlstm.hpp"
#include "cvnn/resnet.hpp"

namespace cvnn {

/// Builds the network described by `spec`, seeding every layer from `seed` and its layer path.
template <typename T>
std::unique_ptr<Network<T>> build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.is_convlstm()) {
        if (spec.complex) return std::make_unique<ConvLstmPredictor<T, true>>(spec, seed);
        return std::make_unique<ConvLstmPredictor<T, false>>(spec, seed);
    }
    if (spec.complex) return std::make_unique<ResNet<T, true>>(spec, seed);
    return std::make_unique<ResNet<T, false>>(spec, seed);
}

/// Input shape of a single example for FLOP accounting.
inline Shape example_shape(const ModelSpec& spec, std::size_t seq_len = 8) {
    if (spec.is_convlstm()) return {1, seq_len, 2, spec.image_size, spec.image_size};
    return {1, spec.in_channels, spec.image_size, spec.image_size};
}

/// Real multiplies per example (conv and dense layers).
template <typename T>
std::vector<LayerCost> model_flops(const Network<T>& net, const Shape& example) {
    return net.flops(example);
}

}  // namespace cvnn
