#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "crn/layers.hpp"

namespace crn {

/// Activations a generator keeps for its backward pass. Filled by forward
/// when requested; opaque to callers.
template <typename Scalar>
struct GeneratorTrace {
    std::vector<typename ConvBlock<Scalar>::Cache> blocks;
    std::vector<std::pair<int, int>> resolutions;
    FeatureMap<Scalar> output;
};

/// A layout-to-image network emitting 3k channels (k images). The CRN and
/// both baselines implement this, so training and synthesis treat them
/// uniformly. Weights are read-only during forward/backward; gradients go
/// into a caller-owned ParameterSet shaped like parameters().
template <typename Scalar>
class Generator {
public:
    virtual ~Generator() = default;

    virtual std::string kind() const = 0;
    virtual nlohmann::json config_json() const = 0;
    virtual int classes() const = 0;
    virtual int output_multiplicity() const = 0;

    /// Throws DimensionError when a layout of this size cannot be processed.
    virtual void check_resolution(int height, int width) const = 0;

    /// Required divisor of layout height/width (for dataset validation).
    virtual int resolution_divisor() const = 0;

    /// Returns 3k output channels at the layout's resolution. When `trace`
    /// is given it receives everything backward needs.
    virtual FeatureMap<Scalar> forward(const FeatureMap<Scalar>& layout,
                                       GeneratorTrace<Scalar>* trace = nullptr) const = 0;

    /// Accumulates d(objective)/d(theta) into `grads`.
    virtual void backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                          ParameterSet<Scalar>& grads) const = 0;

    /// Fan-in uniform init of every block from a single seeded stream.
    virtual void initialize(std::uint64_t seed) = 0;

    /// Total feature-layer elements held by one forward pass at the given
    /// output resolution (what training has to keep alive).
    virtual std::int64_t activation_elements(int height, int width) const = 0;

    ParameterSet<Scalar>& parameters() { return params_; }
    const ParameterSet<Scalar>& parameters() const { return params_; }

protected:
    ParameterSet<Scalar> params_;
};

/// Images live in [0, 1]; untrained outputs start around mid-grey.
inline constexpr double kOutputBiasCenter = 0.5;

/// Shifts the freshly initialized "projection.bias" by kOutputBiasCenter.
template <typename Scalar>
void center_output_bias(ParameterSet<Scalar>& params) {
    for (auto& p : params)
        if (p.name == "projection.bias") p.values.array() += static_cast<Scalar>(kOutputBiasCenter);
}

/// Splits 3k channels into k consecutive RGB images.
template <typename Scalar>
std::vector<FeatureMap<Scalar>> split_images(const FeatureMap<Scalar>& output) {
    if (output.channels() % 3 != 0)
        throw DimensionError("generator output has " + std::to_string(output.channels()) +
                             " channels, not a multiple of 3");
    std::vector<FeatureMap<Scalar>> images;
    for (int u = 0; u < output.channels() / 3; ++u) images.push_back(slice_channels(output, 3 * u, 3));
    return images;
}

template <typename Scalar>
FeatureMap<Scalar> join_images(const std::vector<FeatureMap<Scalar>>& images) {
    if (images.empty()) throw ArgumentError("join_images: no images");
    FeatureMap<Scalar> out(3 * static_cast<int>(images.size()), images[0].height, images[0].width);
    for (std::size_t u = 0; u < images.size(); ++u) {
        if (images[u].channels() != 3 || images[u].height != out.height || images[u].width != out.width)
            throw DimensionError("join_images: image " + std::to_string(u) + " has shape " +
                                 shape_string(images[u]));
        out.data.middleRows(3 * static_cast<Eigen::Index>(u), 3) = images[u].data;
    }
    return out;
}

}  // namespace crn
