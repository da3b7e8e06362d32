#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "crn/layers.hpp"

namespace crn {

enum class PoolKind { max, average };

struct PerceiverLayer {
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    bool pool_before = false;
};

struct TapShape {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::int64_t elements() const { return static_cast<std::int64_t>(channels) * height * width; }
};

/// Layer list and tap selection of a fixed perception network. Tap 0 is
/// always "input" (the raw image); the remaining taps name conv layers,
/// each taken after its ReLU, in order of decreasing resolution.
struct PerceiverSpec {
    std::string variant;  // "vgg19" or "random"
    std::vector<PerceiverLayer> layers;
    std::vector<std::string> taps;
    PoolKind pool = PoolKind::max;
    /// Conv input is image * input_scale - input_mean[channel]; tap 0 is
    /// the unscaled image.
    float input_scale = 1.0f;
    std::array<float, 3> input_mean{0.0f, 0.0f, 0.0f};
    int width_divisor = 1;
    std::uint64_t seed = 0;

    /// VGG-19 through conv5_2 with taps conv1_2, conv2_2, conv3_2, conv4_2,
    /// conv5_2. Channel counts are divided by `width_divisor` (1 for the
    /// pretrained network). Preprocessing follows the original model:
    /// RGB in [0, 255] minus the ImageNet channel means.
    static PerceiverSpec vgg19(int width_divisor = 1);

    /// Desk-scale stand-in: three conv+ReLU taps at strides 1, 2 and 4 with
    /// average pooling, weights drawn from `seed`.
    static PerceiverSpec random(std::vector<int> channels = {8, 16, 32}, std::uint64_t seed = 7);

    /// Cumulative downsampling factor of the deepest tap.
    int total_stride() const;
    void check_resolution(int height, int width) const;
    std::vector<TapShape> tap_shapes(int height, int width) const;
    std::vector<std::pair<int, int>> tap_resolutions(int height, int width) const;

    void validate() const;
    nlohmann::json to_json() const;
    static PerceiverSpec from_json(const nlohmann::json& j);
};

/// Activations Phi_0..Phi_L, one FeatureMap per tap.
template <typename Scalar>
using PerceiverTaps = std::vector<FeatureMap<Scalar>>;

template <typename Scalar>
struct PerceiverTrace {
    std::vector<typename ConvBlock<Scalar>::Cache> blocks;
    std::vector<std::vector<int>> argmax;
    std::vector<std::pair<int, int>> input_resolution;  // per layer, before pooling
};

/// Frozen perception network. Gradients flow through it to the image but
/// never into its parameters.
template <typename Scalar>
class Perceiver {
public:
    /// Builds the layer stack; weights are zero until initialized or loaded.
    explicit Perceiver(PerceiverSpec spec);

    /// Seeded fan-in uniform weights (the desk-scale perceiver).
    static Perceiver seeded(PerceiverSpec spec);

    const PerceiverSpec& spec() const { return spec_; }
    const ParameterSet<Scalar>& parameters() const { return params_; }
    ParameterSet<Scalar>& mutable_parameters() { return params_; }

    PerceiverTaps<Scalar> extract_taps(const FeatureMap<Scalar>& image,
                                       PerceiverTrace<Scalar>* trace = nullptr) const;

    /// Gradient w.r.t. the image given gradients w.r.t. every tap. Empty
    /// tap gradients (size 0) are treated as zero.
    FeatureMap<Scalar> backward(const PerceiverTrace<Scalar>& trace,
                                const PerceiverTaps<Scalar>& tap_grads) const;

private:
    PerceiverSpec spec_;
    ParameterSet<Scalar> params_;
    std::vector<ConvBlock<Scalar>> blocks_;
    std::vector<int> tap_layer_;  // tap index -> layer index (-1 for input)
};

nlohmann::json perceiver_header(const PerceiverSpec& spec);

template <typename Scalar>
void save_perceiver(const std::filesystem::path& dir, const Perceiver<Scalar>& perceiver);

/// Reads a perceiver archive and validates tensor names and shapes against
/// the spec stored in its header.
template <typename Scalar = float>
Perceiver<Scalar> load_perceiver_weights(const std::filesystem::path& archive_dir);

/// Imports per-layer `<name>.weight.npy` ([out, in, 3, 3]) and
/// `<name>.bias.npy` ([out]) files into a perceiver archive. The width
/// divisor is inferred from conv1_1's output channels.
PerceiverSpec convert_npy_perceiver(const std::filesystem::path& npy_dir,
                                    const std::filesystem::path& archive_dir);

}  // namespace crn
