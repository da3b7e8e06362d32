#pragma once

#include <cstdint>
#include <vector>

#include "crn/generator.hpp"

namespace crn {

/// Full-resolution network: every layer runs at the input resolution, and
/// receptive field comes from dilation that starts large and halves per
/// layer.
struct FullResConfig {
    int layers = 10;
    int features = 256;
    int max_h = 256;
    int max_w = 512;
    int classes = 0;
    int output_multiplicity = 1;
    double slope = 0.2;

    void validate() const;
    nlohmann::json to_json() const;
    static FullResConfig from_json(const nlohmann::json& j);

    /// 2^(layers-1), 2^(layers-2), ..., 1.
    std::vector<int> uncapped_dilations() const;
    /// First dilation min(2^(layers-1), cap) where cap is the largest power
    /// of two <= min(h, w) / 2, halving per layer and staying at 1.
    std::vector<int> dilations(int height, int width) const;
};

std::int64_t param_count(const FullResConfig& config);

template <typename Scalar>
class FullResNet final : public Generator<Scalar> {
public:
    explicit FullResNet(FullResConfig config);

    const FullResConfig& config() const { return config_; }

    std::string kind() const override { return "fullres"; }
    nlohmann::json config_json() const override { return config_.to_json(); }
    int classes() const override { return config_.classes; }
    int output_multiplicity() const override { return config_.output_multiplicity; }
    void check_resolution(int height, int width) const override;
    int resolution_divisor() const override { return 1; }
    FeatureMap<Scalar> forward(const FeatureMap<Scalar>& layout,
                               GeneratorTrace<Scalar>* trace = nullptr) const override;
    void backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                  ParameterSet<Scalar>& grads) const override;
    void initialize(std::uint64_t seed) override;
    std::int64_t activation_elements(int height, int width) const override;

private:
    FullResConfig config_;
    std::vector<ConvBlock<Scalar>> blocks_;
    ConvBlock<Scalar> projection_;
};

/// U-net style encoder-decoder: two conv blocks per level, 2x2 average
/// pooling on the way down, bilinear upsampling plus skip concatenation on
/// the way up, 1x1 projection to 3k channels.
struct EncoderDecoderConfig {
    int depth = 5;
    int base_channels = 64;
    int max_channels = 512;
    bool skip_connections = true;
    int classes = 0;
    int output_multiplicity = 1;
    double slope = 0.2;

    /// Channels at level s (s = depth is the bottleneck).
    int level_channels(int s) const;

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderDecoderConfig from_json(const nlohmann::json& j);
};

std::int64_t param_count(const EncoderDecoderConfig& config);

template <typename Scalar>
class EncoderDecoder final : public Generator<Scalar> {
public:
    explicit EncoderDecoder(EncoderDecoderConfig config);

    const EncoderDecoderConfig& config() const { return config_; }

    std::string kind() const override { return "encdec"; }
    nlohmann::json config_json() const override { return config_.to_json(); }
    int classes() const override { return config_.classes; }
    int output_multiplicity() const override { return config_.output_multiplicity; }
    void check_resolution(int height, int width) const override;
    int resolution_divisor() const override { return 1 << config_.depth; }
    FeatureMap<Scalar> forward(const FeatureMap<Scalar>& layout,
                               GeneratorTrace<Scalar>* trace = nullptr) const override;
    void backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                  ParameterSet<Scalar>& grads) const override;
    void initialize(std::uint64_t seed) override;
    std::int64_t activation_elements(int height, int width) const override;

    /// Resolution of the deepest feature layer for a given input size.
    std::pair<int, int> bottleneck_resolution(int height, int width) const;

private:
    EncoderDecoderConfig config_;
    // blocks_ order: encoder levels (2 each), bottleneck (2), decoder levels
    // from deep to shallow (2 each).
    std::vector<ConvBlock<Scalar>> blocks_;
    ConvBlock<Scalar> projection_;
};

}  // namespace crn
