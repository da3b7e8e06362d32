#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "crn/generator.hpp"

namespace crn {

/// Cascaded Refinement Network configuration. Module i runs at
/// (base_h * 2^i, base_w * 2^i) with channels[i] feature maps.
struct CascadeConfig {
    int base_h = 4;
    int base_w = 8;
    std::vector<int> channels;
    int classes = 0;
    int output_multiplicity = 1;
    double slope = 0.2;

    int module_count() const { return static_cast<int>(channels.size()); }
    std::pair<int, int> module_resolution(int i) const { return {base_h << i, base_w << i}; }
    std::pair<int, int> output_resolution() const { return module_resolution(module_count() - 1); }

    /// Throws ConfigError on an invalid configuration.
    void validate() const;

    /// The same cascade with one more module of `channels_new` maps,
    /// doubling the output resolution.
    CascadeConfig extended(int channels_new) const;

    nlohmann::json to_json() const;
    /// Strict: unknown keys are rejected.
    static CascadeConfig from_json(const nlohmann::json& j);

    /// 9 modules, 4x8 -> 1024x2048, 1024 maps for i = 0..4, 512 for 5-6,
    /// 128 for 7 and 32 for 8.
    static CascadeConfig full_scale(int classes, int output_multiplicity = 1);
};

/// Closed-form parameter count: per module two 3x3 convolutions with bias
/// and layer-norm gain/offset (the last module's second convolution has no
/// normalization), plus the 1x1 projection to 3k channels.
std::int64_t param_count(const CascadeConfig& config);

template <typename Scalar>
class CascadeModel final : public Generator<Scalar> {
public:
    explicit CascadeModel(CascadeConfig config);

    const CascadeConfig& config() const { return config_; }

    std::string kind() const override { return "crn"; }
    nlohmann::json config_json() const override { return config_.to_json(); }
    int classes() const override { return config_.classes; }
    int output_multiplicity() const override { return config_.output_multiplicity; }
    void check_resolution(int height, int width) const override;
    int resolution_divisor() const override { return 1 << (config_.module_count() - 1); }

    FeatureMap<Scalar> forward(const FeatureMap<Scalar>& layout,
                               GeneratorTrace<Scalar>* trace = nullptr) const override;
    void backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                  ParameterSet<Scalar>& grads) const override;
    void initialize(std::uint64_t seed) override;
    std::int64_t activation_elements(int height, int width) const override;

    /// One refinement module: concat(layout at module resolution, upsampled
    /// prev) -> conv3x3 -> LN -> LReLU -> conv3x3 -> LN -> LReLU. The last
    /// module skips the final LN and LReLU. Module 0 takes no prev.
    /// `layout` may be at any resolution that block-averages down to the
    /// module's resolution.
    FeatureMap<Scalar> refinement_forward(int module, const FeatureMap<Scalar>& layout,
                                          const std::optional<FeatureMap<Scalar>>& prev,
                                          GeneratorTrace<Scalar>* trace = nullptr) const;

    /// Returns gradients w.r.t. (layout at module resolution, prev).
    std::pair<FeatureMap<Scalar>, std::optional<FeatureMap<Scalar>>> refinement_backward(
        int module, const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_out,
        ParameterSet<Scalar>& grads) const;

    /// Final feature layer F^last before the projection.
    FeatureMap<Scalar> features(const FeatureMap<Scalar>& layout) const;

private:
    CascadeConfig config_;
    std::vector<ConvBlock<Scalar>> first_;   // per module: input -> intermediate
    std::vector<ConvBlock<Scalar>> second_;  // per module: intermediate -> output
    ConvBlock<Scalar> projection_;
};

}  // namespace crn
