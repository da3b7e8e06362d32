#include "crn/cascade.hpp"

#include <set>

#include "crn/config_json.hpp"

namespace crn {

void CascadeConfig::validate() const {
    if (base_h <= 0 || base_w <= 0) throw ConfigError("cascade: base resolution must be positive");
    if (channels.empty()) throw ConfigError("cascade: at least one module is required");
    for (int d : channels)
        if (d <= 0) throw ConfigError("cascade: channel counts must be positive");
    if (classes <= 0) throw ConfigError("cascade: classes must be positive");
    if (output_multiplicity < 1) throw ConfigError("cascade: output_multiplicity must be >= 1");
    if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("cascade: slope must lie in [0, 1)");
    if (module_count() > 16) throw ConfigError("cascade: more than 16 modules");
}

CascadeConfig CascadeConfig::extended(int channels_new) const {
    CascadeConfig c = *this;
    c.channels.push_back(channels_new);
    return c;
}

nlohmann::json CascadeConfig::to_json() const {
    return {{"base_h", base_h},
            {"base_w", base_w},
            {"channels", channels},
            {"classes", classes},
            {"output_multiplicity", output_multiplicity},
            {"slope", slope}};
}

CascadeConfig CascadeConfig::from_json(const nlohmann::json& j) {
    StrictObject obj(j, "cascade config");
    CascadeConfig c;
    obj.get("base_h", c.base_h);
    obj.get("base_w", c.base_w);
    obj.require("channels", c.channels);
    obj.require("classes", c.classes);
    obj.get("output_multiplicity", c.output_multiplicity);
    obj.get("slope", c.slope);
    obj.finish();
    c.validate();
    return c;
}

CascadeConfig CascadeConfig::full_scale(int classes, int output_multiplicity) {
    CascadeConfig c;
    c.channels = {1024, 1024, 1024, 1024, 1024, 512, 512, 128, 32};
    c.classes = classes;
    c.output_multiplicity = output_multiplicity;
    return c;
}

std::int64_t param_count(const CascadeConfig& config) {
    config.validate();
    const std::int64_t c = config.classes;
    std::int64_t total = 0;
    for (int i = 0; i < config.module_count(); ++i) {
        const std::int64_t in = c + (i > 0 ? config.channels[i - 1] : 0);
        const std::int64_t d = config.channels[i];
        const bool last = i + 1 == config.module_count();
        total += 9 * in * d + d + 2 * d;            // first conv + bias + LN
        total += 9 * d * d + d + (last ? 0 : 2 * d);  // second conv + bias (+ LN)
    }
    const std::int64_t out = 3 * static_cast<std::int64_t>(config.output_multiplicity);
    total += config.channels.back() * out + out;
    return total;
}

template <typename Scalar>
CascadeModel<Scalar>::CascadeModel(CascadeConfig config) : config_(std::move(config)) {
    config_.validate();
    auto& params = this->params_;
    for (int i = 0; i < config_.module_count(); ++i) {
        const bool last = i + 1 == config_.module_count();
        const std::string prefix = "module" + std::to_string(i);
        ConvBlockSpec a;
        a.in_channels = config_.classes + (i > 0 ? config_.channels[i - 1] : 0);
        a.out_channels = config_.channels[i];
        a.slope = config_.slope;
        first_.emplace_back(params, prefix + ".conv1", a);
        ConvBlockSpec b = a;
        b.in_channels = config_.channels[i];
        b.normalize = !last;
        b.activate = !last;
        second_.emplace_back(params, prefix + ".conv2", b);
    }
    ConvBlockSpec p;
    p.in_channels = config_.channels.back();
    p.out_channels = 3 * config_.output_multiplicity;
    p.kernel = 1;
    p.normalize = false;
    p.activate = false;
    projection_ = ConvBlock<Scalar>(params, "projection", p);
}

template <typename Scalar>
void CascadeModel<Scalar>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (int i = 0; i < config_.module_count(); ++i) {
        first_[i].initialize(this->params_, rng);
        second_[i].initialize(this->params_, rng);
    }
    projection_.initialize(this->params_, rng);
    center_output_bias(this->params_);
}

template <typename Scalar>
void CascadeModel<Scalar>::check_resolution(int height, int width) const {
    const auto [h, w] = config_.output_resolution();
    if (height != h || width != w)
        throw DimensionError("crn: layout is " + std::to_string(height) + "x" + std::to_string(width) +
                             ", model output resolution is " + std::to_string(h) + "x" +
                             std::to_string(w));
}

template <typename Scalar>
FeatureMap<Scalar> CascadeModel<Scalar>::refinement_forward(
    int module, const FeatureMap<Scalar>& layout, const std::optional<FeatureMap<Scalar>>& prev,
    GeneratorTrace<Scalar>* trace) const {
    if (module < 0 || module >= config_.module_count())
        throw ArgumentError("refinement_forward: no module " + std::to_string(module));
    if (layout.channels() != config_.classes)
        throw DimensionError("refinement_forward: layout has " + std::to_string(layout.channels()) +
                             " channels, model expects " + std::to_string(config_.classes));
    const auto [h, w] = config_.module_resolution(module);
    FeatureMap<Scalar> input =
        layout.height == h && layout.width == w ? layout : block_average(layout, h, w);
    if (module == 0) {
        if (prev) throw DimensionError("refinement_forward: module 0 takes no previous features");
    } else {
        const auto [ph, pw] = config_.module_resolution(module - 1);
        if (!prev) throw DimensionError("refinement_forward: module " + std::to_string(module) +
                                        " needs the previous feature layer");
        if (prev->height != ph || prev->width != pw || prev->channels() != config_.channels[module - 1])
            throw DimensionError("refinement_forward: previous features are " + shape_string(*prev) +
                                 ", expected " + std::to_string(config_.channels[module - 1]) + "x" +
                                 std::to_string(ph) + "x" + std::to_string(pw));
        input = concat_channels(input, bilinear_upsample(*prev, h, w));
    }
    typename ConvBlock<Scalar>::Cache* c1 = nullptr;
    typename ConvBlock<Scalar>::Cache* c2 = nullptr;
    if (trace) {
        const std::size_t need = 2 * static_cast<std::size_t>(config_.module_count()) + 1;
        if (trace->blocks.size() < need) trace->blocks.resize(need);
        c1 = &trace->blocks[2 * module];
        c2 = &trace->blocks[2 * module + 1];
    }
    const auto& params = this->params_;
    FeatureMap<Scalar> mid = first_[module].forward(params, input, c1);
    return second_[module].forward(params, mid, c2);
}

template <typename Scalar>
std::pair<FeatureMap<Scalar>, std::optional<FeatureMap<Scalar>>>
CascadeModel<Scalar>::refinement_backward(int module, const GeneratorTrace<Scalar>& trace,
                                          const FeatureMap<Scalar>& grad_out,
                                          ParameterSet<Scalar>& grads) const {
    const auto& params = this->params_;
    const FeatureMap<Scalar> dmid = second_[module].backward(params, trace.blocks[2 * module + 1],
                                                             grad_out, &grads);
    const FeatureMap<Scalar> din = first_[module].backward(params, trace.blocks[2 * module], dmid, &grads);
    FeatureMap<Scalar> dlayout = slice_channels(din, 0, config_.classes);
    if (module == 0) return {std::move(dlayout), std::nullopt};
    const auto [ph, pw] = config_.module_resolution(module - 1);
    const FeatureMap<Scalar> dup = slice_channels(din, config_.classes, config_.channels[module - 1]);
    return {std::move(dlayout), bilinear_upsample_backward(dup, ph, pw)};
}

template <typename Scalar>
FeatureMap<Scalar> CascadeModel<Scalar>::features(const FeatureMap<Scalar>& layout) const {
    check_resolution(layout.height, layout.width);
    std::optional<FeatureMap<Scalar>> f;
    for (int i = 0; i < config_.module_count(); ++i) f = refinement_forward(i, layout, f, nullptr);
    return std::move(*f);
}

template <typename Scalar>
FeatureMap<Scalar> CascadeModel<Scalar>::forward(const FeatureMap<Scalar>& layout,
                                                 GeneratorTrace<Scalar>* trace) const {
    check_resolution(layout.height, layout.width);
    if (trace) {
        trace->blocks.assign(2 * static_cast<std::size_t>(config_.module_count()) + 1, {});
        trace->resolutions.clear();
    }
    std::optional<FeatureMap<Scalar>> f;
    for (int i = 0; i < config_.module_count(); ++i) f = refinement_forward(i, layout, f, trace);
    FeatureMap<Scalar> out =
        projection_.forward(this->params_, *f, trace ? &trace->blocks.back() : nullptr);
    if (trace) trace->output = out;
    return out;
}

template <typename Scalar>
void CascadeModel<Scalar>::backward(const GeneratorTrace<Scalar>& trace,
                                    const FeatureMap<Scalar>& grad_output,
                                    ParameterSet<Scalar>& grads) const {
    require_same_shape(trace.output, grad_output, "crn backward");
    FeatureMap<Scalar> df = projection_.backward(this->params_, trace.blocks.back(), grad_output, &grads);
    for (int i = config_.module_count() - 1; i >= 0; --i) {
        auto [dlayout, dprev] = refinement_backward(i, trace, df, grads);
        if (dprev) df = std::move(*dprev);
    }
}

template <typename Scalar>
std::int64_t CascadeModel<Scalar>::activation_elements(int height, int width) const {
    // Resolution is fixed by the configuration; arguments are checked only.
    check_resolution(height, width);
    std::int64_t total = 0;
    for (int i = 0; i < config_.module_count(); ++i) {
        const auto [h, w] = config_.module_resolution(i);
        const std::int64_t px = static_cast<std::int64_t>(h) * w;
        const std::int64_t in = config_.classes + (i > 0 ? config_.channels[i - 1] : 0);
        total += px * (in + 2 * static_cast<std::int64_t>(config_.channels[i]));
    }
    total += static_cast<std::int64_t>(height) * width * 3 * config_.output_multiplicity;
    return total;
}

template class CascadeModel<float>;
template class CascadeModel<double>;

}  // namespace crn
