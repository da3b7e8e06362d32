#include "crn/baselines.hpp"

#include <algorithm>

#include "crn/config_json.hpp"

namespace crn {

// ----------------------------------------------------------------------------
// Full-resolution network
// ----------------------------------------------------------------------------

void FullResConfig::validate() const {
    if (layers < 1 || layers > 30) throw ConfigError("fullres: layers must lie in [1, 30]");
    if (features <= 0) throw ConfigError("fullres: features must be positive");
    if (max_h <= 0 || max_w <= 0) throw ConfigError("fullres: maximum resolution must be positive");
    if (classes <= 0) throw ConfigError("fullres: classes must be positive");
    if (output_multiplicity < 1) throw ConfigError("fullres: output_multiplicity must be >= 1");
    if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("fullres: slope must lie in [0, 1)");
}

nlohmann::json FullResConfig::to_json() const {
    return {{"layers", layers},   {"features", features}, {"max_h", max_h},
            {"max_w", max_w},     {"classes", classes},   {"output_multiplicity", output_multiplicity},
            {"slope", slope}};
}

FullResConfig FullResConfig::from_json(const nlohmann::json& j) {
    StrictObject obj(j, "fullres config");
    FullResConfig c;
    obj.get("layers", c.layers);
    obj.get("features", c.features);
    obj.get("max_h", c.max_h);
    obj.get("max_w", c.max_w);
    obj.require("classes", c.classes);
    obj.get("output_multiplicity", c.output_multiplicity);
    obj.get("slope", c.slope);
    obj.finish();
    c.validate();
    return c;
}

std::vector<int> FullResConfig::uncapped_dilations() const {
    std::vector<int> d;
    for (int l = 0; l < layers; ++l) d.push_back(1 << (layers - 1 - l));
    return d;
}

std::vector<int> FullResConfig::dilations(int height, int width) const {
    int cap = 1;
    while (cap * 2 <= std::min(height, width) / 2) cap *= 2;
    std::vector<int> d;
    int current = std::min(1 << (layers - 1), cap);
    for (int l = 0; l < layers; ++l) {
        d.push_back(current);
        current = std::max(1, current / 2);
    }
    return d;
}

std::int64_t param_count(const FullResConfig& config) {
    config.validate();
    const std::int64_t f = config.features;
    const std::int64_t out = 3 * static_cast<std::int64_t>(config.output_multiplicity);
    std::int64_t total = 9 * config.classes * f + 3 * f;
    total += (config.layers - 1) * (9 * f * f + 3 * f);
    total += f * out + out;
    return total;
}

template <typename Scalar>
FullResNet<Scalar>::FullResNet(FullResConfig config) : config_(std::move(config)) {
    config_.validate();
    for (int l = 0; l < config_.layers; ++l) {
        ConvBlockSpec s;
        s.in_channels = l == 0 ? config_.classes : config_.features;
        s.out_channels = config_.features;
        s.slope = config_.slope;
        blocks_.emplace_back(this->params_, "layer" + std::to_string(l), s);
    }
    ConvBlockSpec p;
    p.in_channels = config_.features;
    p.out_channels = 3 * config_.output_multiplicity;
    p.kernel = 1;
    p.normalize = false;
    p.activate = false;
    projection_ = ConvBlock<Scalar>(this->params_, "projection", p);
}

template <typename Scalar>
void FullResNet<Scalar>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& b : blocks_) b.initialize(this->params_, rng);
    projection_.initialize(this->params_, rng);
    center_output_bias(this->params_);
}

template <typename Scalar>
void FullResNet<Scalar>::check_resolution(int height, int width) const {
    if (height <= 0 || width <= 0) throw DimensionError("fullres: empty layout");
    if (height > config_.max_h || width > config_.max_w)
        throw CapacityError("fullres: " + std::to_string(height) + "x" + std::to_string(width) +
                            " exceeds the configured maximum " + std::to_string(config_.max_h) + "x" +
                            std::to_string(config_.max_w));
}

template <typename Scalar>
FeatureMap<Scalar> FullResNet<Scalar>::forward(const FeatureMap<Scalar>& layout,
                                               GeneratorTrace<Scalar>* trace) const {
    check_resolution(layout.height, layout.width);
    if (layout.channels() != config_.classes)
        throw DimensionError("fullres: layout has " + std::to_string(layout.channels()) + " channels, expected " +
                             std::to_string(config_.classes));
    const auto dil = config_.dilations(layout.height, layout.width);
    if (trace) trace->blocks.assign(blocks_.size() + 1, {});
    FeatureMap<Scalar> x = layout;
    for (std::size_t l = 0; l < blocks_.size(); ++l)
        x = blocks_[l].forward(this->params_, x, trace ? &trace->blocks[l] : nullptr, dil[l]);
    FeatureMap<Scalar> out = projection_.forward(this->params_, x, trace ? &trace->blocks.back() : nullptr);
    if (trace) trace->output = out;
    return out;
}

template <typename Scalar>
void FullResNet<Scalar>::backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                                  ParameterSet<Scalar>& grads) const {
    require_same_shape(trace.output, grad_output, "fullres backward");
    FeatureMap<Scalar> g = projection_.backward(this->params_, trace.blocks.back(), grad_output, &grads);
    for (std::size_t l = blocks_.size(); l-- > 0;)
        g = blocks_[l].backward(this->params_, trace.blocks[l], g, &grads, l > 0);
}

template <typename Scalar>
std::int64_t FullResNet<Scalar>::activation_elements(int height, int width) const {
    const std::int64_t px = static_cast<std::int64_t>(height) * width;
    return px * (config_.classes + static_cast<std::int64_t>(config_.layers) * config_.features +
                 3 * config_.output_multiplicity);
}

// ----------------------------------------------------------------------------
// Encoder-decoder
// ----------------------------------------------------------------------------

int EncoderDecoderConfig::level_channels(int s) const {
    return std::min(base_channels << s, max_channels);
}

void EncoderDecoderConfig::validate() const {
    if (depth < 1 || depth > 10) throw ConfigError("encdec: depth must lie in [1, 10]");
    if (base_channels <= 0 || max_channels <= 0) throw ConfigError("encdec: channel counts must be positive");
    if (classes <= 0) throw ConfigError("encdec: classes must be positive");
    if (output_multiplicity < 1) throw ConfigError("encdec: output_multiplicity must be >= 1");
    if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("encdec: slope must lie in [0, 1)");
}

nlohmann::json EncoderDecoderConfig::to_json() const {
    return {{"depth", depth},       {"base_channels", base_channels},
            {"max_channels", max_channels}, {"skip_connections", skip_connections},
            {"classes", classes},   {"output_multiplicity", output_multiplicity},
            {"slope", slope}};
}

EncoderDecoderConfig EncoderDecoderConfig::from_json(const nlohmann::json& j) {
    StrictObject obj(j, "encdec config");
    EncoderDecoderConfig c;
    obj.get("depth", c.depth);
    obj.get("base_channels", c.base_channels);
    obj.get("max_channels", c.max_channels);
    obj.get("skip_connections", c.skip_connections);
    obj.require("classes", c.classes);
    obj.get("output_multiplicity", c.output_multiplicity);
    obj.get("slope", c.slope);
    obj.finish();
    c.validate();
    return c;
}

namespace {

std::int64_t block_params(std::int64_t in, std::int64_t out) { return 9 * in * out + 3 * out; }

}  // namespace

std::int64_t param_count(const EncoderDecoderConfig& config) {
    config.validate();
    std::int64_t total = 0;
    for (int s = 0; s < config.depth; ++s) {
        const std::int64_t in = s == 0 ? config.classes : config.level_channels(s - 1);
        const std::int64_t ch = config.level_channels(s);
        total += block_params(in, ch) + block_params(ch, ch);
    }
    const std::int64_t bottleneck = config.level_channels(config.depth);
    total += block_params(config.level_channels(config.depth - 1), bottleneck) +
             block_params(bottleneck, bottleneck);
    for (int s = config.depth - 1; s >= 0; --s) {
        const std::int64_t ch = config.level_channels(s);
        const std::int64_t in = config.level_channels(s + 1) + (config.skip_connections ? ch : 0);
        total += block_params(in, ch) + block_params(ch, ch);
    }
    const std::int64_t out = 3 * static_cast<std::int64_t>(config.output_multiplicity);
    total += config.level_channels(0) * out + out;
    return total;
}

template <typename Scalar>
EncoderDecoder<Scalar>::EncoderDecoder(EncoderDecoderConfig config) : config_(std::move(config)) {
    config_.validate();
    auto add = [this](const std::string& name, int in, int out) {
        ConvBlockSpec s;
        s.in_channels = in;
        s.out_channels = out;
        s.slope = config_.slope;
        blocks_.emplace_back(this->params_, name, s);
    };
    const int depth = config_.depth;
    for (int s = 0; s < depth; ++s) {
        const int in = s == 0 ? config_.classes : config_.level_channels(s - 1);
        const int ch = config_.level_channels(s);
        add("enc" + std::to_string(s) + ".conv1", in, ch);
        add("enc" + std::to_string(s) + ".conv2", ch, ch);
    }
    const int bottleneck = config_.level_channels(depth);
    add("bottleneck.conv1", config_.level_channels(depth - 1), bottleneck);
    add("bottleneck.conv2", bottleneck, bottleneck);
    for (int s = depth - 1; s >= 0; --s) {
        const int ch = config_.level_channels(s);
        const int in = config_.level_channels(s + 1) + (config_.skip_connections ? ch : 0);
        add("dec" + std::to_string(s) + ".conv1", in, ch);
        add("dec" + std::to_string(s) + ".conv2", ch, ch);
    }
    ConvBlockSpec p;
    p.in_channels = config_.level_channels(0);
    p.out_channels = 3 * config_.output_multiplicity;
    p.kernel = 1;
    p.normalize = false;
    p.activate = false;
    projection_ = ConvBlock<Scalar>(this->params_, "projection", p);
}

template <typename Scalar>
void EncoderDecoder<Scalar>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& b : blocks_) b.initialize(this->params_, rng);
    projection_.initialize(this->params_, rng);
    center_output_bias(this->params_);
}

template <typename Scalar>
void EncoderDecoder<Scalar>::check_resolution(int height, int width) const {
    const int div = 1 << config_.depth;
    if (height <= 0 || width <= 0 || height % div != 0 || width % div != 0)
        throw DimensionError("encdec: " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not divisible by 2^depth = " + std::to_string(div));
}

template <typename Scalar>
std::pair<int, int> EncoderDecoder<Scalar>::bottleneck_resolution(int height, int width) const {
    check_resolution(height, width);
    return {height >> config_.depth, width >> config_.depth};
}

template <typename Scalar>
FeatureMap<Scalar> EncoderDecoder<Scalar>::forward(const FeatureMap<Scalar>& layout,
                                                   GeneratorTrace<Scalar>* trace) const {
    check_resolution(layout.height, layout.width);
    if (layout.channels() != config_.classes)
        throw DimensionError("encdec: layout has " + std::to_string(layout.channels()) + " channels, expected " +
                             std::to_string(config_.classes));
    const int depth = config_.depth;
    const auto& params = this->params_;
    if (trace) {
        trace->blocks.assign(blocks_.size() + 1, {});
        trace->resolutions.clear();
        for (int s = 0; s <= depth; ++s) trace->resolutions.emplace_back(layout.height >> s, layout.width >> s);
    }
    auto cache = [trace](std::size_t i) { return trace ? &trace->blocks[i] : nullptr; };

    std::vector<FeatureMap<Scalar>> skips(static_cast<std::size_t>(depth));
    FeatureMap<Scalar> x = layout;
    std::size_t b = 0;
    for (int s = 0; s < depth; ++s) {
        x = blocks_[b].forward(params, x, cache(b));
        ++b;
        x = blocks_[b].forward(params, x, cache(b));
        ++b;
        if (config_.skip_connections) skips[s] = x;
        x = block_average(x, x.height / 2, x.width / 2);
    }
    x = blocks_[b].forward(params, x, cache(b));
    ++b;
    x = blocks_[b].forward(params, x, cache(b));
    ++b;
    for (int s = depth - 1; s >= 0; --s) {
        FeatureMap<Scalar> up = bilinear_upsample(x, layout.height >> s, layout.width >> s);
        FeatureMap<Scalar> in = config_.skip_connections ? concat_channels(up, skips[s]) : std::move(up);
        x = blocks_[b].forward(params, in, cache(b));
        ++b;
        x = blocks_[b].forward(params, x, cache(b));
        ++b;
    }
    FeatureMap<Scalar> out = projection_.forward(params, x, trace ? &trace->blocks.back() : nullptr);
    if (trace) trace->output = out;
    return out;
}

template <typename Scalar>
void EncoderDecoder<Scalar>::backward(const GeneratorTrace<Scalar>& trace, const FeatureMap<Scalar>& grad_output,
                                      ParameterSet<Scalar>& grads) const {
    require_same_shape(trace.output, grad_output, "encdec backward");
    const int depth = config_.depth;
    const auto& params = this->params_;
    std::vector<FeatureMap<Scalar>> dskip(static_cast<std::size_t>(depth));

    FeatureMap<Scalar> g = projection_.backward(params, trace.blocks.back(), grad_output, &grads);
    std::size_t b = blocks_.size();
    for (int s = 0; s < depth; ++s) {
        --b;
        g = blocks_[b].backward(params, trace.blocks[b], g, &grads);
        --b;
        FeatureMap<Scalar> din = blocks_[b].backward(params, trace.blocks[b], g, &grads);
        const int up_ch = config_.level_channels(s + 1);
        if (config_.skip_connections) dskip[s] = slice_channels(din, up_ch, config_.level_channels(s));
        const auto [h, w] = trace.resolutions[static_cast<std::size_t>(s) + 1];
        g = bilinear_upsample_backward(config_.skip_connections ? slice_channels(din, 0, up_ch) : din, h, w);
    }
    --b;
    g = blocks_[b].backward(params, trace.blocks[b], g, &grads);
    --b;
    g = blocks_[b].backward(params, trace.blocks[b], g, &grads);
    for (int s = depth - 1; s >= 0; --s) {
        const auto [h, w] = trace.resolutions[static_cast<std::size_t>(s)];
        g = block_average_backward(g, h, w);
        if (config_.skip_connections) g.data += dskip[s].data;
        --b;
        g = blocks_[b].backward(params, trace.blocks[b], g, &grads);
        --b;
        g = blocks_[b].backward(params, trace.blocks[b], g, &grads, s > 0);
    }
}

template <typename Scalar>
std::int64_t EncoderDecoder<Scalar>::activation_elements(int height, int width) const {
    check_resolution(height, width);
    std::int64_t total = static_cast<std::int64_t>(height) * width * config_.classes;
    for (int s = 0; s <= config_.depth; ++s) {
        const std::int64_t px = static_cast<std::int64_t>(height >> s) * (width >> s);
        const int mult = s < config_.depth ? 4 : 2;  // encoder + decoder layers vs bottleneck
        total += px * mult * config_.level_channels(s);
    }
    total += static_cast<std::int64_t>(height) * width * 3 * config_.output_multiplicity;
    return total;
}

template class FullResNet<float>;
template class FullResNet<double>;
template class EncoderDecoder<float>;
template class EncoderDecoder<double>;

}  // namespace crn
