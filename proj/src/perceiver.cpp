#include "crn/perceiver.hpp"

#include <algorithm>
#include <random>

#include "crn/archive.hpp"
#include "crn/config_json.hpp"
#include "crn/npy.hpp"

namespace crn {

PerceiverSpec PerceiverSpec::vgg19(int width_divisor) {
    if (width_divisor < 1 || 64 % width_divisor != 0)
        throw ConfigError("vgg19: width divisor must divide 64");
    PerceiverSpec s;
    s.variant = "vgg19";
    s.width_divisor = width_divisor;
    s.pool = PoolKind::max;
    s.input_scale = 255.0f;
    s.input_mean = {123.68f, 116.779f, 103.939f};
    struct Stage {
        int convs;
        int channels;
    };
    const Stage stages[] = {{2, 64}, {2, 128}, {4, 256}, {4, 512}, {2, 512}};
    int in = 3;
    for (int st = 0; st < 5; ++st) {
        const int out = stages[st].channels / width_divisor;
        for (int j = 0; j < stages[st].convs; ++j) {
            PerceiverLayer l;
            l.name = "conv" + std::to_string(st + 1) + "_" + std::to_string(j + 1);
            l.in_channels = in;
            l.out_channels = out;
            l.pool_before = st > 0 && j == 0;
            s.layers.push_back(l);
            in = out;
        }
    }
    s.taps = {"input", "conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"};
    return s;
}

PerceiverSpec PerceiverSpec::random(std::vector<int> channels, std::uint64_t seed) {
    if (channels.size() != 3) throw ConfigError("random perceiver: exactly three channel counts expected");
    PerceiverSpec s;
    s.variant = "random";
    s.pool = PoolKind::average;
    s.seed = seed;
    int in = 3;
    for (int i = 0; i < 3; ++i) {
        s.layers.push_back({"conv" + std::to_string(i + 1), in, channels[i], i > 0});
        in = channels[i];
    }
    s.taps = {"input", "conv1", "conv2", "conv3"};
    return s;
}

int PerceiverSpec::total_stride() const {
    int stride = 1;
    for (const auto& l : layers)
        if (l.pool_before) stride *= 2;
    return stride;
}

void PerceiverSpec::check_resolution(int height, int width) const {
    const int s = total_stride();
    if (height <= 0 || width <= 0 || height % s != 0 || width % s != 0)
        throw DimensionError("perceiver: image " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not divisible by the cumulative stride " + std::to_string(s));
}

std::vector<TapShape> PerceiverSpec::tap_shapes(int height, int width) const {
    check_resolution(height, width);
    std::vector<TapShape> shapes;
    shapes.push_back({3, height, width});
    int h = height, w = width;
    for (const auto& l : layers) {
        if (l.pool_before) {
            h /= 2;
            w /= 2;
        }
        if (std::find(taps.begin(), taps.end(), l.name) != taps.end())
            shapes.push_back({l.out_channels, h, w});
    }
    return shapes;
}

std::vector<std::pair<int, int>> PerceiverSpec::tap_resolutions(int height, int width) const {
    std::vector<std::pair<int, int>> r;
    for (const auto& s : tap_shapes(height, width)) r.emplace_back(s.height, s.width);
    return r;
}

void PerceiverSpec::validate() const {
    if (taps.empty() || taps.front() != "input") throw SchemaError("perceiver: tap 0 must be \"input\"");
    if (layers.empty()) throw SchemaError("perceiver: no layers");
    int in = 3;
    for (const auto& l : layers) {
        if (l.in_channels != in || l.out_channels <= 0)
            throw SchemaError("perceiver: layer " + l.name + " has inconsistent channel counts");
        in = l.out_channels;
    }
    std::size_t last = 0;
    for (std::size_t t = 1; t < taps.size(); ++t) {
        auto it = std::find_if(layers.begin(), layers.end(), [&](const auto& l) { return l.name == taps[t]; });
        if (it == layers.end()) throw SchemaError("perceiver: tap \"" + taps[t] + "\" names no layer");
        const auto idx = static_cast<std::size_t>(it - layers.begin()) + 1;
        if (idx <= last) throw SchemaError("perceiver: taps must follow layer order");
        last = idx;
    }
}

nlohmann::json PerceiverSpec::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers)
        layers_json.push_back({{"name", l.name},
                               {"in_channels", l.in_channels},
                               {"out_channels", l.out_channels},
                               {"pool_before", l.pool_before}});
    return {{"variant", variant},
            {"layers", layers_json},
            {"taps", taps},
            {"pool", pool == PoolKind::max ? "max" : "average"},
            {"input_scale", input_scale},
            {"input_mean", input_mean},
            {"width_divisor", width_divisor},
            {"seed", seed}};
}

PerceiverSpec PerceiverSpec::from_json(const nlohmann::json& j) {
    try {
        PerceiverSpec s;
        s.variant = j.at("variant").get<std::string>();
        for (const auto& l : j.at("layers"))
            s.layers.push_back({l.at("name").get<std::string>(), l.at("in_channels").get<int>(),
                                l.at("out_channels").get<int>(), l.at("pool_before").get<bool>()});
        s.taps = j.at("taps").get<std::vector<std::string>>();
        const auto pool = j.at("pool").get<std::string>();
        if (pool != "max" && pool != "average") throw SchemaError("perceiver: unknown pool kind " + pool);
        s.pool = pool == "max" ? PoolKind::max : PoolKind::average;
        s.input_scale = j.at("input_scale").get<float>();
        s.input_mean = j.at("input_mean").get<std::array<float, 3>>();
        s.width_divisor = j.value("width_divisor", 1);
        s.seed = j.value("seed", std::uint64_t{0});
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("perceiver spec: ") + e.what());
    }
}

template <typename Scalar>
Perceiver<Scalar>::Perceiver(PerceiverSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (const auto& l : spec_.layers) {
        ConvBlockSpec b;
        b.in_channels = l.in_channels;
        b.out_channels = l.out_channels;
        b.kernel = 3;
        b.normalize = false;
        b.activate = true;
        b.slope = 0.0;
        blocks_.emplace_back(params_, l.name, b);
    }
    tap_layer_.push_back(-1);
    for (std::size_t t = 1; t < spec_.taps.size(); ++t)
        for (std::size_t i = 0; i < spec_.layers.size(); ++i)
            if (spec_.layers[i].name == spec_.taps[t]) tap_layer_.push_back(static_cast<int>(i));
}

template <typename Scalar>
Perceiver<Scalar> Perceiver<Scalar>::seeded(PerceiverSpec spec) {
    Perceiver p(std::move(spec));
    std::mt19937_64 rng(p.spec_.seed);
    for (const auto& b : p.blocks_) b.initialize(p.params_, rng);
    return p;
}

template <typename Scalar>
PerceiverTaps<Scalar> Perceiver<Scalar>::extract_taps(const FeatureMap<Scalar>& image,
                                                      PerceiverTrace<Scalar>* trace) const {
    if (image.channels() != 3) throw DimensionError("perceiver: expected an RGB image, got " + shape_string(image));
    spec_.check_resolution(image.height, image.width);
    PerceiverTaps<Scalar> taps;
    taps.push_back(image);

    FeatureMap<Scalar> x = image;
    x.data *= static_cast<Scalar>(spec_.input_scale);
    for (int c = 0; c < 3; ++c) x.data.row(c).array() -= static_cast<Scalar>(spec_.input_mean[c]);

    // Layers past the deepest tap do not contribute and are skipped.
    const int last_layer = tap_layer_.back();
    if (trace) {
        trace->blocks.assign(static_cast<std::size_t>(last_layer + 1), {});
        trace->argmax.assign(static_cast<std::size_t>(last_layer + 1), {});
        trace->input_resolution.assign(static_cast<std::size_t>(last_layer + 1), {});
    }
    std::size_t next_tap = 1;
    for (int i = 0; i <= last_layer; ++i) {
        const auto& layer = spec_.layers[static_cast<std::size_t>(i)];
        if (trace) trace->input_resolution[i] = {x.height, x.width};
        if (layer.pool_before) {
            if (spec_.pool == PoolKind::max)
                x = max_pool2(x, trace ? &trace->argmax[i] : nullptr);
            else
                x = block_average(x, x.height / 2, x.width / 2);
        }
        x = blocks_[i].forward(params_, x, trace ? &trace->blocks[i] : nullptr);
        if (next_tap < tap_layer_.size() && tap_layer_[next_tap] == i) {
            taps.push_back(x);
            ++next_tap;
        }
    }
    return taps;
}

template <typename Scalar>
FeatureMap<Scalar> Perceiver<Scalar>::backward(const PerceiverTrace<Scalar>& trace,
                                               const PerceiverTaps<Scalar>& tap_grads) const {
    if (tap_grads.size() != spec_.taps.size())
        throw DimensionError("perceiver backward: expected " + std::to_string(spec_.taps.size()) +
                             " tap gradients, got " + std::to_string(tap_grads.size()));
    const int last_layer = tap_layer_.back();
    FeatureMap<Scalar> g;
    int tap = static_cast<int>(tap_layer_.size()) - 1;
    for (int i = last_layer; i >= 0; --i) {
        while (tap > 0 && tap_layer_[tap] == i) {
            const auto& tg = tap_grads[static_cast<std::size_t>(tap)];
            if (tg.size() > 0) {
                if (g.size() == 0)
                    g = tg;
                else
                    g.data += tg.data;
            }
            --tap;
        }
        if (g.size() == 0) continue;  // nothing flows from deeper layers yet
        g = blocks_[i].backward(params_, trace.blocks[i], g, nullptr);
        const auto& layer = spec_.layers[static_cast<std::size_t>(i)];
        if (layer.pool_before) {
            const auto [h, w] = trace.input_resolution[i];
            g = spec_.pool == PoolKind::max ? max_pool2_backward(g, trace.argmax[i], h, w)
                                            : block_average_backward(g, h, w);
        }
    }
    const auto& image_grad = tap_grads[0];
    if (g.size() == 0) {
        if (image_grad.size() == 0) throw ArgumentError("perceiver backward: all tap gradients are empty");
        return image_grad;
    }
    g.data *= static_cast<Scalar>(spec_.input_scale);
    if (image_grad.size() > 0) g.data += image_grad.data;
    return g;
}

nlohmann::json perceiver_header(const PerceiverSpec& spec) {
    return {{"kind", "perceiver"}, {"taps", spec.taps}, {"spec", spec.to_json()}};
}

template <typename Scalar>
void save_perceiver(const std::filesystem::path& dir, const Perceiver<Scalar>& perceiver) {
    write_archive(dir, perceiver_header(perceiver.spec()), perceiver.parameters());
}

template <typename Scalar>
Perceiver<Scalar> load_perceiver_weights(const std::filesystem::path& archive_dir) {
    const WeightArchive archive = read_archive(archive_dir);
    if (archive.header.value("kind", "") != "perceiver")
        throw SchemaError("archive " + archive_dir.string() + " does not hold a perceiver");
    if (!archive.header.contains("spec")) throw SchemaError("perceiver archive header lacks \"spec\"");
    PerceiverSpec spec = PerceiverSpec::from_json(archive.header["spec"]);
    if (spec.variant == "vgg19") {
        const PerceiverSpec expected = PerceiverSpec::vgg19(spec.width_divisor);
        if (expected.to_json()["layers"] != spec.to_json()["layers"] || expected.taps != spec.taps)
            throw SchemaError("perceiver archive: layer list does not match VGG-19");
    }
    Perceiver<Scalar> p(std::move(spec));
    assign_tensors(archive.tensors, p.mutable_parameters());
    return p;
}

PerceiverSpec convert_npy_perceiver(const std::filesystem::path& npy_dir,
                                    const std::filesystem::path& archive_dir) {
    const auto first = read_npy(npy_dir / "conv1_1.bias.npy");
    if (first.shape.size() != 1 || first.shape[0] <= 0 || 64 % first.shape[0] != 0)
        throw SchemaError("conv1_1.bias.npy: cannot infer the VGG-19 width");
    const PerceiverSpec spec = PerceiverSpec::vgg19(64 / first.shape[0]);
    Perceiver<float> p(spec);
    auto& params = p.mutable_parameters();
    for (auto& param : params) {
        const auto file = npy_dir / (param.name + ".npy");
        if (!std::filesystem::exists(file)) throw SchemaError("missing tensor file " + file.filename().string());
        const NpyArray a = read_npy(file);
        if (a.shape != param.shape) {
            std::string want;
            for (int d : param.shape) want += std::to_string(d) + ",";
            throw SchemaError("tensor \"" + param.name + "\" in " + file.filename().string() +
                              " has the wrong shape (expected [" + want + "])");
        }
        param.values = Eigen::Map<const Vector<float>>(a.values.data(), static_cast<Eigen::Index>(a.values.size()));
    }
    save_perceiver(archive_dir, p);
    return spec;
}

template class Perceiver<float>;
template class Perceiver<double>;
template void save_perceiver(const std::filesystem::path&, const Perceiver<float>&);
template void save_perceiver(const std::filesystem::path&, const Perceiver<double>&);
template Perceiver<float> load_perceiver_weights(const std::filesystem::path&);
template Perceiver<double> load_perceiver_weights(const std::filesystem::path&);

}  // namespace crn
