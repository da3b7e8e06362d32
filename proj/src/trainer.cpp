#include "crn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "crn/config_json.hpp"
#include "crn/image_io.hpp"
#include "crn/models.hpp"

namespace crn {

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::eq1: return "eq1";
        case LossKind::eq2: return "eq2";
        case LossKind::eq3: return "eq3";
        case LossKind::eq4: return "eq4";
    }
    return "eq1";
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "eq1") return LossKind::eq1;
    if (s == "eq2") return LossKind::eq2;
    if (s == "eq3") return LossKind::eq3;
    if (s == "eq4") return LossKind::eq4;
    throw ConfigError("unknown loss \"" + s + "\" (expected eq1, eq2, eq3 or eq4)");
}

void TrainConfig::validate() const {
    if (epochs <= 0) throw ConfigError("train: epochs must be positive");
    if (steps_per_epoch < 0) throw ConfigError("train: steps_per_epoch must be >= 0");
    if (optimizer != "adam" && optimizer != "sgd")
        throw ConfigError("train: optimizer must be \"adam\" or \"sgd\", got \"" + optimizer + "\"");
    if (!(step_size >= 0.0) || !std::isfinite(step_size)) throw ConfigError("train: step_size must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("train: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
    if (k < 1) throw ConfigError("train: k must be >= 1");
    if ((loss == LossKind::eq1 || loss == LossKind::eq4) && k != 1)
        throw ConfigError("train: loss " + to_string(loss) + " compares a single output, k must be 1");
    if (lambda_rescale_epoch < 0) throw ConfigError("train: lambda_rescale_epoch must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"optimizer", optimizer},
            {"step_size", step_size},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"seed", seed},
            {"loss", to_string(loss)},
            {"k", k},
            {"lambda_rescale_epoch", lambda_rescale_epoch},
            {"checkpoint_every", checkpoint_every},
            {"max_steps", max_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    StrictObject obj(j, "train config");
    TrainConfig c;
    obj.get("epochs", c.epochs);
    obj.get("steps_per_epoch", c.steps_per_epoch);
    obj.get("optimizer", c.optimizer);
    obj.get("step_size", c.step_size);
    obj.get("beta1", c.beta1);
    obj.get("beta2", c.beta2);
    obj.get("epsilon", c.epsilon);
    obj.get("seed", c.seed);
    std::string loss = "eq1";
    obj.get("loss", loss);
    c.loss = loss_kind_from_string(loss);
    obj.get("k", c.k);
    obj.get("lambda_rescale_epoch", c.lambda_rescale_epoch);
    obj.get("checkpoint_every", c.checkpoint_every);
    obj.get("max_steps", c.max_steps);
    obj.finish();
    c.validate();
    return c;
}

std::vector<double> TrainingState::running_means() const {
    std::vector<double> m(term_sums.size(), 0.0);
    if (term_count == 0) return m;
    for (std::size_t l = 0; l < m.size(); ++l) m[l] = term_sums[l] / static_cast<double>(term_count);
    return m;
}

// ----------------------------------------------------------------------------
// Loss evaluation
// ----------------------------------------------------------------------------

LossEvaluator::LossEvaluator(const Perceiver<float>& perceiver, LossKind kind)
    : perceiver_(perceiver), kind_(kind) {}

std::vector<TapShape> LossEvaluator::tap_shapes(int height, int width) const {
    if (kind_ == LossKind::eq4) return {TapShape{3, height, width}};
    return perceiver_.spec().tap_shapes(height, width);
}

PerceiverTaps<float> LossEvaluator::taps(const FeatureMap<float>& image, PerceiverTrace<float>* trace) const {
    if (kind_ == LossKind::eq4) return {image};
    return perceiver_.extract_taps(image, trace);
}

std::vector<FeatureMap<float>> LossEvaluator::masks(const SemanticLayout& layout) const {
    if (kind_ != LossKind::eq3) return {};
    return class_masks(layout, perceiver_.spec().tap_resolutions(layout.height(), layout.width()));
}

LossReport LossEvaluator::evaluate(const FeatureMap<float>& output, const PerceiverTaps<float>& reference_taps,
                                   const std::vector<FeatureMap<float>>& masks, const LayerWeights& lambda,
                                   FeatureMap<float>* grad_output) const {
    const auto images = split_images(output);
    const std::size_t k = images.size();
    const bool single = kind_ == LossKind::eq1 || kind_ == LossKind::eq4;
    if (single && k != 1)
        throw DimensionError("loss " + to_string(kind_) + " expects one output image, got " + std::to_string(k));

    if (kind_ == LossKind::eq4) {
        FeatureMap<float> g;
        LossReport r = image_space_loss(reference_taps.at(0), images[0], lambda.at(0), grad_output ? &g : nullptr);
        if (grad_output) *grad_output = std::move(g);
        return r;
    }

    std::vector<PerceiverTaps<float>> syn(k);
    std::vector<PerceiverTrace<float>> traces(k);
    for (std::size_t u = 0; u < k; ++u) syn[u] = perceiver_.extract_taps(images[u], grad_output ? &traces[u] : nullptr);

    std::vector<PerceiverTaps<float>> tap_grads;
    LossReport r;
    auto* gp = grad_output ? &tap_grads : nullptr;
    switch (kind_) {
        case LossKind::eq1:
            tap_grads.resize(1);
            r = feature_matching_loss(reference_taps, syn[0], lambda, grad_output ? &tap_grads[0] : nullptr);
            break;
        case LossKind::eq2: r = hindsight_loss(reference_taps, syn, lambda, gp); break;
        case LossKind::eq3: r = masked_diversity_loss(reference_taps, syn, lambda, masks, gp); break;
        case LossKind::eq4: break;
    }
    if (grad_output) {
        std::vector<FeatureMap<float>> image_grads(k);
        for (std::size_t u = 0; u < k; ++u) {
            if (tap_grads[u].empty())
                image_grads[u] = FeatureMap<float>::Zero(3, images[u].height, images[u].width);
            else
                image_grads[u] = perceiver_.backward(traces[u], tap_grads[u]);
        }
        *grad_output = join_images(image_grads);
    }
    return r;
}

// ----------------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------------

namespace {

class Optimizer {
public:
    Optimizer(const TrainConfig& config, const ParameterSet<float>& params)
        : config_(config), m_(params.zeros_like()), v_(params.zeros_like()) {}

    void step(ParameterSet<float>& params, const ParameterSet<float>& grads) {
        ++t_;
        const double lr = config_.step_size;
        if (config_.optimizer == "sgd") {
            for (std::size_t i = 0; i < params.size(); ++i)
                params.values(i) -= static_cast<float>(lr) * grads.values(i);
            return;
        }
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        const float alpha = static_cast<float>(lr * std::sqrt(c2) / c1);
        const float eps = static_cast<float>(config_.epsilon * std::sqrt(c2));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& m = m_.values(i);
            auto& v = v_.values(i);
            const auto& g = grads.values(i);
            m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * g;
            v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * g.cwiseProduct(g);
            params.values(i).array() -= alpha * m.array() / (v.array().sqrt() + eps);
        }
    }

private:
    const TrainConfig& config_;
    ParameterSet<float> m_;
    ParameterSet<float> v_;
    std::int64_t t_ = 0;
};

void check_dataset(const Generator<float>& model, const std::vector<TrainingPair>& dataset) {
    if (dataset.empty()) throw ArgumentError("train: empty dataset");
    for (const auto& pair : dataset) {
        if (pair.layout.classes() != model.classes())
            throw DimensionError("pair " + pair.id + ": layout has " + std::to_string(pair.layout.classes()) +
                                 " classes, model expects " + std::to_string(model.classes()));
        model.check_resolution(pair.layout.height(), pair.layout.width());
        if (pair.image.channels() != 3 || pair.image.height != pair.layout.height() ||
            pair.image.width != pair.layout.width())
            throw DimensionError("pair " + pair.id + ": image " + shape_string(pair.image) +
                                 " does not match layout " + shape_string(pair.layout.values));
    }
}

std::string step_dir_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%08lld", static_cast<long long>(step));
    return buf;
}

}  // namespace

// ----------------------------------------------------------------------------
// Training loop
// ----------------------------------------------------------------------------

TrainResult train(Generator<float>& model, const Perceiver<float>& perceiver,
                  const std::vector<TrainingPair>& dataset, const TrainConfig& config,
                  const TrainOutputs& outputs) {
    config.validate();
    check_dataset(model, dataset);
    if (model.output_multiplicity() != config.k)
        throw ConfigError("train: k = " + std::to_string(config.k) + " but the model emits " +
                          std::to_string(model.output_multiplicity()) + " images");

    const LossEvaluator loss(perceiver, config.loss);
    const int h = dataset[0].layout.height(), w = dataset[0].layout.width();
    for (const auto& pair : dataset)
        if (pair.layout.height() != h || pair.layout.width() != w)
            throw DimensionError("train: pairs must share one resolution (" + pair.id + " differs)");

    std::vector<PerceiverTaps<float>> ref_taps;
    std::vector<std::vector<FeatureMap<float>>> masks;
    for (const auto& pair : dataset) {
        ref_taps.push_back(loss.taps(pair.image));
        masks.push_back(loss.masks(pair.layout));
    }

    TrainResult result;
    TrainingState& st = result.state;
    st.lambda = lambda_init(loss.tap_shapes(h, w));
    st.term_sums.assign(st.lambda.size(), 0.0);

    const int n = static_cast<int>(dataset.size());
    const int per_epoch = config.steps_per_epoch > 0 ? config.steps_per_epoch : n;
    std::int64_t total_steps = static_cast<std::int64_t>(config.epochs) * per_epoch;
    if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

    std::mt19937_64 rng(config.seed);
    std::vector<int> order(static_cast<std::size_t>(n));
    ParameterSet<float> grads = model.parameters().zeros_like();
    Optimizer optimizer(config, model.parameters());
    GeneratorTrace<float> trace;
    FeatureMap<float> grad_output;

    auto write = [&](const nlohmann::json& j) {
        if (outputs.metrics) *outputs.metrics << j.dump() << '\n';
    };

    for (int epoch = 0; epoch < config.epochs && st.step < total_steps; ++epoch) {
        st.epoch = epoch;
        if (!st.rescaled && epoch == config.lambda_rescale_epoch && epoch > 0) {
            const auto means = st.running_means();
            const LayerWeights before = st.lambda;
            st.lambda = lambda_rescale(st.lambda, means);
            st.rescaled = true;
            write({{"event", "lambda_rescale"},
                   {"epoch", epoch},
                   {"step", st.step},
                   {"lambda_before", before},
                   {"lambda_after", st.lambda},
                   {"running_means", means}});
        }
        for (int s = 0; s < per_epoch && st.step < total_steps; ++s) {
            if (s % n == 0) {
                std::iota(order.begin(), order.end(), 0);
                std::shuffle(order.begin(), order.end(), rng);
            }
            const int idx = order[static_cast<std::size_t>(s % n)];
            const auto& pair = dataset[static_cast<std::size_t>(idx)];

            const FeatureMap<float> out = model.forward(pair.layout.values, &trace);
            LossReport report = loss.evaluate(out, ref_taps[static_cast<std::size_t>(idx)],
                                              masks[static_cast<std::size_t>(idx)], st.lambda, &grad_output);
            if (!std::isfinite(report.total)) {
                std::ostringstream msg;
                msg << "non-finite loss (" << report.total << ") at step " << st.step << " on pair " << pair.id;
                throw InvariantError(msg.str());
            }
            if (!st.rescaled) {
                for (std::size_t l = 0; l < st.term_sums.size(); ++l) st.term_sums[l] += report.per_layer[l];
                ++st.term_count;
            }

            grads.set_zero();
            model.backward(trace, grad_output, grads);
            optimizer.step(model.parameters(), grads);

            nlohmann::json line = report.to_json();
            line["step"] = st.step;
            line["epoch"] = epoch;
            write(line);
            result.step_totals.push_back(report.total);
            ++st.step;

            if (outputs.checkpoint_dir && config.checkpoint_every > 0 && st.step % config.checkpoint_every == 0)
                save_checkpoint(*outputs.checkpoint_dir / step_dir_name(st.step), model, st.step, config.seed);
        }
    }
    if (outputs.checkpoint_dir) save_checkpoint(*outputs.checkpoint_dir / "final", model, st.step, config.seed);
    if (outputs.metrics) outputs.metrics->flush();
    return result;
}

double mean_loss(const Generator<float>& model, const Perceiver<float>& perceiver,
                 const std::vector<TrainingPair>& dataset, LossKind kind, const LayerWeights& lambda) {
    check_dataset(model, dataset);
    const LossEvaluator loss(perceiver, kind);
    double sum = 0.0;
    for (const auto& pair : dataset) {
        const auto out = model.forward(pair.layout.values);
        sum += loss.evaluate(out, loss.taps(pair.image), loss.masks(pair.layout), lambda).total;
    }
    return sum / static_cast<double>(dataset.size());
}

// ----------------------------------------------------------------------------
// Synthesis and memorization
// ----------------------------------------------------------------------------

double mean_abs_difference(const FeatureMap<float>& a, const FeatureMap<float>& b) {
    require_same_shape(a, b, "mean_abs_difference");
    if (a.size() == 0) return 0.0;
    return (a.data.cast<double>() - b.data.cast<double>()).cwiseAbs().sum() / static_cast<double>(a.size());
}

std::vector<std::filesystem::path> synthesize(const Generator<float>& model,
                                              const std::vector<std::filesystem::path>& layout_paths,
                                              const std::optional<RemapTable>& remap,
                                              const std::filesystem::path& out_dir, KSelect select,
                                              const std::vector<FeatureMap<float>>& references) {
    if (select == KSelect::best && references.size() != layout_paths.size())
        throw ArgumentError("synthesize: best-of-k selection needs one reference per layout");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    for (std::size_t i = 0; i < layout_paths.size(); ++i) {
        const LabelGrid grid = load_label_map(layout_paths[i], remap);
        model.check_resolution(grid.height(), grid.width());
        const SemanticLayout layout = one_hot(grid, model.classes());
        const auto images = split_images(model.forward(layout.values));
        const std::string stem = layout_paths[i].stem().string();
        if (select == KSelect::best || images.size() == 1) {
            std::size_t best = 0;
            if (select == KSelect::best) {
                double best_err = mean_abs_difference(images[0], references[i]);
                for (std::size_t u = 1; u < images.size(); ++u) {
                    const double e = mean_abs_difference(images[u], references[i]);
                    if (e < best_err) {
                        best_err = e;
                        best = u;
                    }
                }
            }
            const auto path = out_dir / (stem + ".png");
            save_rgb_image(path, images[best]);
            written.push_back(path);
            continue;
        }
        for (std::size_t u = 0; u < images.size(); ++u) {
            const auto path = out_dir / (stem + "_" + std::to_string(u) + ".png");
            save_rgb_image(path, images[u]);
            written.push_back(path);
        }
    }
    return written;
}

nlohmann::json MemorizationReport::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& e : pairs) per.push_back({{"id", e.id}, {"model_l1", e.model_l1}, {"baseline_l1", e.baseline_l1}});
    return {{"pairs", per},
            {"mean_model_l1", mean_model_l1},
            {"mean_baseline_l1", mean_baseline_l1},
            {"pairs_beating_baseline", pairs_beating_baseline}};
}

MemorizationReport memorization_report(const Generator<float>& model, const std::vector<TrainingPair>& dataset) {
    check_dataset(model, dataset);
    FeatureMap<float> mean = FeatureMap<float>::Zero(3, dataset[0].image.height, dataset[0].image.width);
    for (const auto& pair : dataset) {
        require_same_shape(mean, pair.image, "memorization_report");
        mean.data += pair.image.data;
    }
    mean.data /= static_cast<float>(dataset.size());

    MemorizationReport report;
    for (const auto& pair : dataset) {
        const auto images = split_images(model.forward(pair.layout.values));
        double best = mean_abs_difference(images[0], pair.image);
        for (std::size_t u = 1; u < images.size(); ++u) best = std::min(best, mean_abs_difference(images[u], pair.image));
        MemorizationEntry e{pair.id, best, mean_abs_difference(mean, pair.image)};
        report.mean_model_l1 += e.model_l1;
        report.mean_baseline_l1 += e.baseline_l1;
        if (e.model_l1 < e.baseline_l1) ++report.pairs_beating_baseline;
        report.pairs.push_back(std::move(e));
    }
    report.mean_model_l1 /= static_cast<double>(dataset.size());
    report.mean_baseline_l1 /= static_cast<double>(dataset.size());
    return report;
}

}  // namespace crn
