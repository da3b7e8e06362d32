#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "crn/generator.hpp"
#include "crn/layout.hpp"
#include "crn/objectives.hpp"
#include "crn/perceiver.hpp"

namespace crn {

/// eq1: feature matching; eq2: hindsight over k outputs; eq3: class-masked
/// hindsight; eq4: image-space (tap 0 only).
enum class LossKind { eq1, eq2, eq3, eq4 };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);

struct TrainConfig {
    int epochs = 200;
    /// 0 means one pass over the dataset per epoch.
    int steps_per_epoch = 0;
    std::string optimizer = "adam";
    double step_size = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::eq1;
    int k = 1;
    /// Epoch at whose start lambda is rescaled once; epochs <= this value
    /// means no rescale happens.
    int lambda_rescale_epoch = 100;
    /// Write a checkpoint every this many steps (0: final checkpoint only).
    int checkpoint_every = 0;
    /// Stop after this many steps (0: epochs * steps_per_epoch).
    std::int64_t max_steps = 0;

    void validate() const;
    nlohmann::json to_json() const;
    /// Strict: unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainingState {
    std::int64_t step = 0;
    int epoch = 0;
    LayerWeights lambda;
    bool rescaled = false;
    /// Sums of per-layer weighted terms since training began (until rescale).
    std::vector<double> term_sums;
    std::int64_t term_count = 0;

    std::vector<double> running_means() const;
};

struct TrainOutputs {
    /// One JSON object per line: per-step reports and the rescale event.
    std::ostream* metrics = nullptr;
    /// Checkpoints go to <dir>/step_<n>, the final weights to <dir>/final.
    std::optional<std::filesystem::path> checkpoint_dir;
};

struct TrainResult {
    TrainingState state;
    std::vector<double> step_totals;
};

/// Losses need the reference taps and, for eq3, the class masks at every
/// tap resolution; both are computed once per training pair.
class LossEvaluator {
public:
    LossEvaluator(const Perceiver<float>& perceiver, LossKind kind);

    LossKind kind() const { return kind_; }
    /// Taps the loss compares: every perceiver tap, or just the image for eq4.
    std::vector<TapShape> tap_shapes(int height, int width) const;
    PerceiverTaps<float> taps(const FeatureMap<float>& image, PerceiverTrace<float>* trace = nullptr) const;
    std::vector<FeatureMap<float>> masks(const SemanticLayout& layout) const;

    /// Loss of the generator output (3k channels) against `reference_taps`.
    /// When `grad_output` is given it receives d(loss)/d(output).
    LossReport evaluate(const FeatureMap<float>& output, const PerceiverTaps<float>& reference_taps,
                        const std::vector<FeatureMap<float>>& masks, const LayerWeights& lambda,
                        FeatureMap<float>* grad_output = nullptr) const;

private:
    const Perceiver<float>& perceiver_;
    LossKind kind_;
};

/// Trains `model` in place. The caller initializes (or loads) the weights;
/// the data order is drawn from `config.seed`. Throws InvariantError naming
/// the step if the loss becomes non-finite.
TrainResult train(Generator<float>& model, const Perceiver<float>& perceiver,
                  const std::vector<TrainingPair>& dataset, const TrainConfig& config,
                  const TrainOutputs& outputs = {});

/// Mean over the dataset of the configured loss with fixed weights.
double mean_loss(const Generator<float>& model, const Perceiver<float>& perceiver,
                 const std::vector<TrainingPair>& dataset, LossKind kind, const LayerWeights& lambda);

enum class KSelect { all, best };

/// Writes <stem>.png (k = 1 or best) or <stem>_<u>.png per layout. `best`
/// needs `references` (one image per layout) and keeps the hypothesis with
/// the lowest mean absolute pixel error. Returns the written paths.
std::vector<std::filesystem::path> synthesize(const Generator<float>& model,
                                              const std::vector<std::filesystem::path>& layout_paths,
                                              const std::optional<RemapTable>& remap,
                                              const std::filesystem::path& out_dir, KSelect select,
                                              const std::vector<FeatureMap<float>>& references = {});

struct MemorizationEntry {
    std::string id;
    double model_l1 = 0.0;
    double baseline_l1 = 0.0;
};

struct MemorizationReport {
    std::vector<MemorizationEntry> pairs;
    double mean_model_l1 = 0.0;
    double mean_baseline_l1 = 0.0;
    int pairs_beating_baseline = 0;

    nlohmann::json to_json() const;
};

/// Mean per-pixel absolute error of the best output per training pair,
/// against a constant predictor equal to the dataset's mean image.
MemorizationReport memorization_report(const Generator<float>& model, const std::vector<TrainingPair>& dataset);

/// Mean absolute difference over all elements.
double mean_abs_difference(const FeatureMap<float>& a, const FeatureMap<float>& b);

}  // namespace crn
