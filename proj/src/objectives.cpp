#include "crn/objectives.hpp"

#include <cmath>
#include <sstream>

#include "crn/layout.hpp"

namespace crn {

nlohmann::json LossReport::to_json() const {
    nlohmann::json j{{"total", total}, {"per_layer", per_layer}};
    if (!per_class.empty()) j["per_class"] = per_class;
    if (!chosen_u_per_class.empty())
        j["chosen_u"] = chosen_u_per_class;
    else if (chosen_u)
        j["chosen_u"] = *chosen_u;
    return j;
}

LayerWeights lambda_init(const std::vector<TapShape>& taps) {
    LayerWeights w;
    for (const auto& t : taps) {
        if (t.elements() <= 0) throw DimensionError("lambda_init: empty tap");
        w.push_back(1.0 / static_cast<double>(t.elements()));
    }
    return w;
}

LayerWeights lambda_init(const PerceiverSpec& spec, int height, int width) {
    return lambda_init(spec.tap_shapes(height, width));
}

LayerWeights lambda_rescale(const LayerWeights& weights, const std::vector<double>& running_means) {
    if (weights.size() != running_means.size())
        throw ArgumentError("lambda_rescale: " + std::to_string(weights.size()) + " weights but " +
                            std::to_string(running_means.size()) + " means");
    LayerWeights out(weights.size());
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const double m = running_means[l];
        if (!(m > 0.0) || !std::isfinite(m)) {
            std::ostringstream msg;
            msg << "lambda_rescale: degenerate statistics, mean contribution of tap " << l << " is " << m;
            throw InvariantError(msg.str());
        }
        out[l] = weights[l] / m;
    }
    return out;
}

namespace {

void check_weights(const LayerWeights& weights, std::size_t taps) {
    if (weights.size() != taps)
        throw DimensionError("loss: " + std::to_string(weights.size()) + " layer weights for " +
                             std::to_string(taps) + " taps");
    for (double w : weights)
        if (!(w >= 0.0) || !std::isfinite(w)) throw ArgumentError("loss: layer weights must be finite and >= 0");
}

template <typename Scalar>
void check_taps(const PerceiverTaps<Scalar>& ref, const PerceiverTaps<Scalar>& syn) {
    if (ref.size() != syn.size())
        throw DimensionError("loss: " + std::to_string(ref.size()) + " reference taps vs " +
                             std::to_string(syn.size()) + " synthesized taps");
    for (std::size_t l = 0; l < ref.size(); ++l) require_same_shape(ref[l], syn[l], "loss tap");
}

/// Per-pixel sum over channels of |ref - syn|.
template <typename Scalar>
Eigen::Matrix<double, 1, Eigen::Dynamic> channel_abs_sum(const FeatureMap<Scalar>& ref,
                                                         const FeatureMap<Scalar>& syn) {
    return (ref.data.template cast<double>() - syn.data.template cast<double>()).cwiseAbs().colwise().sum();
}

template <typename Scalar>
FeatureMap<Scalar> sign_gradient(const FeatureMap<Scalar>& ref, const FeatureMap<Scalar>& syn, double scale) {
    FeatureMap<Scalar> g(syn.channels(), syn.height, syn.width);
    g.data = (syn.data - ref.data).array().sign() * static_cast<Scalar>(scale);
    return g;
}

}  // namespace

template <typename Scalar>
LossReport feature_matching_loss(const PerceiverTaps<Scalar>& ref, const PerceiverTaps<Scalar>& syn,
                                 const LayerWeights& weights, PerceiverTaps<Scalar>* grad_syn) {
    check_taps(ref, syn);
    check_weights(weights, ref.size());
    LossReport r;
    r.per_layer.resize(ref.size());
    if (grad_syn) grad_syn->resize(ref.size());
    for (std::size_t l = 0; l < ref.size(); ++l) {
        const double l1 = (ref[l].data.template cast<double>() - syn[l].data.template cast<double>()).cwiseAbs().sum();
        r.per_layer[l] = weights[l] * l1;
        r.total += r.per_layer[l];
        if (grad_syn) (*grad_syn)[l] = sign_gradient(ref[l], syn[l], weights[l]);
    }
    return r;
}

template <typename Scalar>
LossReport hindsight_loss(const PerceiverTaps<Scalar>& ref,
                          const std::vector<PerceiverTaps<Scalar>>& syn, const LayerWeights& weights,
                          std::vector<PerceiverTaps<Scalar>>* grad_syn) {
    if (syn.empty()) throw ArgumentError("hindsight_loss: no hypotheses");
    LossReport best;
    std::vector<double> totals;
    int chosen = 0;
    for (std::size_t u = 0; u < syn.size(); ++u) {
        LossReport r = feature_matching_loss(ref, syn[u], weights);
        totals.push_back(r.total);
        if (u == 0 || r.total < best.total) {
            best = std::move(r);
            chosen = static_cast<int>(u);
        }
    }
    best.per_hypothesis = std::move(totals);
    best.chosen_u = chosen;
    if (grad_syn) {
        grad_syn->assign(syn.size(), {});
        feature_matching_loss(ref, syn[static_cast<std::size_t>(chosen)], weights,
                              &(*grad_syn)[static_cast<std::size_t>(chosen)]);
    }
    return best;
}

template <typename Scalar>
LossReport masked_diversity_loss(const PerceiverTaps<Scalar>& ref,
                                 const std::vector<PerceiverTaps<Scalar>>& syn,
                                 const LayerWeights& weights,
                                 const std::vector<FeatureMap<Scalar>>& masks,
                                 std::vector<PerceiverTaps<Scalar>>* grad_syn) {
    if (syn.empty()) throw ArgumentError("masked_diversity_loss: no hypotheses");
    check_weights(weights, ref.size());
    if (masks.size() != ref.size())
        throw DimensionError("masked_diversity_loss: " + std::to_string(masks.size()) + " mask sets for " +
                             std::to_string(ref.size()) + " taps");
    const int classes = masks.front().channels();
    for (std::size_t l = 0; l < masks.size(); ++l) {
        if (masks[l].channels() != classes || masks[l].height != ref[l].height || masks[l].width != ref[l].width)
            throw DimensionError("masked_diversity_loss: masks for tap " + std::to_string(l) + " are " +
                                 shape_string(masks[l]) + ", tap is " + shape_string(ref[l]));
        const double err = partition_error(masks[l]);
        if (!(err <= kPartitionTolerance)) {
            std::ostringstream msg;
            msg << "masked_diversity_loss: masks at tap " << l << " violate the partition of unity by " << err;
            throw InvariantError(msg.str());
        }
    }

    const std::size_t k = syn.size();
    const std::size_t taps = ref.size();
    // term[u](p, l): weighted, class-p masked loss of hypothesis u at tap l
    std::vector<Eigen::MatrixXd> term(k, Eigen::MatrixXd::Zero(classes, static_cast<Eigen::Index>(taps)));
    for (std::size_t u = 0; u < k; ++u) {
        check_taps(ref, syn[u]);
        for (std::size_t l = 0; l < taps; ++l) {
            const auto per_pixel = channel_abs_sum(ref[l], syn[u][l]);
            term[u].col(static_cast<Eigen::Index>(l)) =
                weights[l] * (masks[l].data.template cast<double>() * per_pixel.transpose());
        }
    }

    LossReport r;
    r.per_layer.assign(taps, 0.0);
    r.per_class.assign(static_cast<std::size_t>(classes), 0.0);
    r.chosen_u_per_class.assign(static_cast<std::size_t>(classes), 0);
    for (std::size_t u = 0; u < k; ++u) r.per_hypothesis.push_back(term[u].sum());
    for (int p = 0; p < classes; ++p) {
        std::size_t best = 0;
        double best_value = term[0].row(p).sum();
        for (std::size_t u = 1; u < k; ++u) {
            const double v = term[u].row(p).sum();
            if (v < best_value) {
                best_value = v;
                best = u;
            }
        }
        r.per_class[static_cast<std::size_t>(p)] = best_value;
        r.chosen_u_per_class[static_cast<std::size_t>(p)] = static_cast<int>(best);
        for (std::size_t l = 0; l < taps; ++l) r.per_layer[l] += term[best](p, static_cast<Eigen::Index>(l));
        r.total += best_value;
    }

    if (grad_syn) {
        grad_syn->assign(k, {});
        for (std::size_t u = 0; u < k; ++u) {
            std::vector<int> owned;
            for (int p = 0; p < classes; ++p)
                if (r.chosen_u_per_class[static_cast<std::size_t>(p)] == static_cast<int>(u)) owned.push_back(p);
            if (owned.empty()) continue;
            auto& g = (*grad_syn)[u];
            g.resize(taps);
            for (std::size_t l = 0; l < taps; ++l) {
                Eigen::Matrix<Scalar, 1, Eigen::Dynamic> weight_map = masks[l].data.row(owned[0]);
                for (std::size_t i = 1; i < owned.size(); ++i) weight_map += masks[l].data.row(owned[i]);
                g[l] = sign_gradient(ref[l], syn[u][l], weights[l]);
                g[l].data.array().rowwise() *= weight_map.array();
            }
        }
    }
    return r;
}

template <typename Scalar>
LossReport image_space_loss(const FeatureMap<Scalar>& ref, const FeatureMap<Scalar>& syn, double lambda0,
                            FeatureMap<Scalar>* grad_syn) {
    PerceiverTaps<Scalar> g;
    LossReport r = feature_matching_loss(PerceiverTaps<Scalar>{ref}, PerceiverTaps<Scalar>{syn},
                                         LayerWeights{lambda0}, grad_syn ? &g : nullptr);
    if (grad_syn) *grad_syn = std::move(g[0]);
    return r;
}

#define CRN_INSTANTIATE_OBJECTIVES(S)                                                                  \
    template LossReport feature_matching_loss(const PerceiverTaps<S>&, const PerceiverTaps<S>&,        \
                                              const LayerWeights&, PerceiverTaps<S>*);                 \
    template LossReport hindsight_loss(const PerceiverTaps<S>&, const std::vector<PerceiverTaps<S>>&,  \
                                       const LayerWeights&, std::vector<PerceiverTaps<S>>*);           \
    template LossReport masked_diversity_loss(const PerceiverTaps<S>&,                                 \
                                              const std::vector<PerceiverTaps<S>>&,                    \
                                              const LayerWeights&, const std::vector<FeatureMap<S>>&,  \
                                              std::vector<PerceiverTaps<S>>*);                         \
    template LossReport image_space_loss(const FeatureMap<S>&, const FeatureMap<S>&, double,           \
                                         FeatureMap<S>*);

CRN_INSTANTIATE_OBJECTIVES(float)
CRN_INSTANTIATE_OBJECTIVES(double)

}  // namespace crn
