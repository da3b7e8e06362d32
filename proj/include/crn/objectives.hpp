#pragma once

#include <optional>
#include <vector>

#include "json.hpp"

#include "crn/perceiver.hpp"

namespace crn {

/// lambda_l per tap; non-negative and finite.
using LayerWeights = std::vector<double>;

struct LossReport {
    double total = 0.0;
    /// Weighted per-tap terms; they sum to `total`.
    std::vector<double> per_layer;
    /// Class-masked loss only: the minimum over hypotheses for each class.
    std::vector<double> per_class;
    /// Diversity losses: the unmasked weighted loss of every hypothesis.
    std::vector<double> per_hypothesis;
    /// Hindsight loss: index of the best hypothesis.
    std::optional<int> chosen_u;
    /// Class-masked loss: best hypothesis per class.
    std::vector<int> chosen_u_per_class;

    /// Keys: total, per_layer, per_class (when present), chosen_u (int or
    /// per-class array, when present).
    nlohmann::json to_json() const;
};

/// lambda_l = 1 / (number of elements of tap l).
LayerWeights lambda_init(const std::vector<TapShape>& taps);
LayerWeights lambda_init(const PerceiverSpec& spec, int height, int width);

/// lambda_l / mean_l, making each term's mean contribution equal to one.
/// Throws InvariantError on a non-positive or non-finite mean.
LayerWeights lambda_rescale(const LayerWeights& weights, const std::vector<double>& running_means);

/// sum_l lambda_l * || ref_l - syn_l ||_1. When `grad_syn` is given it
/// receives d(loss)/d(syn_l) = lambda_l * sign(syn_l - ref_l).
template <typename Scalar>
LossReport feature_matching_loss(const PerceiverTaps<Scalar>& ref, const PerceiverTaps<Scalar>& syn,
                                 const LayerWeights& weights,
                                 PerceiverTaps<Scalar>* grad_syn = nullptr);

/// min over hypotheses of the feature-matching loss. Only the chosen
/// hypothesis receives a gradient (ties go to the lowest index); the
/// gradient entries of the others are left empty.
template <typename Scalar>
LossReport hindsight_loss(const PerceiverTaps<Scalar>& ref,
                          const std::vector<PerceiverTaps<Scalar>>& syn, const LayerWeights& weights,
                          std::vector<PerceiverTaps<Scalar>>* grad_syn = nullptr);

/// sum_p min_u sum_l lambda_l sum_j || M_p^l * (ref_l^j - syn_u,l^j) ||_1,
/// with `masks[l]` holding the c class masks at tap l's resolution
/// (broadcast across the tap's channels). Masks must form a partition of
/// unity within 1e-5.
template <typename Scalar>
LossReport masked_diversity_loss(const PerceiverTaps<Scalar>& ref,
                                 const std::vector<PerceiverTaps<Scalar>>& syn,
                                 const LayerWeights& weights,
                                 const std::vector<FeatureMap<Scalar>>& masks,
                                 std::vector<PerceiverTaps<Scalar>>* grad_syn = nullptr);

/// lambda_0 * || ref - syn ||_1 over pixels: the feature-matching loss
/// restricted to the image tap.
template <typename Scalar>
LossReport image_space_loss(const FeatureMap<Scalar>& ref, const FeatureMap<Scalar>& syn,
                            double lambda0, FeatureMap<Scalar>* grad_syn = nullptr);

inline constexpr double kPartitionTolerance = 1e-5;

}  // namespace crn
