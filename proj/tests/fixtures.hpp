#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crn/objectives.hpp"

namespace crn::testing {

// Brute-force loss oracles: plain loops over every element, independent of
// the Eigen expressions used by the implementation.
double oracle_feature_matching(const PerceiverTaps<double>& ref, const PerceiverTaps<double>& syn,
                               const LayerWeights& w);
double oracle_hindsight(const PerceiverTaps<double>& ref, const std::vector<PerceiverTaps<double>>& syn,
                        const LayerWeights& w, int* best);
/// Enumerates all k^c assignments of classes to hypotheses.
double oracle_masked(const PerceiverTaps<double>& ref, const std::vector<PerceiverTaps<double>>& syn,
                     const LayerWeights& w, const std::vector<FeatureMap<double>>& masks,
                     std::vector<int>* choice);
double oracle_image_space(const FeatureMap<double>& ref, const FeatureMap<double>& syn, double lambda0);

/// A random small loss instance: 1-3 taps of random shape, c classes with
/// soft partition-of-unity masks, k hypotheses.
struct LossInstance {
    PerceiverTaps<double> ref;
    std::vector<PerceiverTaps<double>> syn;
    LayerWeights weights;
    std::vector<FeatureMap<double>> masks;
    int classes = 1;
};

LossInstance random_instance(std::uint64_t seed, int max_classes = 3, int max_k = 3);

struct SuiteResult {
    int instances = 0;
    int failures = 0;
    double max_rel_error = 0.0;
    std::string first_failure;
};

/// All four losses against the oracles on `instances` random instances.
SuiteResult run_loss_oracle_suite(int instances, std::uint64_t seed, double tolerance = 1e-6);

/// Ordering, decomposition, k = 1 degeneracy, permutation and
/// nonnegativity properties on `cases` random instances.
SuiteResult run_loss_properties(int cases, std::uint64_t seed);

struct GradientResult {
    std::string name;
    double max_rel_error = 0.0;
    int coordinates = 0;
};

/// Analytic vs central-difference gradients for every loss, w.r.t. the
/// synthesized image through the desk-scale perceiver and w.r.t. the
/// parameters of a one-module cascade, plus a middle refinement module of
/// a three-module cascade. Fixtures are re-drawn until no L1 difference,
/// ReLU/LReLU pre-activation or hypothesis gap lies within 1e-4 of a kink.
std::vector<GradientResult> run_gradient_checks(std::uint64_t seed, int samples_per_tensor = 12);

}  // namespace crn::testing
