#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crn/feature_map.hpp"
#include "crn/layout.hpp"

namespace crn::testing {

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

template <typename Scalar>
FeatureMap<Scalar> random_map(int channels, int h, int w, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    FeatureMap<Scalar> f(channels, h, w);
    for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = static_cast<Scalar>(d(rng));
    return f;
}

/// Random label grid built from axis-aligned rectangles, so classes form
/// contiguous regions.
LabelGrid random_blocks(int h, int w, int classes, std::mt19937_64& rng);

/// Toy layout/photo pairs: every class gets a per-pair colour plus a
/// class-specific stripe texture, so pairs differ both in layout and in
/// appearance.
std::vector<TrainingPair> toy_dataset(int count, int classes, int h, int w, std::uint64_t seed,
                                      double stripe_frequency = 0.7);

/// Like toy_dataset, but each class keeps one base colour across pairs and
/// every pair jitters it by up to +-jitter per channel.
std::vector<TrainingPair> semantic_dataset(int count, int classes, int h, int w, std::uint64_t seed,
                                           double jitter = 0.15);

/// Writes label maps, images and a manifest.jsonl into `dir`; returns the
/// manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<TrainingPair>& data);

/// Largest relative error between analytic and central-difference
/// directional derivatives, relative to max(|fd|, floor).
struct GradCheck {
    double max_rel_error = 0.0;
    int checked = 0;
};

/// `f` returns the objective, `analytic` its gradient (flattened) at `x`.
/// Compares `samples` random coordinates.
GradCheck check_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& analytic, int samples, std::mt19937_64& rng, double h = 1e-6,
                         double floor = 1e-6);

}  // namespace crn::testing
