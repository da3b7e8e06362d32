#include <cmath>
#include <random>

#include "crn/objectives.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "support.hpp"

using namespace crn;
using namespace crn::testing;

TEST_SUITE("objectives") {

TEST_CASE("losses match brute-force oracles") {
    const auto r = run_loss_oracle_suite(200, 1000);
    INFO(r.first_failure);
    CHECK(r.failures == 0);
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("masked oracle enumerates every assignment") {
    // c = 3, k = 3: the minimum over 27 assignments equals the per-class
    // minimum the implementation takes.
    int covered = 0;
    for (std::uint64_t s = 0; covered < 5 && s < 500; ++s) {
        auto inst = random_instance(s, 3, 3);
        if (inst.classes != 3 || inst.syn.size() != 3) continue;
        ++covered;
        std::vector<int> choice;
        const double oracle = oracle_masked(inst.ref, inst.syn, inst.weights, inst.masks, &choice);
        const auto m = masked_diversity_loss(inst.ref, inst.syn, inst.weights, inst.masks);
        CHECK(std::abs(m.total - oracle) <= 1e-9 * oracle);
        CHECK(m.chosen_u_per_class == choice);
    }
    CHECK(covered == 5);
}

TEST_CASE("ordering, decomposition and degeneracies") {
    const auto r = run_loss_properties(500, 5000);
    INFO(r.first_failure);
    CHECK(r.instances == 500);
    CHECK(r.failures == 0);
}

TEST_CASE("gradient of feature matching is lambda times sign") {
    std::mt19937_64 rng(3);
    PerceiverTaps<double> ref{random_map<double>(2, 3, 3, rng)}, syn{random_map<double>(2, 3, 3, rng)};
    PerceiverTaps<double> g;
    feature_matching_loss(ref, syn, {0.5}, &g);
    for (Eigen::Index i = 0; i < g[0].size(); ++i) {
        const double d = syn[0].data.data()[i] - ref[0].data.data()[i];
        CHECK(g[0].data.data()[i] == (d > 0 ? 0.5 : -0.5));
    }
}

TEST_CASE("hindsight gradient reaches the chosen hypothesis only") {
    std::mt19937_64 rng(4);
    PerceiverTaps<double> ref{random_map<double>(1, 2, 2, rng)};
    PerceiverTaps<double> far{FeatureMap<double>::Constant(1, 2, 2, 9.0)};
    std::vector<PerceiverTaps<double>> syn{far, ref, ref};
    std::vector<PerceiverTaps<double>> g;
    const auto r = hindsight_loss(ref, syn, {1.0}, &g);
    CHECK(r.total == 0.0);
    CHECK(r.chosen_u == 1);  // tie between 1 and 2 goes to the lower index
    CHECK(g[0].empty());
    CHECK(g[2].empty());
    CHECK(g[1].size() == 1);
}

TEST_CASE("masked loss rejects masks that are not a partition") {
    std::mt19937_64 rng(5);
    PerceiverTaps<double> ref{random_map<double>(1, 2, 2, rng)};
    std::vector<PerceiverTaps<double>> syn{ref};
    std::vector<FeatureMap<double>> masks{FeatureMap<double>::Constant(2, 2, 2, 0.4)};
    CHECK_THROWS_AS(masked_diversity_loss(ref, syn, {1.0}, masks), InvariantError);
}

TEST_CASE("loss report json carries per-class choices") {
    std::mt19937_64 rng(6);
    auto inst = random_instance(6, 3, 3);
    const auto m = masked_diversity_loss(inst.ref, inst.syn, inst.weights, inst.masks);
    const auto j = m.to_json();
    CHECK(j.contains("total"));
    CHECK(j["chosen_u"].is_array());
    CHECK(j["chosen_u"].size() == static_cast<std::size_t>(inst.classes));
    CHECK(j["per_class"].size() == static_cast<std::size_t>(inst.classes));
}

TEST_CASE("lambda init is one over tap size") {
    const auto w = lambda_init(std::vector<TapShape>{{3, 4, 8}, {8, 4, 8}, {16, 2, 4}});
    REQUIRE(w.size() == 3);
    CHECK(w[0] == doctest::Approx(1.0 / 96));
    CHECK(w[1] == doctest::Approx(1.0 / 256));
    CHECK(w[2] == doctest::Approx(1.0 / 128));
}

TEST_CASE("lambda rescale divides by the running mean") {
    const LayerWeights w{0.5, 0.25, 2.0};
    const std::vector<double> means{4.0, 0.5, 8.0};
    const auto n = lambda_rescale(w, means);
    for (std::size_t l = 0; l < w.size(); ++l) {
        CHECK(std::abs(n[l] - w[l] / means[l]) <= 1e-12);
        // The mean unweighted term is means[l] / w[l]; its new contribution is one.
        CHECK(std::abs(n[l] * means[l] / w[l] - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(lambda_rescale(w, {1.0, 0.0, 1.0}), InvariantError);
    CHECK_THROWS_AS(lambda_rescale(w, {1.0, NAN, 1.0}), InvariantError);
}

TEST_CASE("analytic gradients match finite differences") {
    const auto results = run_gradient_checks(11, 6);
    CHECK(results.size() == 9);
    for (const auto& r : results) {
        INFO(r.name);
        CHECK(r.coordinates > 0);
        CHECK(r.max_rel_error < 1e-4);
    }
}

}
