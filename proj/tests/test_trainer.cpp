#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "crn/image_io.hpp"
#include "crn/models.hpp"
#include "crn/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace crn;
using namespace crn::testing;

namespace {

constexpr int kClasses = 4;

CascadeConfig small_cascade(int k = 1) {
    CascadeConfig c;
    c.channels = {8, 8, 8};
    c.classes = kClasses;
    c.output_multiplicity = k;
    return c;
}

const Perceiver<float>& desk_perceiver() {
    static const auto p = Perceiver<float>::seeded(PerceiverSpec::random());
    return p;
}

std::vector<TrainingPair> small_data(int count = 4) { return toy_dataset(count, kClasses, 16, 32, 21); }

TrainConfig quick_config(int steps) {
    TrainConfig t;
    t.epochs = 1000;
    t.max_steps = steps;
    t.seed = 3;
    return t;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("train config validation") {
    TrainConfig t;
    t.loss = LossKind::eq1;
    t.k = 2;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t.loss = LossKind::eq4;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t.loss = LossKind::eq3;
    CHECK_NOTHROW(t.validate());
    t.optimizer = "rmsprop";
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"epochz", 3}}), ConfigError);
    const auto round = TrainConfig::from_json(quick_config(5).to_json());
    CHECK(round.max_steps == 5);
    CHECK(loss_kind_from_string("eq2") == LossKind::eq2);
    CHECK_THROWS_AS(loss_kind_from_string("eq5"), ConfigError);
}

TEST_CASE("step size zero leaves the weights unchanged") {
    CascadeModel<float> model(small_cascade());
    model.initialize(1);
    const auto before = content_hash(model.parameters());
    auto cfg = quick_config(1);
    cfg.step_size = 0.0;
    train(model, desk_perceiver(), small_data(), cfg);
    CHECK(content_hash(model.parameters()) == before);
    cfg.optimizer = "sgd";
    train(model, desk_perceiver(), small_data(), cfg);
    CHECK(content_hash(model.parameters()) == before);
}

TEST_CASE("training leaves the perceiver untouched and moves the generator") {
    CascadeModel<float> model(small_cascade());
    model.initialize(1);
    const auto gen_before = content_hash(model.parameters());
    const auto perc_before = content_hash(desk_perceiver().parameters());
    train(model, desk_perceiver(), small_data(), quick_config(5));
    CHECK(content_hash(desk_perceiver().parameters()) == perc_before);
    CHECK(content_hash(model.parameters()) != gen_before);
}

TEST_CASE("fixed seed training is bitwise reproducible") {
    std::uint64_t hashes[2];
    std::vector<double> totals[2];
    std::string metrics[2];
    for (int run = 0; run < 2; ++run) {
        CascadeModel<float> model(small_cascade(2));
        model.initialize(4);
        auto cfg = quick_config(12);
        cfg.loss = LossKind::eq3;
        cfg.k = 2;
        std::ostringstream m;
        TrainOutputs out;
        out.metrics = &m;
        totals[run] = train(model, desk_perceiver(), small_data(), cfg, out).step_totals;
        hashes[run] = content_hash(model.parameters());
        metrics[run] = m.str();
    }
    CHECK(hashes[0] == hashes[1]);
    CHECK(totals[0] == totals[1]);
    CHECK(metrics[0] == metrics[1]);
}

TEST_CASE("loss decreases over training") {
    CascadeModel<float> model(small_cascade());
    model.initialize(2);
    auto cfg = quick_config(200);
    cfg.step_size = 1e-3;
    const auto totals = train(model, desk_perceiver(), small_data(), cfg).step_totals;
    REQUIRE(totals.size() == 200);
    const std::vector<double> first(totals.begin(), totals.begin() + 20), last(totals.end() - 20, totals.end());
    CHECK(median(last) < median(first));
}

TEST_CASE("lambda rescale event makes mean contributions one") {
    CascadeModel<float> model(small_cascade());
    model.initialize(5);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.steps_per_epoch = 3;
    cfg.lambda_rescale_epoch = 2;
    std::ostringstream m;
    TrainOutputs out;
    out.metrics = &m;
    const auto result = train(model, desk_perceiver(), small_data(), cfg, out);
    CHECK(result.state.rescaled);
    CHECK(result.state.step == 12);

    std::istringstream lines(m.str());
    std::string line;
    int events = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        if (!j.contains("event")) continue;
        ++events;
        CHECK(j["event"] == "lambda_rescale");
        CHECK(j["step"] == 6);
        const auto before = j["lambda_before"].get<std::vector<double>>();
        const auto after = j["lambda_after"].get<std::vector<double>>();
        const auto means = j["running_means"].get<std::vector<double>>();
        REQUIRE(before.size() == after.size());
        for (std::size_t l = 0; l < before.size(); ++l) {
            CHECK(std::abs(after[l] - before[l] / means[l]) <= 1e-6 * after[l]);
            CHECK(std::abs(after[l] * means[l] / before[l] - 1.0) <= 1e-6);
        }
    }
    CHECK(events == 1);
}

TEST_CASE("non-finite loss aborts with the step") {
    CascadeModel<float> model(small_cascade());
    model.initialize(6);
    model.parameters().values(0)[0] = NAN;
    CHECK_THROWS_AS(train(model, desk_perceiver(), small_data(), quick_config(3)), InvariantError);
}

TEST_CASE("checkpoints are written and reload") {
    const auto dir = temp_dir("crn_train_ckpt");
    CascadeModel<float> model(small_cascade());
    model.initialize(7);
    auto cfg = quick_config(4);
    cfg.checkpoint_every = 2;
    TrainOutputs out;
    out.checkpoint_dir = dir;
    train(model, desk_perceiver(), small_data(), cfg, out);
    CHECK(std::filesystem::exists(dir / "step_00000002"));
    CHECK(std::filesystem::exists(dir / "step_00000004"));
    const auto loaded = load_checkpoint<float>(dir / "final");
    CHECK(loaded.header.step == 4);
    CHECK(content_hash(loaded.model->parameters()) == content_hash(model.parameters()));
}

TEST_CASE("synthesis writes one file per hypothesis, deterministically") {
    const auto dir = temp_dir("crn_synth");
    const auto data = small_data(2);
    const auto manifest = write_dataset(dir / "data", data);
    (void)manifest;
    CascadeModel<float> model(small_cascade(9));
    model.initialize(8);
    const std::vector<std::filesystem::path> layouts{dir / "data" / (data[0].id + "_layout.png")};
    const auto a = synthesize(model, layouts, std::nullopt, dir / "a", KSelect::all);
    const auto b = synthesize(model, layouts, std::nullopt, dir / "b", KSelect::all);
    REQUIRE(a.size() == 9);
    for (int u = 0; u < 9; ++u) {
        CHECK(a[u].filename() == data[0].id + "_layout_" + std::to_string(u) + ".png");
        CHECK(read_file(a[u]) == read_file(b[u]));
    }
    const auto best = synthesize(model, layouts, std::nullopt, dir / "c", KSelect::best, {data[0].image});
    REQUIRE(best.size() == 1);
    CHECK(best[0].filename() == data[0].id + "_layout.png");
    CHECK_THROWS_AS(synthesize(model, layouts, std::nullopt, dir / "d", KSelect::best), ArgumentError);
}

TEST_CASE("memorization report compares against the mean image") {
    CascadeModel<float> model(small_cascade());
    model.initialize(9);
    const auto data = small_data(3);
    const auto r = memorization_report(model, data);
    CHECK(r.pairs.size() == 3);
    CHECK(r.mean_baseline_l1 > 0.0);
    const auto j = r.to_json();
    CHECK(j["pairs"].size() == 3);
    FeatureMap<float> z = FeatureMap<float>::Zero(3, 2, 2), o = FeatureMap<float>::Constant(3, 2, 2, 0.5f);
    CHECK(mean_abs_difference(z, o) == doctest::Approx(0.5));
}

TEST_CASE("mean loss is finite and positive for an untrained model") {
    CascadeModel<float> model(small_cascade());
    model.initialize(10);
    const auto data = small_data(2);
    const auto lambda = lambda_init(desk_perceiver().spec(), 16, 32);
    const double l = mean_loss(model, desk_perceiver(), data, LossKind::eq1, lambda);
    CHECK(std::isfinite(l));
    CHECK(l > 0.0);
}

}
