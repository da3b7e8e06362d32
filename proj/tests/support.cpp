#include "support.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "crn/image_io.hpp"

namespace crn::testing {

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("crn_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

LabelGrid random_blocks(int h, int w, int classes, std::mt19937_64& rng) {
    LabelGrid g;
    g.labels = LabelMatrix::Zero(h, w);
    std::uniform_int_distribution<int> cls(0, classes - 1);
    g.labels.setConstant(cls(rng));
    for (int r = 0; r < 6; ++r) {
        std::uniform_int_distribution<int> ys(0, h - 1), xs(0, w - 1);
        int y0 = ys(rng), y1 = ys(rng), x0 = xs(rng), x1 = xs(rng);
        if (y0 > y1) std::swap(y0, y1);
        if (x0 > x1) std::swap(x0, x1);
        g.labels.block(y0, x0, y1 - y0 + 1, x1 - x0 + 1).setConstant(cls(rng));
    }
    return g;
}

std::vector<TrainingPair> toy_dataset(int count, int classes, int h, int w, std::uint64_t seed,
                                      double stripe_frequency) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::vector<TrainingPair> out;
    for (int i = 0; i < count; ++i) {
        const LabelGrid grid = random_blocks(h, w, classes, rng);
        std::vector<std::array<double, 3>> colour(static_cast<std::size_t>(classes));
        for (auto& c : colour) c = {u(rng), u(rng), u(rng)};
        TrainingPair p;
        p.id = "pair" + std::to_string(i);
        p.layout = one_hot(grid, classes);
        p.image = FeatureMap<float>(3, h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int c = grid.labels(y, x);
                const double stripe = 0.08 * std::sin(stripe_frequency * (x + (c + 1) * y));
                for (int ch = 0; ch < 3; ++ch)
                    p.image.at(ch, y, x) = static_cast<float>(std::clamp(colour[c][ch] + stripe, 0.0, 1.0));
            }
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<TrainingPair> semantic_dataset(int count, int classes, int h, int w, std::uint64_t seed,
                                           double jitter) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.15, 0.85), d(-jitter, jitter);
    std::vector<std::array<double, 3>> base(static_cast<std::size_t>(classes));
    for (auto& c : base) c = {u(rng), u(rng), u(rng)};
    std::vector<TrainingPair> out;
    for (int i = 0; i < count; ++i) {
        const LabelGrid grid = random_blocks(h, w, classes, rng);
        auto colour = base;
        for (auto& c : colour)
            for (auto& v : c) v = std::clamp(v + d(rng), 0.0, 1.0);
        TrainingPair p;
        p.id = "pair" + std::to_string(i);
        p.layout = one_hot(grid, classes);
        p.image = FeatureMap<float>(3, h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int c = grid.labels(y, x);
                const double stripe = 0.08 * std::sin(0.7 * (x + (c + 1) * y));
                for (int ch = 0; ch < 3; ++ch)
                    p.image.at(ch, y, x) = static_cast<float>(std::clamp(colour[c][ch] + stripe, 0.0, 1.0));
            }
        out.push_back(std::move(p));
    }
    return out;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<TrainingPair>& data) {
    std::filesystem::create_directories(dir);
    const auto manifest = dir / "manifest.jsonl";
    std::ofstream m(manifest);
    for (const auto& p : data) {
        save_label_map(dir / (p.id + "_layout.png"), argmax(p.layout));
        save_rgb_image(dir / (p.id + ".png"), p.image);
        m << nlohmann::json{{"layout", p.id + "_layout.png"}, {"image", p.id + ".png"}}.dump() << '\n';
    }
    return manifest;
}

GradCheck check_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& analytic, int samples, std::mt19937_64& rng, double h,
                         double floor) {
    GradCheck r;
    std::uniform_int_distribution<Eigen::Index> pick(0, x.size() - 1);
    for (int s = 0; s < samples; ++s) {
        const Eigen::Index i = samples >= x.size() ? s % x.size() : pick(rng);
        Eigen::VectorXd xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (f(xp) - f(xm)) / (2 * h);
        const double rel = std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), floor});
        r.max_rel_error = std::max(r.max_rel_error, rel);
        ++r.checked;
    }
    return r;
}

}  // namespace crn::testing
