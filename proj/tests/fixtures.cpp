#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "crn/cascade.hpp"
#include "crn/trainer.hpp"
#include "support.hpp"

namespace crn::testing {

namespace {

double rel_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// sum_j sum_pixels mask(pixel) * |ref - syn|, mask optional.
double tap_l1(const FeatureMap<double>& ref, const FeatureMap<double>& syn, const FeatureMap<double>* masks,
              int cls) {
    double s = 0.0;
    for (int c = 0; c < ref.channels(); ++c)
        for (int y = 0; y < ref.height; ++y)
            for (int x = 0; x < ref.width; ++x) {
                const double m = masks ? masks->at(cls, y, x) : 1.0;
                s += m * std::abs(ref.at(c, y, x) - syn.at(c, y, x));
            }
    return s;
}

}  // namespace

double oracle_feature_matching(const PerceiverTaps<double>& ref, const PerceiverTaps<double>& syn,
                               const LayerWeights& w) {
    double s = 0.0;
    for (std::size_t l = 0; l < ref.size(); ++l) s += w[l] * tap_l1(ref[l], syn[l], nullptr, 0);
    return s;
}

double oracle_hindsight(const PerceiverTaps<double>& ref, const std::vector<PerceiverTaps<double>>& syn,
                        const LayerWeights& w, int* best) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < syn.size(); ++u) {
        const double v = oracle_feature_matching(ref, syn[u], w);
        if (v < m) {
            m = v;
            if (best) *best = static_cast<int>(u);
        }
    }
    return m;
}

double oracle_masked(const PerceiverTaps<double>& ref, const std::vector<PerceiverTaps<double>>& syn,
                     const LayerWeights& w, const std::vector<FeatureMap<double>>& masks,
                     std::vector<int>* choice) {
    const int k = static_cast<int>(syn.size());
    const int c = masks.front().channels();
    std::vector<int> assign(static_cast<std::size_t>(c), 0);
    double best = std::numeric_limits<double>::infinity();
    while (true) {
        double s = 0.0;
        for (int p = 0; p < c; ++p)
            for (std::size_t l = 0; l < ref.size(); ++l)
                s += w[l] * tap_l1(ref[l], syn[static_cast<std::size_t>(assign[p])][l], &masks[l], p);
        if (s < best) {
            best = s;
            if (choice) *choice = assign;
        }
        int p = 0;
        while (p < c && ++assign[p] == k) assign[p++] = 0;
        if (p == c) break;
    }
    return best;
}

double oracle_image_space(const FeatureMap<double>& ref, const FeatureMap<double>& syn, double lambda0) {
    return lambda0 * tap_l1(ref, syn, nullptr, 0);
}

LossInstance random_instance(std::uint64_t seed, int max_classes, int max_k) {
    std::mt19937_64 rng(seed);
    auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    LossInstance inst;
    const int taps = uniform_int(1, 3);
    const int k = uniform_int(1, max_k);
    inst.classes = uniform_int(1, max_classes);
    inst.syn.resize(static_cast<std::size_t>(k));
    for (int l = 0; l < taps; ++l) {
        const int ch = uniform_int(1, 3), h = uniform_int(1, 4), w = uniform_int(1, 4);
        inst.ref.push_back(random_map<double>(ch, h, w, rng));
        for (auto& s : inst.syn) s.push_back(random_map<double>(ch, h, w, rng));
        inst.weights.push_back(0.1 + unit(rng));
        FeatureMap<double> m(inst.classes, h, w);
        for (int i = 0; i < h * w; ++i) {
            double sum = 0.0;
            for (int p = 0; p < inst.classes; ++p) sum += (m.data(p, i) = 0.05 + unit(rng));
            for (int p = 0; p < inst.classes; ++p) m.data(p, i) /= sum;
        }
        inst.masks.push_back(std::move(m));
    }
    return inst;
}

SuiteResult run_loss_oracle_suite(int instances, std::uint64_t seed, double tolerance) {
    SuiteResult r;
    auto note = [&r, tolerance](double err, const std::string& what, int i) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        if (err > tolerance) {
            if (r.failures++ == 0) r.first_failure = what + " instance " + std::to_string(i);
        }
    };
    for (int i = 0; i < instances; ++i) {
        const auto inst = random_instance(seed + static_cast<std::uint64_t>(i));
        ++r.instances;
        const auto& s0 = inst.syn.front();
        note(rel_error(feature_matching_loss(inst.ref, s0, inst.weights).total,
                       oracle_feature_matching(inst.ref, s0, inst.weights)),
             "feature matching", i);

        int best = -1;
        const auto h = hindsight_loss(inst.ref, inst.syn, inst.weights);
        note(rel_error(h.total, oracle_hindsight(inst.ref, inst.syn, inst.weights, &best)), "hindsight", i);
        if (h.chosen_u != best && r.failures++ == 0) r.first_failure = "hindsight argmin instance " + std::to_string(i);

        std::vector<int> choice;
        const auto m = masked_diversity_loss(inst.ref, inst.syn, inst.weights, inst.masks);
        note(rel_error(m.total, oracle_masked(inst.ref, inst.syn, inst.weights, inst.masks, &choice)), "masked", i);
        if (m.chosen_u_per_class != choice && r.failures++ == 0)
            r.first_failure = "masked argmin instance " + std::to_string(i);

        const double lambda0 = inst.weights.front();
        note(rel_error(image_space_loss(inst.ref.front(), s0.front(), lambda0).total,
                       oracle_image_space(inst.ref.front(), s0.front(), lambda0)),
             "image space", i);
    }
    return r;
}

SuiteResult run_loss_properties(int cases, std::uint64_t seed) {
    SuiteResult r;
    auto fail = [&r](const std::string& what, int i) {
        if (r.failures++ == 0) r.first_failure = what + " case " + std::to_string(i);
    };
    for (int i = 0; i < cases; ++i) {
        const auto inst = random_instance(seed + static_cast<std::uint64_t>(i));
        ++r.instances;
        const auto hind = hindsight_loss(inst.ref, inst.syn, inst.weights);
        const auto masked = masked_diversity_loss(inst.ref, inst.syn, inst.weights, inst.masks);
        const double slack = 1e-12 * std::max(1.0, hind.total);
        if (masked.total > hind.total + slack) fail("masked > hindsight", i);
        if (masked.total < 0.0) fail("negative loss", i);

        for (std::size_t u = 0; u < inst.syn.size(); ++u) {
            const auto single = feature_matching_loss(inst.ref, inst.syn[u], inst.weights);
            if (hind.total > single.total + slack) fail("hindsight > single hypothesis", i);

            // Class terms at a fixed hypothesis add up to its unmasked loss.
            const auto fixed = masked_diversity_loss(inst.ref, {inst.syn[u]}, inst.weights, inst.masks);
            double sum = 0.0;
            for (double t : fixed.per_class) sum += t;
            const double err = rel_error(sum, single.total);
            r.max_rel_error = std::max(r.max_rel_error, err);
            if (err > 1e-6) fail("class decomposition", i);

            // k = 1 degeneracies.
            const auto h1 = hindsight_loss(inst.ref, {inst.syn[u]}, inst.weights);
            if (h1.total != single.total || h1.chosen_u != 0) fail("hindsight k=1", i);
            if (rel_error(fixed.total, single.total) > 1e-12) fail("masked k=1", i);
            for (int p : fixed.chosen_u_per_class)
                if (p != 0) fail("masked k=1 choice", i);
        }

        // A single all-ones class turns the masked loss into the hindsight loss.
        std::vector<FeatureMap<double>> ones;
        for (const auto& t : inst.ref) ones.push_back(FeatureMap<double>::Constant(1, t.height, t.width, 1.0));
        const auto one_class = masked_diversity_loss(inst.ref, inst.syn, inst.weights, ones);
        if (rel_error(one_class.total, hind.total) > 1e-12) fail("masked c=1", i);

        // Reversing the hypotheses reverses the choices, not the loss.
        auto rev = inst.syn;
        std::reverse(rev.begin(), rev.end());
        const int k = static_cast<int>(rev.size());
        const auto mrev = masked_diversity_loss(inst.ref, rev, inst.weights, inst.masks);
        if (mrev.total != masked.total) fail("permutation total", i);
        for (std::size_t p = 0; p < mrev.per_class.size(); ++p) {
            if (mrev.per_class[p] != masked.per_class[p]) fail("permutation class term", i);
        }
        const auto hrev = hindsight_loss(inst.ref, rev, inst.weights);
        if (hrev.total != hind.total) fail("permutation hindsight", i);
        auto back = hrev.per_hypothesis;
        std::reverse(back.begin(), back.end());
        if (k > 1 && back != hind.per_hypothesis) fail("permutation per-hypothesis", i);

        // Zero iff identical.
        if (hindsight_loss(inst.ref, {inst.ref}, inst.weights).total != 0.0) fail("self loss", i);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

constexpr double kKinkMargin = 1e-4;
constexpr double kGapMargin = 1e-5;
constexpr double kStep = 1e-7;

struct LossEval {
    double value = 0.0;
    std::vector<FeatureMap<double>> grads;  // per image
    bool kink_free = true;
};

bool preacts_clear(const FeatureMap<double>& pre) {
    return pre.size() == 0 || pre.data.cwiseAbs().minCoeff() >= kKinkMargin;
}

bool gap_clear(std::vector<double> v) {
    if (v.size() < 2) return true;
    std::sort(v.begin(), v.end());
    return v[1] - v[0] >= kGapMargin;
}

struct LossProblem {
    LossKind kind;
    const Perceiver<double>& perceiver;
    PerceiverTaps<double> ref_taps;
    LayerWeights weights;
    std::vector<FeatureMap<double>> masks;

    LossEval evaluate(const std::vector<FeatureMap<double>>& images, bool with_grad) const {
        LossEval e;
        if (kind == LossKind::eq4) {
            FeatureMap<double> g;
            const auto r = image_space_loss(ref_taps.front(), images.front(), weights.front(), with_grad ? &g : nullptr);
            e.value = r.total;
            const auto& d = ref_taps.front().data - images.front().data;
            if (d.cwiseAbs().minCoeff() < kKinkMargin) e.kink_free = false;
            if (with_grad) e.grads.push_back(std::move(g));
            return e;
        }
        std::vector<PerceiverTaps<double>> taps;
        std::vector<PerceiverTrace<double>> traces(images.size());
        for (std::size_t u = 0; u < images.size(); ++u) {
            taps.push_back(perceiver.extract_taps(images[u], &traces[u]));
            for (const auto& b : traces[u].blocks)
                if (!preacts_clear(b.pre_activation)) e.kink_free = false;
            for (std::size_t l = 0; l < taps[u].size(); ++l) {
                const auto& s = taps[u][l].data;
                const auto& r = ref_taps[l].data;
                for (Eigen::Index i = 0; i < s.size(); ++i) {
                    const bool dead = l > 0 && s.data()[i] == 0.0;
                    if (!dead && std::abs(s.data()[i] - r.data()[i]) < kKinkMargin) e.kink_free = false;
                }
            }
        }
        std::vector<PerceiverTaps<double>> tap_grads;
        LossReport report;
        switch (kind) {
            case LossKind::eq1: {
                tap_grads.resize(1);
                report = feature_matching_loss(ref_taps, taps.front(), weights, with_grad ? &tap_grads[0] : nullptr);
                break;
            }
            case LossKind::eq2:
                report = hindsight_loss(ref_taps, taps, weights, with_grad ? &tap_grads : nullptr);
                if (!gap_clear(report.per_hypothesis)) e.kink_free = false;
                break;
            case LossKind::eq3: {
                report = masked_diversity_loss(ref_taps, taps, weights, masks, with_grad ? &tap_grads : nullptr);
                const int c = masks.front().channels();
                std::vector<std::vector<double>> per_class(static_cast<std::size_t>(c));
                for (const auto& t : taps) {
                    const auto f = masked_diversity_loss(ref_taps, {t}, weights, masks);
                    for (int p = 0; p < c; ++p) per_class[p].push_back(f.per_class[p]);
                }
                for (const auto& v : per_class)
                    if (!gap_clear(v)) e.kink_free = false;
                break;
            }
            case LossKind::eq4:
                break;
        }
        e.value = report.total;
        if (with_grad) {
            for (std::size_t u = 0; u < images.size(); ++u) {
                if (u >= tap_grads.size() || tap_grads[u].empty()) {
                    e.grads.push_back(FeatureMap<double>::Zero(3, images[u].height, images[u].width));
                } else {
                    e.grads.push_back(perceiver.backward(traces[u], tap_grads[u]));
                }
            }
        }
        return e;
    }
};

double scaled_rel(double fd, double an, double floor) {
    return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
}

// Layout of contiguous class blocks, one-hot at (h, w).
SemanticLayout block_layout(int h, int w, int classes, std::mt19937_64& rng) {
    return one_hot(random_blocks(h, w, classes, rng), classes);
}

std::vector<FeatureMap<double>> class_masks_double(const SemanticLayout& layout, const PerceiverSpec& spec) {
    std::vector<FeatureMap<double>> r;
    for (const auto& m : class_masks(layout, spec.tap_resolutions(layout.height(), layout.width())))
        r.push_back(m.cast<double>());
    return r;
}

const char* kind_name(LossKind k) {
    switch (k) {
        case LossKind::eq1: return "feature matching";
        case LossKind::eq2: return "hindsight";
        case LossKind::eq3: return "class-masked diversity";
        case LossKind::eq4: return "image space";
    }
    return "?";
}

}  // namespace

std::vector<GradientResult> run_gradient_checks(std::uint64_t seed, int samples_per_tensor) {
    constexpr int kH = 4, kW = 8, kClasses = 3;
    const auto spec = PerceiverSpec::random();
    const auto perceiver = Perceiver<double>::seeded(spec);
    const auto shapes = spec.tap_shapes(kH, kW);
    std::vector<GradientResult> results;

    for (LossKind kind : {LossKind::eq1, LossKind::eq2, LossKind::eq3, LossKind::eq4}) {
        const int k = (kind == LossKind::eq2 || kind == LossKind::eq3) ? 2 : 1;

        // w.r.t. the images, through the perceiver.
        GradientResult img{std::string(kind_name(kind)) + " / image through perceiver"};
        // w.r.t. the parameters of a one-module cascade.
        GradientResult par{std::string(kind_name(kind)) + " / one-module cascade parameters"};

        for (int attempt = 0;; ++attempt) {
            if (attempt == 500) throw InvariantError("no kink-free gradient fixture found");
            std::mt19937_64 rng(seed + 1000 * static_cast<std::uint64_t>(kind) + attempt);
            const auto layout = block_layout(kH, kW, kClasses, rng);
            LossProblem prob{kind, perceiver, {}, lambda_init(shapes), class_masks_double(layout, spec)};
            prob.ref_taps = perceiver.extract_taps(random_map<double>(3, kH, kW, rng, 0.0, 1.0));
            if (kind == LossKind::eq4) prob.ref_taps.resize(1);

            std::vector<FeatureMap<double>> images;
            for (int u = 0; u < k; ++u) images.push_back(random_map<double>(3, kH, kW, rng, 0.0, 1.0));
            const auto base = prob.evaluate(images, true);
            if (!base.kink_free) continue;

            CascadeConfig cfg;
            cfg.channels = {6};
            cfg.classes = kClasses;
            cfg.output_multiplicity = k;
            CascadeModel<double> model(cfg);
            model.initialize(seed + attempt);
            GeneratorTrace<double> trace;
            const auto out = model.forward(layout.values.cast<double>(), &trace);
            if (!preacts_clear(trace.blocks[0].pre_activation)) continue;
            const auto gen_base = prob.evaluate(split_images(out), true);
            if (!gen_base.kink_free) continue;

            // Image coordinates: every one.
            double inf = 0.0;
            for (const auto& g : base.grads) inf = std::max(inf, g.data.cwiseAbs().maxCoeff());
            bool clean = true;
            GradientResult img_try = img;
            for (int u = 0; u < k && clean; ++u)
                for (Eigen::Index i = 0; i < images[u].size(); ++i) {
                    auto plus = images, minus = images;
                    plus[u].data.data()[i] += kStep;
                    minus[u].data.data()[i] -= kStep;
                    const auto ep = prob.evaluate(plus, false), em = prob.evaluate(minus, false);
                    if (!ep.kink_free || !em.kink_free) {
                        clean = false;
                        break;
                    }
                    const double fd = (ep.value - em.value) / (2 * kStep);
                    img_try.max_rel_error = std::max(
                        img_try.max_rel_error, scaled_rel(fd, base.grads[u].data.data()[i], 1e-3 * inf));
                    ++img_try.coordinates;
                }
            if (!clean) continue;

            // Parameter coordinates: a sample per tensor.
            FeatureMap<double> grad_out(3 * k, kH, kW);
            for (int u = 0; u < k; ++u) grad_out.data.middleRows(3 * u, 3) = gen_base.grads[u].data;
            auto grads = model.parameters().zeros_like();
            model.backward(trace, grad_out, grads);
            double pinf = 0.0;
            for (const auto& p : grads) pinf = std::max(pinf, p.values.cwiseAbs().maxCoeff());
            GradientResult par_try = par;
            for (std::size_t t = 0; t < grads.size() && clean; ++t) {
                auto& values = model.parameters().values(t);
                const Eigen::Index n = values.size();
                std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
                const int samples = static_cast<int>(std::min<Eigen::Index>(n, samples_per_tensor));
                for (int s = 0; s < samples; ++s) {
                    const Eigen::Index i = n <= samples_per_tensor ? s : pick(rng);
                    const double keep = values[i];
                    values[i] = keep + kStep;
                    GeneratorTrace<double> tp;
                    const auto ep = prob.evaluate(split_images(model.forward(layout.values.cast<double>(), &tp)), false);
                    values[i] = keep - kStep;
                    GeneratorTrace<double> tm;
                    const auto em = prob.evaluate(split_images(model.forward(layout.values.cast<double>(), &tm)), false);
                    values[i] = keep;
                    if (!ep.kink_free || !em.kink_free || !preacts_clear(tp.blocks[0].pre_activation) ||
                        !preacts_clear(tm.blocks[0].pre_activation)) {
                        clean = false;
                        break;
                    }
                    const double fd = (ep.value - em.value) / (2 * kStep);
                    par_try.max_rel_error =
                        std::max(par_try.max_rel_error, scaled_rel(fd, grads.values(t)[i], 1e-3 * pinf));
                    ++par_try.coordinates;
                }
            }
            if (!clean) continue;
            results.push_back(img_try);
            results.push_back(par_try);
            break;
        }
    }

    // A middle refinement module (full LN + LReLU in both blocks) under a
    // random linear probe, w.r.t. its parameters, the layout and prev.
    {
        CascadeConfig cfg;
        cfg.channels = {4, 4, 4};
        cfg.classes = kClasses;
        GradientResult ref{"refinement module 1 / parameters, layout, prev"};
        for (int attempt = 0;; ++attempt) {
            if (attempt == 500) throw InvariantError("no kink-free refinement fixture found");
            std::mt19937_64 rng(seed + 77 + attempt);
            CascadeModel<double> model(cfg);
            model.initialize(seed + attempt);
            const auto [h, w] = cfg.module_resolution(1);
            const auto [ph, pw] = cfg.module_resolution(0);
            auto layout = block_layout(h, w, kClasses, rng).values.cast<double>();
            auto prev = random_map<double>(cfg.channels[0], ph, pw, rng);
            const auto probe = random_map<double>(cfg.channels[1], h, w, rng);

            auto objective = [&](bool* clear) {
                GeneratorTrace<double> t;
                const auto out = model.refinement_forward(1, layout, prev, &t);
                if (clear)
                    *clear = preacts_clear(t.blocks[2].pre_activation) && preacts_clear(t.blocks[3].pre_activation);
                return (out.data.array() * probe.data.array()).sum();
            };
            GeneratorTrace<double> trace;
            model.refinement_forward(1, layout, prev, &trace);
            if (!preacts_clear(trace.blocks[2].pre_activation) || !preacts_clear(trace.blocks[3].pre_activation))
                continue;
            auto grads = model.parameters().zeros_like();
            auto [dlayout, dprev] = model.refinement_backward(1, trace, probe, grads);

            double inf = dlayout.data.cwiseAbs().maxCoeff();
            inf = std::max(inf, dprev->data.cwiseAbs().maxCoeff());
            for (const auto& p : grads) inf = std::max(inf, p.values.cwiseAbs().maxCoeff());

            GradientResult r = ref;
            bool clean = true;
            auto probe_coordinate = [&](double& x, double analytic) {
                const double keep = x;
                bool cp = false, cm = false;
                x = keep + kStep;
                const double fp = objective(&cp);
                x = keep - kStep;
                const double fm = objective(&cm);
                x = keep;
                if (!cp || !cm) {
                    clean = false;
                    return;
                }
                r.max_rel_error = std::max(r.max_rel_error, scaled_rel((fp - fm) / (2 * kStep), analytic, 1e-3 * inf));
                ++r.coordinates;
            };
            for (std::size_t t = 0; t < grads.size() && clean; ++t) {
                if (grads[t].name.rfind("module1.", 0) != 0) continue;
                auto& values = model.parameters().values(t);
                std::uniform_int_distribution<Eigen::Index> pick(0, values.size() - 1);
                for (int s = 0; s < samples_per_tensor && clean; ++s) {
                    const Eigen::Index i = values.size() <= samples_per_tensor ? s % values.size() : pick(rng);
                    probe_coordinate(values[i], grads.values(t)[i]);
                }
            }
            for (Eigen::Index i = 0; i < prev.size() && clean; ++i)
                probe_coordinate(prev.data.data()[i], dprev->data.data()[i]);
            std::uniform_int_distribution<Eigen::Index> pick(0, layout.size() - 1);
            for (int s = 0; s < 4 * samples_per_tensor && clean; ++s) {
                const Eigen::Index i = pick(rng);
                probe_coordinate(layout.data.data()[i], dlayout.data.data()[i]);
            }
            if (!clean) continue;
            results.push_back(r);
            break;
        }
    }
    return results;
}

}  // namespace crn::testing
