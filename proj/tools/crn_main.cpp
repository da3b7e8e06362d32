// crn: command-line entry point for training, synthesis, perceiver import
// and the pairwise study.

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "crn/archive.hpp"
#include "crn/config_json.hpp"
#include "crn/image_io.hpp"
#include "crn/models.hpp"
#include "crn/perceiver.hpp"
#include "crn/study.hpp"
#include "crn/study_server.hpp"
#include "crn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw crn::IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw crn::ConfigError(path.string() + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

/// Files directly inside a directory with the given extension, sorted; a
/// plain file is returned as is.
std::vector<fs::path> expand(const std::vector<std::string>& inputs, const std::string& ext) {
    std::vector<fs::path> out;
    for (const auto& s : inputs) {
        fs::path p(s);
        if (!fs::is_directory(p)) {
            if (!fs::exists(p)) throw crn::IoError("no such file: " + p.string());
            out.push_back(p);
            continue;
        }
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(p))
            if (e.is_regular_file() && e.path().extension() == ext) found.push_back(e.path());
        std::sort(found.begin(), found.end());
        out.insert(out.end(), found.begin(), found.end());
    }
    return out;
}

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> loss;
    std::optional<int> k;
    std::optional<std::int64_t> max_steps;
    std::optional<std::string> out;
};

crn::Perceiver<float> make_perceiver(const json& j, const fs::path& base) {
    crn::StrictObject obj(j, "perceiver");
    std::string kind = "random";
    obj.get("kind", kind);
    if (kind == "random") {
        std::vector<int> channels{8, 16, 32};
        std::uint64_t seed = 7;
        obj.get("channels", channels);
        obj.get("seed", seed);
        obj.finish();
        return crn::Perceiver<float>::seeded(crn::PerceiverSpec::random(channels, seed));
    }
    if (kind == "archive") {
        std::string path;
        obj.require("path", path);
        obj.finish();
        return crn::load_perceiver_weights<float>(resolve(base, path));
    }
    throw crn::ConfigError("perceiver: kind must be \"random\" or \"archive\", got \"" + kind + "\"");
}

int run_train(const TrainArgs& args) {
    const fs::path config_path(args.config);
    const fs::path base = config_path.parent_path();
    const json j = read_json(config_path);
    crn::StrictObject run(j, "run config");

    const json* model_j = run.sub("model");
    const json* dataset_j = run.sub("dataset");
    const json* perceiver_j = run.sub("perceiver");
    const json* train_j = run.sub("train");
    std::string output_dir = "run";
    std::string init_from;
    run.get("output_dir", output_dir);
    run.get("init_from", init_from);
    run.finish();
    if (!model_j) throw crn::ConfigError("run config: missing required key \"model\"");
    if (!dataset_j) throw crn::ConfigError("run config: missing required key \"dataset\"");

    json train_cfg = train_j ? *train_j : json::object();
    if (args.seed) train_cfg["seed"] = *args.seed;
    if (args.loss) train_cfg["loss"] = *args.loss;
    if (args.k) train_cfg["k"] = *args.k;
    if (args.max_steps) train_cfg["max_steps"] = *args.max_steps;
    const crn::TrainConfig config = crn::TrainConfig::from_json(train_cfg);

    crn::StrictObject model_obj(*model_j, "model");
    std::string kind;
    json model_config;
    model_obj.require("kind", kind);
    model_obj.require("config", model_config);
    model_obj.finish();
    if (args.k || !model_config.contains("output_multiplicity")) model_config["output_multiplicity"] = config.k;
    auto model = crn::make_generator<float>(kind, model_config);
    model->initialize(config.seed);
    if (!init_from.empty()) {
        // Tensors with a matching name and shape are copied; the rest keep their init.
        const auto archive = crn::read_archive(resolve(base, init_from));
        const auto copied = crn::copy_matching_tensors(archive.tensors, model->parameters());
        std::cout << "initialized " << copied << " of " << model->parameters().size() << " tensors from "
                  << init_from << '\n';
    }

    crn::StrictObject data_obj(*dataset_j, "dataset");
    std::string manifest, remap;
    bool strict_remap = false;
    data_obj.require("manifest", manifest);
    data_obj.get("remap", remap);
    data_obj.get("strict_remap", strict_remap);
    data_obj.finish();
    crn::DatasetOptions options;
    options.classes = model->classes();
    options.divisor = model->resolution_divisor();
    if (!remap.empty()) options.remap = crn::RemapTable::from_json_file(resolve(base, remap), strict_remap);
    const auto dataset = crn::load_dataset(resolve(base, manifest), options);

    const auto perceiver = make_perceiver(perceiver_j ? *perceiver_j : json::object(), base);

    const fs::path out = args.out ? fs::path(*args.out) : resolve(base, output_dir);
    fs::create_directories(out);
    std::ofstream metrics(out / "metrics.jsonl");
    if (!metrics) throw crn::IoError("cannot write " + (out / "metrics.jsonl").string());
    {
        std::ofstream resolved(out / "run_config.json");
        resolved << json{{"model", {{"kind", kind}, {"config", model->config_json()}}}, {"train", config.to_json()}}
                        .dump(2)
                 << '\n';
    }
    crn::TrainOutputs outputs;
    outputs.metrics = &metrics;
    outputs.checkpoint_dir = out / "checkpoints";
    const auto result = crn::train(*model, perceiver, dataset, config, outputs);
    const auto report = crn::memorization_report(*model, dataset);
    std::ofstream(out / "memorization.json") << report.to_json().dump(2) << '\n';
    std::cout << "trained " << result.state.step << " steps";
    if (!result.step_totals.empty())
        std::cout << ", loss " << result.step_totals.front() << " -> " << result.step_totals.back();
    std::cout << "\ncheckpoint: " << (out / "checkpoints" / "final").string() << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// synth
// ----------------------------------------------------------------------------

struct SynthArgs {
    std::string checkpoint;
    std::vector<std::string> layouts;
    std::string out;
    std::string remap;
    std::string select = "all";
    std::string references;
};

int run_synth(const SynthArgs& args) {
    const auto ckpt = crn::load_checkpoint<float>(args.checkpoint);
    std::optional<crn::RemapTable> remap;
    if (!args.remap.empty()) remap = crn::RemapTable::from_json_file(args.remap);
    const auto layouts = expand(args.layouts, ".png");
    if (layouts.empty()) throw crn::ArgumentError("synth: no layout files found");
    const crn::KSelect select = args.select == "best" ? crn::KSelect::best : crn::KSelect::all;
    std::vector<crn::FeatureMap<float>> references;
    if (select == crn::KSelect::best) {
        if (args.references.empty()) throw crn::ArgumentError("synth: --select best needs --references");
        for (const auto& l : layouts)
            references.push_back(crn::load_rgb_image(fs::path(args.references) / l.filename()));
    }
    const auto written = crn::synthesize(*ckpt.model, layouts, remap, args.out, select, references);
    for (const auto& p : written) std::cout << p.string() << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// study
// ----------------------------------------------------------------------------

struct StudyMakeArgs {
    std::string conditions;
    std::vector<std::string> pairs;
    std::string layouts;
    int sentinels = 0;
    std::string sentinel_reference;
    std::string sentinel_weak;
    int sentinel_ms = 4000;
    bool timed = false;
    std::uint64_t seed = 0;
    std::string out;
};

int run_study_make(const StudyMakeArgs& args) {
    const auto conditions = crn::study::load_condition_manifest(args.conditions);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& p : args.pairs) {
        const auto colon = p.find(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == p.size())
            throw crn::ArgumentError("--pair expects A:B, got \"" + p + "\"");
        pairs.emplace_back(p.substr(0, colon), p.substr(colon + 1));
    }
    std::vector<std::string> ids;
    if (!args.layouts.empty()) {
        std::ifstream in(args.layouts);
        if (!in) throw crn::IoError("cannot open layout list " + args.layouts);
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) ids.push_back(line);
    } else {
        const auto& first = conditions.at(pairs.at(0).first);
        for (const auto& f : expand({first.string()}, ".png")) ids.push_back(f.stem().string());
    }
    crn::study::SentinelSpec sentinel{args.sentinels, args.sentinel_reference, args.sentinel_weak, args.sentinel_ms};
    const auto batch = crn::study::make_batch(conditions, pairs, ids, sentinel,
                                              args.timed ? crn::study::TimingMode::timed
                                                         : crn::study::TimingMode::unlimited,
                                              args.seed);
    batch.save(args.out);
    std::cout << batch.trials.size() << " trials (" << batch.sentinel_count() << " sentinels), hash "
              << std::hex << crn::study::batch_hash(batch) << std::dec << '\n';
    return 0;
}

struct StudyServeArgs {
    std::string batch;
    std::string responses;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    int threshold = 2;
};

crn::study::StudyServer* g_server = nullptr;

int run_study_serve(const StudyServeArgs& args) {
    const auto batch = crn::study::StudyBatch::load(args.batch);
    crn::study::ResponseStore store(batch, fs::path(args.responses));
    crn::study::ServerOptions options;
    options.exclusion_threshold = args.threshold;
    if (!args.static_dir.empty()) options.static_dir = fs::path(args.static_dir);
    crn::study::StudyServer server(batch, store, options);
    if (!server.bind(args.host, args.port))
        throw crn::IoError("cannot bind " + args.host + ":" + std::to_string(args.port));
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::cout << "serving " << batch.trials.size() << " trials on http://" << args.host << ":" << args.port
              << std::endl;
    server.listen_after_bind();
    g_server = nullptr;
    return 0;
}

struct StudyReportArgs {
    std::string batch;
    std::string responses;
    int threshold = 2;
    bool json_output = false;
};

int run_study_report(const StudyReportArgs& args) {
    const auto batch = crn::study::StudyBatch::load(args.batch);
    const auto result = crn::study::aggregate(batch, crn::study::read_responses(args.responses), args.threshold);
    if (args.json_output)
        std::cout << result.to_json().dump(2) << '\n';
    else
        std::cout << crn::study::render_report(result);
    return 0;
}

// ----------------------------------------------------------------------------
// params, perceiver, memorization
// ----------------------------------------------------------------------------

struct ParamsArgs {
    std::string config;
    bool full_scale = false;
    int classes = 20;
    int k = 1;
};

int run_params(const ParamsArgs& args) {
    if (args.full_scale) {
        std::cout << crn::param_count(crn::CascadeConfig::full_scale(args.classes, args.k)) << '\n';
        return 0;
    }
    if (args.config.empty()) throw crn::ArgumentError("params: give --config or --full-scale");
    const json j = read_json(args.config);
    crn::StrictObject obj(j, "model");
    std::string kind;
    json config;
    obj.require("kind", kind);
    obj.require("config", config);
    obj.finish();
    std::cout << crn::param_count(kind, config) << '\n';
    return 0;
}

struct ConvertArgs {
    std::string npy;
    std::string out;
};

int run_convert(const ConvertArgs& args) {
    const auto spec = crn::convert_npy_perceiver(args.npy, args.out);
    std::cout << "wrote " << args.out << " (width divisor " << spec.width_divisor << ", taps";
    for (const auto& t : spec.taps) std::cout << ' ' << t;
    std::cout << ")\n";
    return 0;
}

struct MemorizationArgs {
    std::string checkpoint;
    std::string manifest;
    std::string remap;
};

int run_memorization(const MemorizationArgs& args) {
    const auto ckpt = crn::load_checkpoint<float>(args.checkpoint);
    crn::DatasetOptions options;
    options.classes = ckpt.model->classes();
    options.divisor = ckpt.model->resolution_divisor();
    if (!args.remap.empty()) options.remap = crn::RemapTable::from_json_file(args.remap);
    const auto dataset = crn::load_dataset(args.manifest, options);
    std::cout << crn::memorization_report(*ckpt.model, dataset).to_json().dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cascaded refinement network toolkit"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* cmd_train = app.add_subcommand("train", "Train a generator from a run config");
    cmd_train->add_option("--config", train.config, "Run config JSON (model, dataset, perceiver, train)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd_train->add_option("--seed", train.seed, "Override train.seed (init and data order)");
    cmd_train->add_option("--loss", train.loss, "Override train.loss")
        ->check(CLI::IsMember({"eq1", "eq2", "eq3", "eq4"}));
    cmd_train->add_option("--k", train.k, "Override train.k and the model's output count");
    cmd_train->add_option("--max-steps", train.max_steps, "Stop after this many steps");
    cmd_train->add_option("--out", train.out, "Output directory (default: output_dir from the config)");

    SynthArgs synth;
    auto* cmd_synth = app.add_subcommand("synth", "Synthesize images from label maps");
    cmd_synth->add_option("--checkpoint", synth.checkpoint, "Checkpoint directory")->required();
    cmd_synth->add_option("--layout", synth.layouts, "Label map file or directory of .png label maps")->required();
    cmd_synth->add_option("--out", synth.out, "Output directory")->required();
    cmd_synth->add_option("--remap", synth.remap, "Remap table JSON (raw id -> train id)");
    cmd_synth->add_option("--select", synth.select, "Write all k outputs or the best match")
        ->check(CLI::IsMember({"all", "best"}));
    cmd_synth->add_option("--references", synth.references, "Directory of reference images for --select best");

    auto* cmd_study = app.add_subcommand("study", "Pairwise perceptual study");
    cmd_study->require_subcommand(1);

    StudyMakeArgs make;
    auto* cmd_make = cmd_study->add_subcommand("make", "Build a shuffled trial batch");
    cmd_make->add_option("--conditions", make.conditions, "Condition manifest JSON {id: directory}")
        ->required()
        ->check(CLI::ExistingFile);
    cmd_make->add_option("--pair", make.pairs, "Compared conditions A:B (repeatable)")->required();
    cmd_make->add_option("--layouts", make.layouts, "File listing layout ids, one per line");
    cmd_make->add_option("--sentinels", make.sentinels, "Number of sentinel trials");
    cmd_make->add_option("--sentinel-reference", make.sentinel_reference, "Condition raters should prefer");
    cmd_make->add_option("--sentinel-weak", make.sentinel_weak, "Known-weak condition for sentinels");
    cmd_make->add_option("--sentinel-ms", make.sentinel_ms, "Sentinel display time in timed mode");
    cmd_make->add_flag("--timed", make.timed, "Draw display times from 125..8000 ms");
    cmd_make->add_option("--seed", make.seed, "Shuffle seed");
    cmd_make->add_option("--out", make.out, "Batch JSON to write")->required();

    StudyServeArgs serve;
    auto* cmd_serve = cmd_study->add_subcommand("serve", "Serve a batch over HTTP");
    cmd_serve->add_option("--batch", serve.batch, "Batch JSON")->required()->check(CLI::ExistingFile);
    cmd_serve->add_option("--responses", serve.responses, "Response log (JSONL, appended)")->required();
    cmd_serve->add_option("--host", serve.host, "Bind address");
    cmd_serve->add_option("--port", serve.port, "Port");
    cmd_serve->add_option("--static", serve.static_dir, "Directory served at /");
    cmd_serve->add_option("--threshold", serve.threshold, "Failed sentinels that exclude a session");

    StudyReportArgs report;
    auto* cmd_report = cmd_study->add_subcommand("report", "Aggregate responses");
    cmd_report->add_option("--batch", report.batch, "Batch JSON")->required()->check(CLI::ExistingFile);
    cmd_report->add_option("--responses", report.responses, "Response log")->required()->check(CLI::ExistingFile);
    cmd_report->add_option("--threshold", report.threshold, "Failed sentinels that exclude a session");
    cmd_report->add_flag("--json", report.json_output, "Print the result as JSON");

    auto* cmd_perceiver = app.add_subcommand("perceiver", "Perceiver weights");
    cmd_perceiver->require_subcommand(1);
    ConvertArgs convert;
    auto* cmd_convert = cmd_perceiver->add_subcommand("convert", "Import per-layer .npy weights");
    cmd_convert->add_option("--npy", convert.npy, "Directory of <layer>.weight.npy / .bias.npy")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_convert->add_option("--out", convert.out, "Archive directory to write")->required();

    ParamsArgs params;
    auto* cmd_params = app.add_subcommand("params", "Print the parameter count of a model config");
    cmd_params->add_option("--config", params.config, "Model JSON {kind, config}");
    cmd_params->add_flag("--full-scale", params.full_scale, "Use the 9-module 1024x2048 cascade");
    cmd_params->add_option("--classes", params.classes, "Classes for --full-scale");
    cmd_params->add_option("--k", params.k, "Output images for --full-scale");

    MemorizationArgs memo;
    auto* cmd_memo = app.add_subcommand("memorization", "Per-pair L1 against the mean-image predictor");
    cmd_memo->add_option("--checkpoint", memo.checkpoint, "Checkpoint directory")->required();
    cmd_memo->add_option("--manifest", memo.manifest, "Dataset manifest (JSONL)")->required();
    cmd_memo->add_option("--remap", memo.remap, "Remap table JSON");

    // Top-level help spells out the options of every command.
    app.footer([&app] {
        std::string text = "Commands:\n";
        const auto all = [](const CLI::App*) { return true; };
        for (const CLI::App* sub : app.get_subcommands(all)) {
            const auto nested = sub->get_subcommands(all);
            if (nested.empty()) text += "\n" + sub->help("", CLI::AppFormatMode::Sub);
            for (const CLI::App* leaf : nested)
                text += "\n" + sub->get_name() + " " + leaf->help("", CLI::AppFormatMode::Sub);
        }
        return text;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*cmd_train) return run_train(train);
        if (*cmd_synth) return run_synth(synth);
        if (*cmd_make) return run_study_make(make);
        if (*cmd_serve) return run_study_serve(serve);
        if (*cmd_report) return run_study_report(report);
        if (*cmd_convert) return run_convert(convert);
        if (*cmd_params) return run_params(params);
        if (*cmd_memo) return run_memorization(memo);
    } catch (const crn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const crn::SchemaError& e) {
        std::cerr << "schema error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const crn::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const crn::DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const crn::NotFoundError& e) {
        std::cerr << "not found: " << e.what() << '\n';
        return kExitUsage;
    } catch (const crn::ArgumentError& e) {
        std::cerr << "argument error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
