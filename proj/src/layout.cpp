#include "crn/layout.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "crn/image_io.hpp"
#include "crn/layers.hpp"

namespace crn {

int RemapTable::class_count() const {
    int top = kVoidLabel;
    for (const auto& [raw, train] : table) top = std::max(top, train);
    return top + 1;
}

RemapTable RemapTable::from_json_file(const std::filesystem::path& path, bool strict) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open remap table " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("remap table " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw SchemaError("remap table must be a JSON object of raw id -> train id");
    RemapTable r;
    r.strict = strict;
    for (const auto& [key, value] : j.items()) {
        int raw = 0;
        try {
            std::size_t used = 0;
            raw = std::stoi(key, &used);
            if (used != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
            throw SchemaError("remap table key is not an integer: \"" + key + "\"");
        }
        if (!value.is_number_integer() || value.get<int>() < 0)
            throw SchemaError("remap table value for " + key + " must be a non-negative integer");
        r.table[raw] = value.get<int>();
    }
    return r;
}

LabelGrid load_label_map(const std::filesystem::path& path, const std::optional<RemapTable>& remap) {
    const RawImage raw = read_png(path);
    if (raw.channels != 1 || raw.bit_depth != 8)
        throw IoError("label map " + path.string() + " must be 8-bit single-channel (got " +
                      std::to_string(raw.channels) + " channels, " + std::to_string(raw.bit_depth) +
                      " bits)");
    LabelGrid grid;
    grid.labels.resize(raw.height, raw.width);
    for (int i = 0; i < raw.height * raw.width; ++i) {
        const int id = raw.samples[static_cast<std::size_t>(i)];
        int label = id;
        if (remap) {
            auto it = remap->table.find(id);
            if (it != remap->table.end()) {
                label = it->second;
            } else if (remap->strict) {
                throw SchemaError("label map " + path.string() + ": raw id " + std::to_string(id) +
                                  " has no entry in the remap table");
            } else {
                label = kVoidLabel;
            }
        }
        grid.labels.data()[i] = label;
    }
    return grid;
}

void save_label_map(const std::filesystem::path& path, const LabelGrid& grid) {
    std::vector<std::uint8_t> samples(static_cast<std::size_t>(grid.labels.size()));
    for (Eigen::Index i = 0; i < grid.labels.size(); ++i) {
        const int v = grid.labels.data()[i];
        if (v < 0 || v > 255) throw ArgumentError("label " + std::to_string(v) + " does not fit in 8 bits");
        samples[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v);
    }
    write_png(path, grid.height(), grid.width(), 1, samples);
}

SemanticLayout one_hot(const LabelGrid& grid, int classes) {
    if (grid.height() <= 0 || grid.width() <= 0) throw DimensionError("one_hot: empty label grid");
    if (classes <= 0) throw ArgumentError("one_hot: class count must be positive");
    SemanticLayout layout{FeatureMap<float>::Zero(classes, grid.height(), grid.width())};
    for (Eigen::Index i = 0; i < grid.labels.size(); ++i) {
        const int label = grid.labels.data()[i];
        if (label < 0 || label >= classes)
            throw DimensionError("one_hot: label " + std::to_string(label) + " outside [0, " +
                                 std::to_string(classes) + ")");
        layout.values.data(label, i) = 1.0f;
    }
    return layout;
}

LabelGrid argmax(const SemanticLayout& layout) {
    LabelGrid grid;
    grid.labels.resize(layout.height(), layout.width());
    for (int i = 0; i < layout.values.pixels(); ++i) {
        Eigen::Index best = 0;
        layout.values.data.col(i).maxCoeff(&best);
        grid.labels.data()[i] = static_cast<int>(best);
    }
    return grid;
}

SemanticLayout downsample_layout(const SemanticLayout& layout, int target_h, int target_w) {
    return SemanticLayout{block_average(layout.values, target_h, target_w)};
}

std::vector<FeatureMap<float>> class_masks(const SemanticLayout& layout,
                                           const std::vector<std::pair<int, int>>& resolutions) {
    std::vector<FeatureMap<float>> masks;
    masks.reserve(resolutions.size());
    for (const auto& [h, w] : resolutions) masks.push_back(block_average(layout.values, h, w));
    return masks;
}

void require_partition(const FeatureMap<float>& masks, double tolerance, const char* what) {
    const double err = partition_error(masks);
    if (!(err <= tolerance)) {
        std::ostringstream msg;
        msg << what << ": class masks deviate from a partition of unity by " << err
            << " (tolerance " << tolerance << ")";
        throw InvariantError(msg.str());
    }
}

std::vector<TrainingPair> load_dataset(const std::filesystem::path& manifest,
                                       const DatasetOptions& options) {
    std::ifstream f(manifest);
    if (!f) throw IoError("cannot open dataset manifest " + manifest.string());
    const auto base = manifest.parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base / path;
    };
    const int classes = options.classes > 0 ? options.classes
                        : options.remap     ? options.remap->class_count()
                                            : 0;
    if (classes <= 0) throw ConfigError("dataset: class count is unknown (set classes or a remap table)");

    std::vector<TrainingPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!rec.contains("layout") || !rec.contains("image") || !rec["layout"].is_string() ||
            !rec["image"].is_string())
            throw SchemaError(manifest.string() + ":" + std::to_string(line_no) +
                              ": record needs string fields \"layout\" and \"image\"");
        const auto layout_path = resolve(rec["layout"].get<std::string>());
        TrainingPair pair;
        pair.id = layout_path.stem().string();
        pair.layout = one_hot(load_label_map(layout_path, options.remap), classes);
        pair.image = load_rgb_image(resolve(rec["image"].get<std::string>()));
        if (pair.image.height != pair.layout.height() || pair.image.width != pair.layout.width())
            throw DimensionError(manifest.string() + ":" + std::to_string(line_no) +
                                 ": image and layout sizes differ");
        if (pair.layout.height() % options.divisor != 0 || pair.layout.width() % options.divisor != 0)
            throw DimensionError(manifest.string() + ":" + std::to_string(line_no) + ": layout " +
                                 std::to_string(pair.layout.height()) + "x" +
                                 std::to_string(pair.layout.width()) + " is not divisible by " +
                                 std::to_string(options.divisor));
        pairs.push_back(std::move(pair));
    }
    if (pairs.empty()) throw ConfigError("dataset manifest " + manifest.string() + " has no records");
    return pairs;
}

}  // namespace crn
