#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crn/feature_map.hpp"

namespace crn {

/// Class index 0 is the void label ("class not specified").
inline constexpr int kVoidLabel = 0;

using LabelMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LabelGrid {
    LabelMatrix labels;

    int height() const { return static_cast<int>(labels.rows()); }
    int width() const { return static_cast<int>(labels.cols()); }
};

/// Per-pixel class distribution, c channels. One-hot at source resolution,
/// soft after downsampling; every pixel sums to one.
struct SemanticLayout {
    FeatureMap<float> values;

    int classes() const { return values.channels(); }
    int height() const { return values.height; }
    int width() const { return values.width; }
};

/// Raw dataset id -> train id. Ids missing from the table become void,
/// unless `strict` is set, in which case they are rejected.
struct RemapTable {
    std::map<int, int> table;
    bool strict = false;

    /// Largest train id + 1 (void included).
    int class_count() const;

    static RemapTable from_json_file(const std::filesystem::path& path, bool strict = false);
};

/// Reads an 8-bit single-channel (gray or palette-indexed) label image.
/// Without a remap table the stored value is the label.
LabelGrid load_label_map(const std::filesystem::path& path,
                         const std::optional<RemapTable>& remap = std::nullopt);

void save_label_map(const std::filesystem::path& path, const LabelGrid& grid);

SemanticLayout one_hot(const LabelGrid& grid, int classes);

/// Per-pixel argmax over classes (lowest index wins ties).
LabelGrid argmax(const SemanticLayout& layout);

/// Block-average pooling of every class channel.
SemanticLayout downsample_layout(const SemanticLayout& layout, int target_h, int target_w);

/// One c-channel mask stack per requested resolution; channel p at entry r
/// is the class-p mask at resolutions[r].
std::vector<FeatureMap<float>> class_masks(const SemanticLayout& layout,
                                           const std::vector<std::pair<int, int>>& resolutions);

/// Largest per-pixel deviation of the channel sum from one.
template <typename Scalar>
double partition_error(const FeatureMap<Scalar>& masks) {
    if (masks.size() == 0) return 0.0;
    return (masks.data.template cast<double>().colwise().sum().array() - 1.0).abs().maxCoeff();
}

/// Throws InvariantError when partition_error exceeds `tolerance`.
void require_partition(const FeatureMap<float>& masks, double tolerance, const char* what);

/// Source pair for training: a layout and its reference photograph.
struct TrainingPair {
    std::string id;
    SemanticLayout layout;
    FeatureMap<float> image;
};

struct DatasetOptions {
    int classes = 0;
    std::optional<RemapTable> remap;
    /// Layout height/width must be divisible by this (2^(modules-1)).
    int divisor = 1;
};

/// Reads a JSONL manifest of {"layout": path, "image": path}; relative paths
/// are resolved against the manifest's directory.
std::vector<TrainingPair> load_dataset(const std::filesystem::path& manifest,
                                       const DatasetOptions& options);

}  // namespace crn
