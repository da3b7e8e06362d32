#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "crn/parameters.hpp"

namespace crn {

/// On-disk weight archive: a directory holding `manifest.json`
///   {"format": "crn-weights-v1", "header": {...},
///    "tensors": [{"name", "shape", "dtype": "f32", "byte_offset"}], "blob": "weights.bin"}
/// and a flat little-endian float32 blob. The header is free-form JSON
/// (model kind, config, step, seed, ...).
struct WeightArchive {
    nlohmann::json header;
    ParameterSet<float> tensors;
};

inline constexpr const char* kArchiveFormat = "crn-weights-v1";
inline constexpr const char* kArchiveManifest = "manifest.json";
inline constexpr const char* kArchiveBlob = "weights.bin";

void write_archive(const std::filesystem::path& dir, const nlohmann::json& header,
                   const ParameterSet<float>& tensors);

template <typename Scalar>
void write_archive(const std::filesystem::path& dir, const nlohmann::json& header,
                   const ParameterSet<Scalar>& tensors) {
    write_archive(dir, header, tensors.template cast<float>());
}

/// Validates the manifest (dtype, offsets, blob length) and throws
/// SchemaError naming the first problem found.
WeightArchive read_archive(const std::filesystem::path& dir);

/// Copies every tensor of `source` into the same-named tensor of `target`.
/// Missing names or shape mismatches throw SchemaError listing the tensor;
/// with `allow_extra_target` unset, tensors of `target` absent from
/// `source` are an error as well.
template <typename Scalar>
void assign_tensors(const ParameterSet<float>& source, ParameterSet<Scalar>& target,
                    bool allow_extra_target = false) {
    for (auto& p : target) {
        const auto* src = source.find(p.name);
        if (!src) {
            if (allow_extra_target) continue;
            throw SchemaError("archive is missing tensor \"" + p.name + "\"");
        }
        if (src->shape != p.shape) {
            std::string want, got;
            for (int d : p.shape) want += std::to_string(d) + ",";
            for (int d : src->shape) got += std::to_string(d) + ",";
            throw SchemaError("tensor \"" + p.name + "\" has shape [" + got + "], expected [" + want + "]");
        }
        p.values = src->values.template cast<Scalar>();
    }
}

/// Copies tensors whose name and shape both match; returns how many were
/// copied. Used to seed a larger model from a smaller checkpoint.
template <typename Scalar>
std::size_t copy_matching_tensors(const ParameterSet<float>& source, ParameterSet<Scalar>& target) {
    std::size_t copied = 0;
    for (auto& p : target) {
        const auto* src = source.find(p.name);
        if (!src || src->shape != p.shape) continue;
        p.values = src->values.template cast<Scalar>();
        ++copied;
    }
    return copied;
}

}  // namespace crn
