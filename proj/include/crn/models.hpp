#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "json.hpp"

#include "crn/baselines.hpp"
#include "crn/cascade.hpp"

namespace crn {

/// Builds a generator of `kind` ("crn", "fullres", "encdec") from its JSON
/// config. Weights are zero until initialized or loaded.
template <typename Scalar>
std::unique_ptr<Generator<Scalar>> make_generator(const std::string& kind, const nlohmann::json& config);

/// Closed-form parameter count for any generator kind.
std::int64_t param_count(const std::string& kind, const nlohmann::json& config);

struct CheckpointHeader {
    std::string kind;
    nlohmann::json config;
    std::int64_t step = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static CheckpointHeader from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct LoadedCheckpoint {
    CheckpointHeader header;
    std::unique_ptr<Generator<Scalar>> model;
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& dir, const Generator<Scalar>& model, std::int64_t step,
                     std::uint64_t seed);

/// Throws SchemaError on any manifest, header or tensor mismatch.
template <typename Scalar = float>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& dir);

}  // namespace crn
