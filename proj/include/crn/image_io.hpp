#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "crn/feature_map.hpp"

namespace crn {

/// Decoded PNG samples, interleaved, before any normalization. Palette
/// images are kept as raw indices (not expanded to colors).
struct RawImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    int bit_depth = 8;
    std::vector<std::uint16_t> samples;
};

RawImage read_png(const std::filesystem::path& path);

/// Writes 8-bit samples; `channels` is 1 (gray) or 3 (RGB).
void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& samples);

/// RGB image normalized to [0, 1] (8- or 16-bit source). Gray sources are
/// replicated to three channels; alpha is dropped.
FeatureMap<float> load_rgb_image(const std::filesystem::path& path);

/// Clamps to [0, 1] and quantizes with round-to-nearest.
void save_rgb_image(const std::filesystem::path& path, const FeatureMap<float>& image);

/// In-memory variant of save_rgb_image (used to serve resized stimuli).
std::vector<std::uint8_t> encode_png(int height, int width, int channels,
                                     const std::vector<std::uint8_t>& samples);

std::vector<std::uint8_t> quantize_rgb(const FeatureMap<float>& image);

}  // namespace crn
