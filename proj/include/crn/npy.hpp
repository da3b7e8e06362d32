#pragma once

#include <filesystem>
#include <vector>

namespace crn {

/// A C-ordered NumPy array converted to float32.
struct NpyArray {
    std::vector<int> shape;
    std::vector<float> values;
};

/// Reads .npy version 1/2 files holding little-endian f4 or f8 data in C
/// order.
NpyArray read_npy(const std::filesystem::path& path);

void write_npy(const std::filesystem::path& path, const std::vector<int>& shape,
               const std::vector<float>& values);

}  // namespace crn
