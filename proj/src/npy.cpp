#include "crn/npy.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <regex>
#include <string>

#include "crn/errors.hpp"

namespace crn {

NpyArray read_npy(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    char magic[6];
    f.read(magic, 6);
    if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw SchemaError(path.string() + " is not an .npy file");
    unsigned char version[2];
    f.read(reinterpret_cast<char*>(version), 2);
    std::uint32_t header_len = 0;
    if (version[0] == 1) {
        unsigned char b[2];
        f.read(reinterpret_cast<char*>(b), 2);
        header_len = b[0] | (b[1] << 8);
    } else {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::string header(header_len, '\0');
    f.read(header.data(), header_len);
    if (!f) throw SchemaError(path.string() + ": truncated header");

    std::smatch m;
    if (!std::regex_search(header, m, std::regex("'descr':\\s*'([<|=]?)([fi])(\\d)'")))
        throw SchemaError(path.string() + ": missing dtype");
    const char kind = m[2].str()[0];
    const int width = std::stoi(m[3].str());
    if (kind != 'f' || (width != 4 && width != 8))
        throw SchemaError(path.string() + ": only float32/float64 arrays are supported");
    if (std::regex_search(header, m, std::regex("'fortran_order':\\s*True")))
        throw SchemaError(path.string() + ": Fortran-ordered arrays are not supported");
    if (!std::regex_search(header, m, std::regex("'shape':\\s*\\(([^)]*)\\)")))
        throw SchemaError(path.string() + ": missing shape");

    NpyArray a;
    const std::string dims = m[1].str();
    std::size_t count = 1;
    std::regex num("\\d+");
    for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it) {
        a.shape.push_back(std::stoi(it->str()));
        count *= static_cast<std::size_t>(a.shape.back());
    }
    a.values.resize(count);
    if (width == 4) {
        f.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(4 * count));
    } else {
        std::vector<double> tmp(count);
        f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(8 * count));
        for (std::size_t i = 0; i < count; ++i) a.values[i] = static_cast<float>(tmp[i]);
    }
    if (!f) throw SchemaError(path.string() + ": truncated data");
    return a;
}

void write_npy(const std::filesystem::path& path, const std::vector<int>& shape,
               const std::vector<float>& values) {
    std::string dims;
    for (int d : shape) dims += std::to_string(d) + ", ";
    if (shape.size() > 1) dims.erase(dims.size() - 1);
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + dims + "), }";
    const std::size_t total = 10 + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header += '\n';
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f.write("\x93NUMPY\x01\x00", 8);
    const std::uint16_t len = static_cast<std::uint16_t>(header.size());
    const unsigned char b[2] = {static_cast<unsigned char>(len & 0xff), static_cast<unsigned char>(len >> 8)};
    f.write(reinterpret_cast<const char*>(b), 2);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(4 * values.size()));
}

}  // namespace crn
