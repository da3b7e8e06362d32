#include "crn/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace crn {

namespace {

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

void write_archive(const std::filesystem::path& dir, const nlohmann::json& header,
                   const ParameterSet<float>& tensors) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create archive directory " + dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = kArchiveFormat;
    manifest["header"] = header;
    manifest["blob"] = kArchiveBlob;
    manifest["tensors"] = nlohmann::json::array();

    std::ofstream blob(dir / kArchiveBlob, std::ios::binary);
    if (!blob) throw IoError("cannot write " + (dir / kArchiveBlob).string());
    std::uint64_t offset = 0;
    for (const auto& p : tensors) {
        manifest["tensors"].push_back(
            {{"name", p.name}, {"shape", p.shape}, {"dtype", "f32"}, {"byte_offset", offset}});
        for (Eigen::Index i = 0; i < p.values.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, &p.values[i], 4);
            bits = to_little_endian(bits);
            blob.write(reinterpret_cast<const char*>(&bits), 4);
        }
        offset += 4ull * static_cast<std::uint64_t>(p.values.size());
    }
    if (!blob) throw IoError("short write to " + (dir / kArchiveBlob).string());

    std::ofstream m(dir / kArchiveManifest);
    if (!m) throw IoError("cannot write " + (dir / kArchiveManifest).string());
    m << manifest.dump(2) << "\n";
}

WeightArchive read_archive(const std::filesystem::path& dir) {
    const auto manifest_path = dir / kArchiveManifest;
    std::ifstream m(manifest_path);
    if (!m) throw IoError("cannot open archive manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        m >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("archive manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
    }
    if (!manifest.is_object() || manifest.value("format", "") != kArchiveFormat)
        throw SchemaError("archive manifest " + manifest_path.string() + ": missing or unknown \"format\"");
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
        throw SchemaError("archive manifest " + manifest_path.string() + ": \"tensors\" must be an array");

    const auto blob_path = dir / manifest.value("blob", std::string(kArchiveBlob));
    std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
    if (!blob) throw IoError("cannot open archive blob " + blob_path.string());
    const auto blob_size = static_cast<std::uint64_t>(blob.tellg());
    std::vector<char> bytes(blob_size);
    blob.seekg(0);
    blob.read(bytes.data(), static_cast<std::streamsize>(blob_size));

    WeightArchive archive;
    archive.header = manifest.value("header", nlohmann::json::object());
    try {
    for (const auto& t : manifest["tensors"]) {
        const std::string name = t.value("name", "");
        if (name.empty()) throw SchemaError("archive tensor entry without a name");
        if (t.value("dtype", "") != "f32")
            throw SchemaError("tensor \"" + name + "\": unsupported dtype (only f32)");
        if (!t.contains("shape") || !t["shape"].is_array() || !t.contains("byte_offset"))
            throw SchemaError("tensor \"" + name + "\": missing shape or byte_offset");
        std::vector<int> shape;
        std::uint64_t count = 1;
        for (const auto& d : t["shape"]) {
            if (!d.is_number_integer() || d.get<int>() <= 0)
                throw SchemaError("tensor \"" + name + "\": invalid shape entry");
            shape.push_back(d.get<int>());
            count *= static_cast<std::uint64_t>(d.get<int>());
        }
        const auto offset = t["byte_offset"].get<std::uint64_t>();
        if (offset % 4 != 0 || offset + 4 * count > blob_size)
            throw SchemaError("tensor \"" + name + "\": byte range [" + std::to_string(offset) + ", " +
                              std::to_string(offset + 4 * count) + ") exceeds blob of " +
                              std::to_string(blob_size) + " bytes");
        if (archive.tensors.find(name)) throw SchemaError("duplicate tensor \"" + name + "\"");
        const auto idx = archive.tensors.add(name, shape);
        auto& v = archive.tensors.values(idx);
        for (std::uint64_t i = 0; i < count; ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, bytes.data() + offset + 4 * i, 4);
            bits = to_little_endian(bits);
            std::memcpy(&v[static_cast<Eigen::Index>(i)], &bits, 4);
        }
    }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("archive manifest " + manifest_path.string() + ": " + e.what());
    }
    return archive;
}

}  // namespace crn
