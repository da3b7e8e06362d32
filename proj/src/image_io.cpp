#include "crn/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace crn {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void flush_nothing(png_structp) {}

}  // namespace

RawImage read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
    if (!file) throw IoError("cannot open image " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    RawImage img;
    std::vector<png_bytep> rows;
    std::vector<std::uint8_t> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth < 8) {
        png_set_packing(png);
        if (color == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(png);
        depth = 8;
    }
    if (depth == 16) png_set_swap(png);
    png_read_update_info(png, info);

    img.height = static_cast<int>(png_get_image_height(png, info));
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.channels = png_get_channels(png, info);
    img.bit_depth = depth;
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    buffer.resize(row_bytes * static_cast<std::size_t>(img.height));
    rows.resize(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + row_bytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const std::size_t n = static_cast<std::size_t>(img.height) * img.width * img.channels;
    img.samples.resize(n);
    if (depth == 16) {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint16_t v;
            std::memcpy(&v, buffer.data() + 2 * i, 2);
            img.samples[i] = v;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) img.samples[i] = buffer[i];
    }
    return img;
}

std::vector<std::uint8_t> encode_png(int height, int width, int channels,
                                     const std::vector<std::uint8_t>& samples) {
    if (channels != 1 && channels != 3)
        throw ArgumentError("encode_png: only gray or RGB output is supported");
    if (samples.size() != static_cast<std::size_t>(height) * width * channels)
        throw DimensionError("encode_png: sample count does not match dimensions");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    std::vector<std::uint8_t> out;
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed");
    }
    png_set_write_fn(png, &out, append_bytes, flush_nothing);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        rows[y] = const_cast<png_bytep>(samples.data() + static_cast<std::size_t>(y) * width * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& samples) {
    const auto bytes = encode_png(height, width, channels, samples);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + path.string());
}

FeatureMap<float> load_rgb_image(const std::filesystem::path& path) {
    const RawImage raw = read_png(path);
    const float scale = raw.bit_depth == 16 ? 1.0f / 65535.0f : 1.0f / 255.0f;
    FeatureMap<float> img(3, raw.height, raw.width);
    const int step = raw.channels;
    for (int i = 0; i < raw.height * raw.width; ++i) {
        for (int c = 0; c < 3; ++c) {
            // gray (1 or 2 channels) replicates sample 0; alpha is ignored
            const int src = step >= 3 ? c : 0;
            img.data(c, i) = static_cast<float>(raw.samples[static_cast<std::size_t>(i) * step + src]) * scale;
        }
    }
    return img;
}

std::vector<std::uint8_t> quantize_rgb(const FeatureMap<float>& image) {
    if (image.channels() != 3) throw DimensionError("expected a 3-channel image, got " + shape_string(image));
    const int n = image.pixels();
    std::vector<std::uint8_t> samples(static_cast<std::size_t>(n) * 3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(image.data(c, i), 0.0f, 1.0f);
            samples[static_cast<std::size_t>(i) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    return samples;
}

void save_rgb_image(const std::filesystem::path& path, const FeatureMap<float>& image) {
    write_png(path, image.height, image.width, 3, quantize_rgb(image));
}

}  // namespace crn
