#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>

#include "crn/errors.hpp"

namespace crn {

template <typename Scalar>
using PlaneMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Channel-major feature tensor. Row `c` of `data` holds channel c as a
/// row-major height x width plane, so a 1x1 convolution is a plain matrix
/// product and a 3x3 convolution is a product against im2col columns.
template <typename Scalar>
struct FeatureMap {
    int height = 0;
    int width = 0;
    PlaneMatrix<Scalar> data;

    FeatureMap() = default;
    FeatureMap(int channels, int h, int w) : height(h), width(w), data(channels, h * w) {}

    static FeatureMap Zero(int channels, int h, int w) {
        FeatureMap f(channels, h, w);
        f.data.setZero();
        return f;
    }
    static FeatureMap Constant(int channels, int h, int w, Scalar v) {
        FeatureMap f(channels, h, w);
        f.data.setConstant(v);
        return f;
    }

    int channels() const { return static_cast<int>(data.rows()); }
    int pixels() const { return height * width; }
    Eigen::Index size() const { return data.size(); }

    Scalar& at(int c, int y, int x) { return data(c, y * width + x); }
    Scalar at(int c, int y, int x) const { return data(c, y * width + x); }

    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels() == o.channels();
    }

    template <typename Other>
    FeatureMap<Other> cast() const {
        FeatureMap<Other> r;
        r.height = height;
        r.width = width;
        r.data = data.template cast<Other>();
        return r;
    }

    bool all_finite() const { return data.allFinite(); }
};

template <typename Scalar>
std::string shape_string(const FeatureMap<Scalar>& f) {
    return std::to_string(f.channels()) + "x" + std::to_string(f.height) + "x" +
           std::to_string(f.width);
}

template <typename Scalar>
void require_same_shape(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b,
                        const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape " + shape_string(a) + " vs " +
                             shape_string(b));
}

/// Channels [first, first + count) as a new map.
template <typename Scalar>
FeatureMap<Scalar> slice_channels(const FeatureMap<Scalar>& f, int first, int count) {
    if (first < 0 || count < 0 || first + count > f.channels())
        throw DimensionError("slice_channels: range out of bounds for " + shape_string(f));
    FeatureMap<Scalar> r(count, f.height, f.width);
    r.data = f.data.middleRows(first, count);
    return r;
}

/// Stacks `a` above `b` along the channel axis.
template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
    if (a.height != b.height || a.width != b.width)
        throw DimensionError("concat_channels: " + shape_string(a) + " vs " + shape_string(b));
    FeatureMap<Scalar> r(a.channels() + b.channels(), a.height, a.width);
    r.data.topRows(a.channels()) = a.data;
    r.data.bottomRows(b.channels()) = b.data;
    return r;
}

/// FNV-1a over the raw bytes; used for determinism snapshots.
template <typename Scalar>
std::uint64_t content_hash(const FeatureMap<Scalar>& f) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    int dims[3] = {f.channels(), f.height, f.width};
    mix(dims, sizeof(dims));
    mix(f.data.data(), sizeof(Scalar) * static_cast<std::size_t>(f.data.size()));
    return h;
}

}  // namespace crn
