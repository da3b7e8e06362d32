#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crn/errors.hpp"

namespace crn {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// One named, flat parameter tensor. `shape` is informational (archive
/// manifests and validation); storage is always contiguous.
template <typename Scalar>
struct Parameter {
    std::string name;
    std::vector<int> shape;
    Vector<Scalar> values;
};

/// Ordered, named collection of parameter tensors. Layers hold indices into
/// it, so a zero-filled clone doubles as a gradient accumulator.
template <typename Scalar>
class ParameterSet {
public:
    using Index = std::size_t;

    Index add(std::string name, std::vector<int> shape) {
        Eigen::Index n = 1;
        for (int d : shape) {
            if (d <= 0) throw ArgumentError("parameter " + name + " has non-positive extent");
            n *= d;
        }
        params_.push_back({std::move(name), std::move(shape), Vector<Scalar>::Zero(n)});
        return params_.size() - 1;
    }

    Index size() const { return params_.size(); }
    Parameter<Scalar>& operator[](Index i) { return params_[i]; }
    const Parameter<Scalar>& operator[](Index i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    Vector<Scalar>& values(Index i) { return params_[i].values; }
    const Vector<Scalar>& values(Index i) const { return params_[i].values; }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.values.size();
        return n;
    }

    /// Same names and shapes, all values zero.
    ParameterSet zeros_like() const {
        ParameterSet r;
        r.params_.reserve(params_.size());
        for (const auto& p : params_)
            r.params_.push_back({p.name, p.shape, Vector<Scalar>::Zero(p.values.size())});
        return r;
    }

    void set_zero() {
        for (auto& p : params_) p.values.setZero();
    }

    bool all_finite() const {
        for (const auto& p : params_)
            if (!p.values.allFinite()) return false;
        return true;
    }

    const Parameter<Scalar>* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    template <typename Other>
    ParameterSet<Other> cast() const {
        ParameterSet<Other> r;
        for (const auto& p : params_) {
            auto i = r.add(p.name, p.shape);
            r.values(i) = p.values.template cast<Other>();
        }
        return r;
    }

private:
    std::vector<Parameter<Scalar>> params_;
};

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename Scalar>
void init_uniform_fan_in(Vector<Scalar>& v, int fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
std::uint64_t content_hash(const ParameterSet<Scalar>& set) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : set) {
        const auto* b = reinterpret_cast<const unsigned char*>(p.values.data());
        const std::size_t n = sizeof(Scalar) * static_cast<std::size_t>(p.values.size());
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace crn
