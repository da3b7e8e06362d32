#include "crn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace crn {

template <typename Scalar>
PlaneMatrix<Scalar> im2col(const FeatureMap<Scalar>& x, int kernel, int dilation) {
    const int h = x.height;
    const int w = x.width;
    const int half = kernel / 2;
    PlaneMatrix<Scalar> cols(static_cast<Eigen::Index>(x.channels()) * kernel * kernel, h * w);
    for (int c = 0; c < x.channels(); ++c) {
        const Scalar* src = x.data.row(c).data();
        for (int ky = 0; ky < kernel; ++ky) {
            const int oy = (ky - half) * dilation;
            for (int kx = 0; kx < kernel; ++kx) {
                const int ox = (kx - half) * dilation;
                Scalar* dst = cols.row((c * kernel + ky) * kernel + kx).data();
                const int x_lo = std::clamp(-ox, 0, w);
                const int x_hi = std::clamp(w - ox, 0, w);
                for (int y = 0; y < h; ++y) {
                    Scalar* row = dst + y * w;
                    const int sy = y + oy;
                    if (sy < 0 || sy >= h) {
                        std::fill(row, row + w, Scalar(0));
                        continue;
                    }
                    std::fill(row, row + x_lo, Scalar(0));
                    const Scalar* s = src + sy * w + ox;
                    for (int xx = x_lo; xx < x_hi; ++xx) row[xx] = s[xx];
                    std::fill(row + std::max(x_hi, x_lo), row + w, Scalar(0));
                }
            }
        }
    }
    return cols;
}

template <typename Scalar>
FeatureMap<Scalar> col2im(const PlaneMatrix<Scalar>& cols, int channels, int h, int w,
                          int kernel, int dilation) {
    const int half = kernel / 2;
    auto x = FeatureMap<Scalar>::Zero(channels, h, w);
    for (int c = 0; c < channels; ++c) {
        Scalar* dst = x.data.row(c).data();
        for (int ky = 0; ky < kernel; ++ky) {
            const int oy = (ky - half) * dilation;
            for (int kx = 0; kx < kernel; ++kx) {
                const int ox = (kx - half) * dilation;
                const Scalar* src = cols.row((c * kernel + ky) * kernel + kx).data();
                const int x_lo = std::clamp(-ox, 0, w);
                const int x_hi = std::clamp(w - ox, 0, w);
                for (int y = 0; y < h; ++y) {
                    const int sy = y + oy;
                    if (sy < 0 || sy >= h) continue;
                    const Scalar* row = src + y * w;
                    Scalar* d = dst + sy * w + ox;
                    for (int xx = x_lo; xx < x_hi; ++xx) d[xx] += row[xx];
                }
            }
        }
    }
    return x;
}

template <typename Scalar>
FeatureMap<Scalar> conv2d_forward(const FeatureMap<Scalar>& x, const Vector<Scalar>& weight,
                                  const Vector<Scalar>& bias, int kernel, int dilation) {
    const Eigen::Index fan_in = static_cast<Eigen::Index>(x.channels()) * kernel * kernel;
    const Eigen::Index out = bias.size();
    if (weight.size() != out * fan_in)
        throw DimensionError("conv2d: weight has " + std::to_string(weight.size()) +
                             " values, expected " + std::to_string(out * fan_in) + " for input " +
                             shape_string(x));
    Eigen::Map<const PlaneMatrix<Scalar>> w(weight.data(), out, fan_in);
    FeatureMap<Scalar> y(static_cast<int>(out), x.height, x.width);
    if (kernel == 1) {
        y.data.noalias() = w * x.data;
    } else {
        const PlaneMatrix<Scalar> cols = im2col(x, kernel, dilation);
        y.data.noalias() = w * cols;
    }
    y.data.colwise() += bias;
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> conv2d_backward(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& dy,
                                   const Vector<Scalar>& weight, int kernel, int dilation,
                                   Vector<Scalar>* dweight, Vector<Scalar>* dbias,
                                   bool need_input_grad) {
    const Eigen::Index fan_in = static_cast<Eigen::Index>(x.channels()) * kernel * kernel;
    const Eigen::Index out = dy.channels();
    if (dy.height != x.height || dy.width != x.width || weight.size() != out * fan_in)
        throw DimensionError("conv2d_backward: gradient " + shape_string(dy) + " vs input " +
                             shape_string(x));
    Eigen::Map<const PlaneMatrix<Scalar>> w(weight.data(), out, fan_in);
    if (dbias) *dbias += dy.data.rowwise().sum();
    if (kernel == 1) {
        if (dweight) {
            Eigen::Map<PlaneMatrix<Scalar>> dw(dweight->data(), out, fan_in);
            dw.noalias() += dy.data * x.data.transpose();
        }
        if (!need_input_grad) return {};
        FeatureMap<Scalar> dx(x.channels(), x.height, x.width);
        dx.data.noalias() = w.transpose() * dy.data;
        return dx;
    }
    if (dweight) {
        Eigen::Map<PlaneMatrix<Scalar>> dw(dweight->data(), out, fan_in);
        const PlaneMatrix<Scalar> cols = im2col(x, kernel, dilation);
        dw.noalias() += dy.data * cols.transpose();
    }
    if (!need_input_grad) return {};
    PlaneMatrix<Scalar> dcols = w.transpose() * dy.data;
    return col2im(dcols, x.channels(), x.height, x.width, kernel, dilation);
}

template <typename Scalar>
FeatureMap<Scalar> layer_norm_forward(const FeatureMap<Scalar>& x, const Vector<Scalar>& gain,
                                      const Vector<Scalar>& offset, LayerNormCache<Scalar>* cache) {
    if (gain.size() != x.channels() || offset.size() != x.channels())
        throw DimensionError("layer_norm: gain/offset size does not match " + shape_string(x));
    const double n = static_cast<double>(x.size());
    const double mean = x.data.template cast<double>().sum() / n;
    const double var = (x.data.template cast<double>().array() - mean).square().sum() / n;
    const Scalar inv_std = static_cast<Scalar>(1.0 / std::sqrt(var + kLayerNormEpsilon));

    FeatureMap<Scalar> normalized(x.channels(), x.height, x.width);
    normalized.data = (x.data.array() - static_cast<Scalar>(mean)) * inv_std;
    FeatureMap<Scalar> y(x.channels(), x.height, x.width);
    y.data = (normalized.data.array().colwise() * gain.array()).colwise() + offset.array();
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = inv_std;
    }
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache,
                                       const FeatureMap<Scalar>& dy, const Vector<Scalar>& gain,
                                       Vector<Scalar>* dgain, Vector<Scalar>* doffset) {
    const auto& xhat = cache.normalized;
    require_same_shape(xhat, dy, "layer_norm_backward");
    if (dgain) *dgain += (dy.data.array() * xhat.data.array()).rowwise().sum().matrix();
    if (doffset) *doffset += dy.data.rowwise().sum();

    PlaneMatrix<Scalar> dxhat = dy.data.array().colwise() * gain.array();
    const double n = static_cast<double>(dy.size());
    const Scalar mean_d = static_cast<Scalar>(dxhat.template cast<double>().sum() / n);
    const Scalar mean_dx =
        static_cast<Scalar>((dxhat.template cast<double>().array() *
                             xhat.data.template cast<double>().array()).sum() / n);
    FeatureMap<Scalar> dx(dy.channels(), dy.height, dy.width);
    dx.data = cache.inv_std * (dxhat.array() - mean_d - xhat.data.array() * mean_dx);
    return dx;
}

template <typename Scalar>
FeatureMap<Scalar> leaky_relu_forward(const FeatureMap<Scalar>& x, Scalar slope) {
    FeatureMap<Scalar> y(x.channels(), x.height, x.width);
    y.data = (x.data.array() > Scalar(0)).select(x.data.array(), slope * x.data.array());
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> leaky_relu_backward(const FeatureMap<Scalar>& pre_activation,
                                       const FeatureMap<Scalar>& dy, Scalar slope) {
    require_same_shape(pre_activation, dy, "leaky_relu_backward");
    FeatureMap<Scalar> dx(dy.channels(), dy.height, dy.width);
    dx.data = (pre_activation.data.array() > Scalar(0)).select(dy.data.array(),
                                                               slope * dy.data.array());
    return dx;
}

namespace {

template <typename Scalar>
struct LinearTaps {
    std::vector<int> lo, hi;
    std::vector<Scalar> frac;
};

template <typename Scalar>
LinearTaps<Scalar> half_pixel_taps(int in, int out) {
    LinearTaps<Scalar> t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const int lo = static_cast<int>(std::floor(s));
        t.lo[o] = lo;
        t.hi[o] = std::min(lo + 1, in - 1);
        t.frac[o] = static_cast<Scalar>(s - lo);
    }
    return t;
}

}  // namespace

template <typename Scalar>
FeatureMap<Scalar> bilinear_upsample(const FeatureMap<Scalar>& x, int target_h, int target_w) {
    if (target_h < x.height || target_w < x.width)
        throw DimensionError("bilinear_upsample: target " + std::to_string(target_h) + "x" +
                             std::to_string(target_w) + " is smaller than source " +
                             shape_string(x));
    const auto ty = half_pixel_taps<Scalar>(x.height, target_h);
    const auto tx = half_pixel_taps<Scalar>(x.width, target_w);
    FeatureMap<Scalar> y(x.channels(), target_h, target_w);
    for (int c = 0; c < x.channels(); ++c) {
        const Scalar* src = x.data.row(c).data();
        Scalar* dst = y.data.row(c).data();
        for (int oy = 0; oy < target_h; ++oy) {
            const Scalar* r0 = src + ty.lo[oy] * x.width;
            const Scalar* r1 = src + ty.hi[oy] * x.width;
            const Scalar fy = ty.frac[oy];
            for (int ox = 0; ox < target_w; ++ox) {
                const Scalar fx = tx.frac[ox];
                const Scalar top = (1 - fx) * r0[tx.lo[ox]] + fx * r0[tx.hi[ox]];
                const Scalar bot = (1 - fx) * r1[tx.lo[ox]] + fx * r1[tx.hi[ox]];
                dst[oy * target_w + ox] = (1 - fy) * top + fy * bot;
            }
        }
    }
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> bilinear_upsample_backward(const FeatureMap<Scalar>& dy, int source_h,
                                              int source_w) {
    const auto ty = half_pixel_taps<Scalar>(source_h, dy.height);
    const auto tx = half_pixel_taps<Scalar>(source_w, dy.width);
    auto dx = FeatureMap<Scalar>::Zero(dy.channels(), source_h, source_w);
    for (int c = 0; c < dy.channels(); ++c) {
        const Scalar* g = dy.data.row(c).data();
        Scalar* dst = dx.data.row(c).data();
        for (int oy = 0; oy < dy.height; ++oy) {
            Scalar* r0 = dst + ty.lo[oy] * source_w;
            Scalar* r1 = dst + ty.hi[oy] * source_w;
            const Scalar fy = ty.frac[oy];
            for (int ox = 0; ox < dy.width; ++ox) {
                const Scalar v = g[oy * dy.width + ox];
                const Scalar fx = tx.frac[ox];
                r0[tx.lo[ox]] += (1 - fy) * (1 - fx) * v;
                r0[tx.hi[ox]] += (1 - fy) * fx * v;
                r1[tx.lo[ox]] += fy * (1 - fx) * v;
                r1[tx.hi[ox]] += fy * fx * v;
            }
        }
    }
    return dx;
}

template <typename Scalar>
FeatureMap<Scalar> block_average(const FeatureMap<Scalar>& x, int target_h, int target_w) {
    if (target_h <= 0 || target_w <= 0 || x.height % target_h != 0 || x.width % target_w != 0)
        throw DimensionError("block_average: " + std::to_string(x.height) + "x" +
                             std::to_string(x.width) + " is not an integer multiple of " +
                             std::to_string(target_h) + "x" + std::to_string(target_w));
    const int fy = x.height / target_h;
    const int fx = x.width / target_w;
    const Scalar inv = Scalar(1) / static_cast<Scalar>(fy * fx);
    auto y = FeatureMap<Scalar>::Zero(x.channels(), target_h, target_w);
    for (int c = 0; c < x.channels(); ++c) {
        const Scalar* src = x.data.row(c).data();
        Scalar* dst = y.data.row(c).data();
        for (int sy = 0; sy < x.height; ++sy) {
            Scalar* row = dst + (sy / fy) * target_w;
            const Scalar* s = src + sy * x.width;
            for (int sx = 0; sx < x.width; ++sx) row[sx / fx] += s[sx];
        }
    }
    y.data *= inv;
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> block_average_backward(const FeatureMap<Scalar>& dy, int source_h,
                                          int source_w) {
    const int fy = source_h / dy.height;
    const int fx = source_w / dy.width;
    const Scalar inv = Scalar(1) / static_cast<Scalar>(fy * fx);
    FeatureMap<Scalar> dx(dy.channels(), source_h, source_w);
    for (int c = 0; c < dy.channels(); ++c) {
        const Scalar* g = dy.data.row(c).data();
        Scalar* dst = dx.data.row(c).data();
        for (int sy = 0; sy < source_h; ++sy)
            for (int sx = 0; sx < source_w; ++sx)
                dst[sy * source_w + sx] = g[(sy / fy) * dy.width + sx / fx] * inv;
    }
    return dx;
}

template <typename Scalar>
FeatureMap<Scalar> max_pool2(const FeatureMap<Scalar>& x, std::vector<int>* argmax) {
    if (x.height % 2 != 0 || x.width % 2 != 0)
        throw DimensionError("max_pool2: odd input " + shape_string(x));
    const int h = x.height / 2;
    const int w = x.width / 2;
    FeatureMap<Scalar> y(x.channels(), h, w);
    if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
    for (int c = 0; c < x.channels(); ++c) {
        const Scalar* src = x.data.row(c).data();
        for (int oy = 0; oy < h; ++oy) {
            for (int ox = 0; ox < w; ++ox) {
                int best = (2 * oy) * x.width + 2 * ox;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int i = (2 * oy + dy) * x.width + 2 * ox + dx;
                        if (src[i] > src[best]) best = i;
                    }
                y.data(c, oy * w + ox) = src[best];
                if (argmax) (*argmax)[static_cast<std::size_t>(c) * h * w + oy * w + ox] = best;
            }
        }
    }
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> max_pool2_backward(const FeatureMap<Scalar>& dy, const std::vector<int>& argmax,
                                      int source_h, int source_w) {
    auto dx = FeatureMap<Scalar>::Zero(dy.channels(), source_h, source_w);
    const int n = dy.pixels();
    for (int c = 0; c < dy.channels(); ++c)
        for (int i = 0; i < n; ++i)
            dx.data(c, argmax[static_cast<std::size_t>(c) * n + i]) += dy.data(c, i);
    return dx;
}

template <typename Scalar>
ConvBlock<Scalar>::ConvBlock(ParameterSet<Scalar>& params, const std::string& prefix,
                             ConvBlockSpec spec)
    : spec_(spec) {
    if (spec.in_channels <= 0 || spec.out_channels <= 0 || spec.kernel <= 0 ||
        spec.kernel % 2 == 0 || spec.dilation <= 0)
        throw ArgumentError("conv block " + prefix + ": invalid spec");
    weight_ = params.add(prefix + ".weight",
                         {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
    bias_ = params.add(prefix + ".bias", {spec.out_channels});
    if (spec.normalize) {
        gain_ = params.add(prefix + ".gain", {spec.out_channels});
        offset_ = params.add(prefix + ".offset", {spec.out_channels});
        params.values(gain_).setOnes();
    }
}

template <typename Scalar>
void ConvBlock<Scalar>::initialize(ParameterSet<Scalar>& params, std::mt19937_64& rng) const {
    const int fan_in = spec_.in_channels * spec_.kernel * spec_.kernel;
    init_uniform_fan_in(params.values(weight_), fan_in, rng);
    init_uniform_fan_in(params.values(bias_), fan_in, rng);
    if (spec_.normalize) {
        params.values(gain_).setOnes();
        params.values(offset_).setZero();
    }
}

template <typename Scalar>
FeatureMap<Scalar> ConvBlock<Scalar>::forward(const ParameterSet<Scalar>& params,
                                              const FeatureMap<Scalar>& x, Cache* cache,
                                              int dilation) const {
    if (x.channels() != spec_.in_channels)
        throw DimensionError("conv block expects " + std::to_string(spec_.in_channels) +
                             " input channels, got " + shape_string(x));
    if (dilation <= 0) dilation = spec_.dilation;
    FeatureMap<Scalar> y =
        conv2d_forward(x, params.values(weight_), params.values(bias_), spec_.kernel, dilation);
    if (cache) {
        cache->input = x;
        cache->dilation = dilation;
    }
    if (spec_.normalize)
        y = layer_norm_forward(y, params.values(gain_), params.values(offset_),
                               cache ? &cache->norm : nullptr);
    if (spec_.activate) {
        FeatureMap<Scalar> a = leaky_relu_forward(y, static_cast<Scalar>(spec_.slope));
        if (cache) cache->pre_activation = std::move(y);
        return a;
    }
    return y;
}

template <typename Scalar>
FeatureMap<Scalar> ConvBlock<Scalar>::backward(const ParameterSet<Scalar>& params,
                                               const Cache& cache, const FeatureMap<Scalar>& dy,
                                               ParameterSet<Scalar>* grads,
                                               bool need_input_grad) const {
    FeatureMap<Scalar> g = spec_.activate
                               ? leaky_relu_backward(cache.pre_activation, dy,
                                                     static_cast<Scalar>(spec_.slope))
                               : dy;
    if (spec_.normalize)
        g = layer_norm_backward(cache.norm, g, params.values(gain_),
                                grads ? &grads->values(gain_) : nullptr,
                                grads ? &grads->values(offset_) : nullptr);
    return conv2d_backward(cache.input, g, params.values(weight_), spec_.kernel, cache.dilation,
                           grads ? &grads->values(weight_) : nullptr,
                           grads ? &grads->values(bias_) : nullptr, need_input_grad);
}

#define CRN_INSTANTIATE_LAYERS(S)                                                               \
    template PlaneMatrix<S> im2col(const FeatureMap<S>&, int, int);                             \
    template FeatureMap<S> col2im(const PlaneMatrix<S>&, int, int, int, int, int);              \
    template FeatureMap<S> conv2d_forward(const FeatureMap<S>&, const Vector<S>&,               \
                                          const Vector<S>&, int, int);                          \
    template FeatureMap<S> conv2d_backward(const FeatureMap<S>&, const FeatureMap<S>&,          \
                                           const Vector<S>&, int, int, Vector<S>*, Vector<S>*,  \
                                           bool);                                               \
    template FeatureMap<S> layer_norm_forward(const FeatureMap<S>&, const Vector<S>&,           \
                                              const Vector<S>&, LayerNormCache<S>*);            \
    template FeatureMap<S> layer_norm_backward(const LayerNormCache<S>&, const FeatureMap<S>&,  \
                                               const Vector<S>&, Vector<S>*, Vector<S>*);       \
    template FeatureMap<S> leaky_relu_forward(const FeatureMap<S>&, S);                         \
    template FeatureMap<S> leaky_relu_backward(const FeatureMap<S>&, const FeatureMap<S>&, S);  \
    template FeatureMap<S> bilinear_upsample(const FeatureMap<S>&, int, int);                   \
    template FeatureMap<S> bilinear_upsample_backward(const FeatureMap<S>&, int, int);          \
    template FeatureMap<S> block_average(const FeatureMap<S>&, int, int);                       \
    template FeatureMap<S> block_average_backward(const FeatureMap<S>&, int, int);              \
    template FeatureMap<S> max_pool2(const FeatureMap<S>&, std::vector<int>*);                  \
    template FeatureMap<S> max_pool2_backward(const FeatureMap<S>&, const std::vector<int>&,    \
                                              int, int);                                        \
    template class ConvBlock<S>;

CRN_INSTANTIATE_LAYERS(float)
CRN_INSTANTIATE_LAYERS(double)

}  // namespace crn
