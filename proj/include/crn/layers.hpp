#pragma once

#include <string>
#include <vector>

#include "crn/feature_map.hpp"
#include "crn/parameters.hpp"

namespace crn {

// ---------------------------------------------------------------------------
// Stateless primitives. Each backward takes the upstream gradient and returns
// the gradient w.r.t. the primitive's input; parameter gradients are added
// into caller-provided accumulators, which may be null for frozen weights.
// ---------------------------------------------------------------------------

/// Zero-padded "same" im2col for a square kernel of odd size. Rows are
/// ordered (channel, ky, kx); columns are output pixels.
template <typename Scalar>
PlaneMatrix<Scalar> im2col(const FeatureMap<Scalar>& x, int kernel, int dilation);

/// Adjoint of im2col: scatters columns back onto a (channels, h, w) map.
template <typename Scalar>
FeatureMap<Scalar> col2im(const PlaneMatrix<Scalar>& cols, int channels, int h, int w,
                          int kernel, int dilation);

/// Weight is laid out [out, in, kernel, kernel] flat.
template <typename Scalar>
FeatureMap<Scalar> conv2d_forward(const FeatureMap<Scalar>& x, const Vector<Scalar>& weight,
                                  const Vector<Scalar>& bias, int kernel, int dilation);

template <typename Scalar>
FeatureMap<Scalar> conv2d_backward(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& dy,
                                   const Vector<Scalar>& weight, int kernel, int dilation,
                                   Vector<Scalar>* dweight, Vector<Scalar>* dbias,
                                   bool need_input_grad = true);

/// Normalization statistics over all positions and channels of one sample.
template <typename Scalar>
struct LayerNormCache {
    FeatureMap<Scalar> normalized;
    Scalar inv_std = 0;
};

inline constexpr double kLayerNormEpsilon = 1e-5;

template <typename Scalar>
FeatureMap<Scalar> layer_norm_forward(const FeatureMap<Scalar>& x, const Vector<Scalar>& gain,
                                      const Vector<Scalar>& offset, LayerNormCache<Scalar>* cache);

template <typename Scalar>
FeatureMap<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache,
                                       const FeatureMap<Scalar>& dy, const Vector<Scalar>& gain,
                                       Vector<Scalar>* dgain, Vector<Scalar>* doffset);

/// slope = 0 gives a plain ReLU.
template <typename Scalar>
FeatureMap<Scalar> leaky_relu_forward(const FeatureMap<Scalar>& x, Scalar slope);

template <typename Scalar>
FeatureMap<Scalar> leaky_relu_backward(const FeatureMap<Scalar>& pre_activation,
                                       const FeatureMap<Scalar>& dy, Scalar slope);

/// Bilinear resize with half-pixel centers: source coordinate
/// s = (d + 0.5) * in / out - 0.5, clamped to [0, in - 1]. Only enlarging
/// (or identity) resizes are accepted.
template <typename Scalar>
FeatureMap<Scalar> bilinear_upsample(const FeatureMap<Scalar>& x, int target_h, int target_w);

template <typename Scalar>
FeatureMap<Scalar> bilinear_upsample_backward(const FeatureMap<Scalar>& dy, int source_h,
                                              int source_w);

/// Block-mean pooling to (target_h, target_w); source dims must be integer
/// multiples of the target dims.
template <typename Scalar>
FeatureMap<Scalar> block_average(const FeatureMap<Scalar>& x, int target_h, int target_w);

template <typename Scalar>
FeatureMap<Scalar> block_average_backward(const FeatureMap<Scalar>& dy, int source_h,
                                          int source_w);

/// 2x2 max pooling, stride 2. `argmax` receives the flat source index of
/// each output element (first maximum wins).
template <typename Scalar>
FeatureMap<Scalar> max_pool2(const FeatureMap<Scalar>& x, std::vector<int>* argmax);

template <typename Scalar>
FeatureMap<Scalar> max_pool2_backward(const FeatureMap<Scalar>& dy, const std::vector<int>& argmax,
                                      int source_h, int source_w);

// ---------------------------------------------------------------------------
// ConvBlock: conv -> [layer norm] -> [leaky relu], the unit every network in
// the project is assembled from.
// ---------------------------------------------------------------------------

struct ConvBlockSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int dilation = 1;
    bool normalize = true;
    bool activate = true;
    double slope = 0.2;

    std::int64_t parameter_count() const {
        std::int64_t n = static_cast<std::int64_t>(kernel) * kernel * in_channels * out_channels +
                         out_channels;
        if (normalize) n += 2 * static_cast<std::int64_t>(out_channels);
        return n;
    }
};

template <typename Scalar>
class ConvBlock {
public:
    using Index = typename ParameterSet<Scalar>::Index;

    struct Cache {
        int dilation = 1;
        FeatureMap<Scalar> input;
        LayerNormCache<Scalar> norm;
        FeatureMap<Scalar> pre_activation;
    };

    ConvBlock() = default;
    /// Registers `<prefix>.weight`, `.bias` and, when normalizing, `.gain`
    /// and `.offset` (gain initialized to 1, offset to 0).
    ConvBlock(ParameterSet<Scalar>& params, const std::string& prefix, ConvBlockSpec spec);

    const ConvBlockSpec& spec() const { return spec_; }

    void initialize(ParameterSet<Scalar>& params, std::mt19937_64& rng) const;

    /// `dilation` > 0 overrides the spec's dilation for this call.
    FeatureMap<Scalar> forward(const ParameterSet<Scalar>& params, const FeatureMap<Scalar>& x,
                               Cache* cache, int dilation = 0) const;

    /// `grads` may be null (frozen block); the input gradient is still returned.
    FeatureMap<Scalar> backward(const ParameterSet<Scalar>& params, const Cache& cache,
                                const FeatureMap<Scalar>& dy, ParameterSet<Scalar>* grads,
                                bool need_input_grad = true) const;

private:
    ConvBlockSpec spec_;
    Index weight_ = 0;
    Index bias_ = 0;
    Index gain_ = 0;
    Index offset_ = 0;
};

}  // namespace crn
