#pragma once

#include <array>
#include <vector>

#include "dodnet/tensor.hpp"

// Differentiable operators. Every op validates shapes eagerly and throws
// ShapeError on disagreement. When a tape is active and any input requires
// grad, the op records itself and its output requires grad.

namespace dodnet {

struct Conv3dOptions {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
};

/// Cross-correlation of input [N,Cin,D,H,W] with weight [Cout,Cin,kd,kh,kw]
/// plus optional bias [Cout] (pass an undefined tensor for none).
/// Output extents are floor((D + 2p - k) / s) + 1 per axis.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv3dOptions& opt = {});

/// 1x1x1 convolution whose kernel differs per sample:
/// input [N,Cin,D,H,W], weight [N,Cout,Cin], bias [N,Cout] -> [N,Cout,D,H,W].
template <typename T>
Tensor<T> pointwise_conv_per_sample(const Tensor<T>& input, const Tensor<T>& weight,
                                    const Tensor<T>& bias);

/// Group normalization over (C/groups, spatial...) per sample, with biased
/// variance. gamma/beta are per-channel [C].
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

/// Per output channel: (w - mean) / sqrt(var + eps), var biased.
template <typename T>
Tensor<T> weight_standardize(const Tensor<T>& weight, double eps = 1e-5);

/// x2 trilinear upsampling with the half-pixel convention
/// (source = (dst + 0.5) / 2 - 0.5, clamped to the grid).
template <typename T>
Tensor<T> upsample_trilinear2x(const Tensor<T>& x);

/// [N,C,spatial...] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Slice [start, start + length) along `axis`, copied into fresh storage.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t length);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

namespace detail {

/// Half-pixel x2 source taps along one axis: out[i] = (1-w)*in[lo] + w*in[hi].
struct UpsampleTap {
  std::int64_t lo;
  std::int64_t hi;
  double w;
};
std::vector<UpsampleTap> upsample_taps(std::int64_t in_extent);

}  // namespace detail

}  // namespace dodnet
