// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lrnet/tensor.hpp"

namespace lrnet {

/// 1x1 per-pixel linear map across channels.
template <typename T>
struct ChannelTransform {
  Tensor<T> weight;  // (out, in, 1, 1)
  Tensor<T> bias;    // (1, out, 1, 1), empty when the transform has no bias

  ChannelTransform() = default;
  ChannelTransform(std::size_t in_channels, std::size_t out_channels, bool with_bias)
      : weight(matrix_shape(out_channels, in_channels)) {
    if (with_bias) bias = Tensor<T>(vector_shape(out_channels));
  }

  std::size_t in_channels() const { return weight.c(); }
  std::size_t out_channels() const { return weight.n(); }
  bool has_bias() const { return !bias.empty(); }
  std::size_t param_count() const { return weight.numel() + bias.numel(); }
};

template <typename T>
struct ChannelTransformGrads {
  Tensor<T> x;
  Tensor<T> weight;
  Tensor<T> bias;  // empty when the transform has no bias
};

/// Spatial output extent of a strided layer: ceil(extent / stride).
constexpr std::size_t strided_extent(std::size_t extent, std::size_t stride) {
  return (extent + stride - 1) / stride;
}

/// Samples x at anchors s*p'. Output extent ceil(H/s) x ceil(W/s).
template <typename T>
Tensor<T> subsample(const Tensor<T>& x, std::size_t stride);

/// Adjoint of subsample: scatters g into a zero tensor of shape `full`.
template <typename T>
Tensor<T> subsample_adjoint(const Tensor<T>& g, const Shape& full, std::size_t stride);

/// y[n,o,p'] = sum_c weight[o,c] * x[n,c,s*p'] + bias[o].
template <typename T>
Tensor<T> channel_transform_fwd(const Tensor<T>& x, const ChannelTransform<T>& ct,
                                std::size_t stride = 1);

template <typename T>
ChannelTransformGrads<T> channel_transform_bwd(const Tensor<T>& x, const ChannelTransform<T>& ct,
                                               const Tensor<T>& grad_out, std::size_t stride = 1);

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(vector_shape(channels), T(1)),
        beta(vector_shape(channels), T(0)),
        running_mean(vector_shape(channels), T(0)),
        running_var(vector_shape(channels), T(1)) {}

  std::size_t channels() const { return gamma.numel(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> x_hat;
  std::vector<T> inv_std;
  bool training = true;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Training mode normalizes with batch statistics (two-pass, per channel) and
/// updates the running estimates; eval mode uses the running estimates.
/// Training with a batch of one sample throws UnsupportedError.
template <typename T>
Tensor<T> batchnorm_fwd(const Tensor<T>& x, BatchNormState<T>& state, bool training,
                        BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm_bwd(const Tensor<T>& grad_out, const BatchNormState<T>& state,
                                const BatchNormCache<T>& cache);

template <typename T>
Tensor<T> relu_fwd(const Tensor<T>& x);

/// `x` is the forward input (or output; the mask is identical).
template <typename T>
Tensor<T> relu_bwd(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T>
struct MaxPoolResult {
  Tensor<T> y;
  std::vector<std::uint32_t> argmax;  // index into the input (n,c) plane per output element
};

/// 3x3 window, stride 2, padding 1: H' = ceil(H/2). Ties go to the first
/// maximum in row-major window order.
template <typename T>
MaxPoolResult<T> maxpool3x3s2_fwd(const Tensor<T>& x);

template <typename T>
Tensor<T> maxpool3x3s2_bwd(const Tensor<T>& grad_out, const std::vector<std::uint32_t>& argmax,
                           const Shape& input_shape);

template <typename T>
Tensor<T> global_avgpool_fwd(const Tensor<T>& x);

template <typename T>
Tensor<T> global_avgpool_bwd(const Tensor<T>& grad_out, const Shape& input_shape);

/// Fully-connected layer over the flattened C*H*W features of each sample.
/// Output shape (N, out, 1, 1).
template <typename T>
Tensor<T> fc_fwd(const Tensor<T>& x, const ChannelTransform<T>& fc);

template <typename T>
ChannelTransformGrads<T> fc_bwd(const Tensor<T>& x, const ChannelTransform<T>& fc,
                                const Tensor<T>& grad_out);

template <typename T>
struct SoftmaxXentResult {
  T loss = T(0);  // mean over the batch
  Tensor<T> probs;
};

template <typename T>
SoftmaxXentResult<T> softmax_xent_fwd(const Tensor<T>& logits, std::span<const int> labels);

/// Gradient of the mean loss with respect to the logits.
template <typename T>
Tensor<T> softmax_xent_bwd(const Tensor<T>& probs, std::span<const int> labels);

/// Dense k x k convolution without bias, padding k/2, used by the baseline
/// ResNet path only.
template <typename T>
struct Conv2d {
  Tensor<T> weight;  // (out, in, k, k)
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride_)
      : weight({out_channels, in_channels, kernel, kernel}), stride(stride_) {}

  std::size_t kernel() const { return weight.h(); }
  std::size_t in_channels() const { return weight.c(); }
  std::size_t out_channels() const { return weight.n(); }
};

template <typename T>
struct Conv2dGrads {
  Tensor<T> x;
  Tensor<T> weight;
};

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Conv2d<T>& conv);

template <typename T>
Conv2dGrads<T> conv2d_bwd(const Tensor<T>& x, const Conv2d<T>& conv, const Tensor<T>& grad_out);

}  // namespace lrnet
