// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/ops.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

/// Appearance composability Phi(query, key).
enum class Composability { squared_difference, absolute_difference, multiplication };

enum class Normalization { softmax, none };

/// How the geometric prior f(dp) is parameterized: a two-layer network on the
/// relative offset, a learned k x k table per group, or disabled.
enum class GeoMode { network, direct, off };

std::string_view to_string(Composability v);
std::string_view to_string(Normalization v);
std::string_view to_string(GeoMode v);
Composability parse_composability(std::string_view s);  // sqdiff|absdiff|mul or full names
Normalization parse_normalization(std::string_view s);
GeoMode parse_geo_mode(std::string_view s);

struct LocalRelationConfig {
  int channels = 64;
  int kernel = 7;
  int stride = 1;
  int channels_per_group = 8;  // m
  Composability variant = Composability::squared_difference;
  int qk_dim = 1;
  int geo_hidden = 32;
  Normalization normalization = Normalization::softmax;
  GeoMode geo_mode = GeoMode::network;
  /// Trailing C -> C channel transform applied to the aggregated output.
  bool output_transform = false;

  int groups() const { return channels / channels_per_group; }
  int radius() const { return kernel / 2; }
  int window() const { return kernel * kernel; }
  /// Throws ConfigError unless C % m == 0, k odd in [1, 9], s in {1,2}, d >= 1.
  void validate() const;

  bool operator==(const LocalRelationConfig&) const = default;
};

/// Learnable weights of one local relation layer.
template <typename T>
struct LocalRelationParams {
  ChannelTransform<T> query;       // C -> G*d, no bias
  ChannelTransform<T> key;         // C -> G*d, no bias
  ChannelTransform<T> geo_hidden;  // 2 -> hidden, with bias (geo_mode=network)
  ChannelTransform<T> geo_out;     // hidden -> G, with bias (geo_mode=network)
  Tensor<T> geo_table;             // (1, G, k, k) (geo_mode=direct)
  ChannelTransform<T> output;      // C -> C, no bias (output_transform)

  std::size_t param_count() const {
    return query.param_count() + key.param_count() + geo_hidden.param_count() + geo_out.param_count() +
           geo_table.numel() + output.param_count();
  }
};

/// Allocates parameters for `config` with the default initialization:
/// query/key and the prior's first layer fan-in scaled Gaussian, the prior's
/// output layer and the direct table zero, the output transform He-scaled.
template <typename T>
LocalRelationParams<T> init_local_relation(const LocalRelationConfig& config, std::mt19937_64& rng);

/// Pre-softmax prior logits indexed [g][dy + r][dx + r], shape (1, G, k, k).
template <typename T>
using GeometricPriorTable = Tensor<T>;

/// Phi for one query/key pair of dimension d.
template <typename T>
T composability(std::span<const T> query, std::span<const T> key, Composability variant);

/// Evaluates the prior network on every offset, or returns the direct table.
/// Throws PriorDisabledError for geo_mode=off.
template <typename T>
GeometricPriorTable<T> materialize_prior(const LocalRelationParams<T>& params, const LocalRelationConfig& config);

/// Normalized aggregation weights for every (n, g, p', dp) plus the in-bounds
/// mask shared across samples and groups.
template <typename T>
struct WeightField {
  std::size_t batch = 0;
  std::size_t groups = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t kernel = 0;
  std::vector<T> weights;            // [n][g][h'][w'][ky][kx]
  std::vector<std::uint8_t> valid;   // [h'][w'][ky][kx]

  std::size_t window() const { return kernel * kernel; }
  std::size_t index(std::size_t n, std::size_t g, std::size_t oh, std::size_t ow) const {
    return (((n * groups + g) * out_h + oh) * out_w + ow) * window();
  }
  std::size_t mask_index(std::size_t oh, std::size_t ow) const { return (oh * out_w + ow) * window(); }
  std::span<const T> at(std::size_t n, std::size_t g, std::size_t oh, std::size_t ow) const {
    return {weights.data() + index(n, g, oh, ow), window()};
  }
  std::span<const std::uint8_t> mask(std::size_t oh, std::size_t ow) const {
    return {valid.data() + mask_index(oh, ow), window()};
  }
};

template <typename T>
struct WeightFieldResult {
  WeightField<T> field;
  Tensor<T> q_map;  // (N, G*d, H', W'): query sampled at output anchors
  Tensor<T> k_map;  // (N, G*d, H, W)
};

template <typename T>
WeightFieldResult<T> compute_weight_field(const Tensor<T>& x, const LocalRelationParams<T>& params,
                                          const LocalRelationConfig& config);

/// State retained by the reference forward for the backward pass.
template <typename T>
struct ForwardCache {
  Tensor<T> x;
  Tensor<T> q_map;
  Tensor<T> k_map;
  WeightField<T> field;
  Tensor<T> aggregated;            // pre output-transform result (output_transform only)
  std::vector<T> geo_pre_hidden;   // [offset][hidden] pre-ReLU activations (geo_mode=network)
};

template <typename T>
struct LocalRelationResult {
  Tensor<T> y;
  ForwardCache<T> cache;
};

/// Reference kernel: y[n,c,p'] = sum_dp w[n, c/m, p', dp] * x[n, c, s*p' + dp].
template <typename T>
LocalRelationResult<T> lr_forward(const Tensor<T>& x, const LocalRelationParams<T>& params,
                                  const LocalRelationConfig& config);

template <typename T>
struct LocalRelationGrads {
  Tensor<T> x;
  Tensor<T> query;       // same shape as params.query.weight
  Tensor<T> key;
  Tensor<T> geo_hidden_weight;
  Tensor<T> geo_hidden_bias;
  Tensor<T> geo_out_weight;
  Tensor<T> geo_out_bias;
  Tensor<T> geo_table;
  Tensor<T> output;
};

template <typename T>
LocalRelationGrads<T> lr_backward(const Tensor<T>& grad_y, const ForwardCache<T>& cache,
                                  const LocalRelationParams<T>& params, const LocalRelationConfig& config);

/// Inference kernel: clipped windows instead of masks, group-blocked
/// aggregation, query evaluated only at anchors, parallel over (n, g).
template <typename T>
Tensor<T> lr_forward_optimized(const Tensor<T>& x, const LocalRelationParams<T>& params,
                               const LocalRelationConfig& config);

/// Output shape for an input of shape `in`.
Shape lr_output_shape(const Shape& in, const LocalRelationConfig& config);

}  // namespace lrnet
