// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/layers.hpp"
#include "lrnet/netspec.hpp"

namespace lrnet {

/// Structural description of a built network: every layer with its
/// per-sample input/output shape, before any parameter is allocated.
struct NetworkPlan {
  NetSpec spec;
  std::vector<LayerDesc> layers;
  Shape input;   // per sample
  Shape output;  // per sample
  std::array<int, 4> inner_widths{};
};

/// Expands a spec into its layer plan. Shape-chaining failures are raised
/// here, never at run time.
NetworkPlan plan_network(const NetSpec& spec);

std::vector<LayerDesc> build_lr_stem(const LocalRelationConfig& lr_template, int channels, int kernel,
                                     int channels_per_group, const Shape& input, bool small_image);
LayerDesc build_bottleneck_block(const BlockSpec& spec, const Shape& input, const std::string& name);
LayerDesc build_basic_block(const BlockSpec& spec, const Shape& input, const std::string& name);

/// A run of blocks that share one inner width: one block, or a whole stage
/// whose first block may change channels and stride.
struct WidthTemplate {
  BlockKind kind = BlockKind::bottleneck_lr;
  int in_channels = 0;
  int out_channels = 0;
  int blocks = 1;
  int stride = 1;
  int input_h = 0;
  int input_w = 0;
  LocalRelationConfig lr{};
};

/// Exact kernel FLOPs (multiply-accumulates plus the per-window scalar ops)
/// of the template at the given inner width.
double template_flops(const WidthTemplate& tmpl, int inner_width);

/// Inner width (a multiple of the LR group size) minimizing
/// |template_flops(width) - baseline_flops|, ties to the smaller width.
/// Throws SolverError when no width in [1, 4096] lands within `tolerance`
/// (relative) of the target.
int solve_inner_width(double baseline_flops, const WidthTemplate& tmpl, double tolerance = 0.5);

/// Counted weight layers (CT/conv/LR/fc on the main path; the stem counts
/// once since it replaces a single 7x7 convolution).
int network_depth(const NetworkPlan& plan);

/// Number of spatial convolution layers anywhere in the plan.
int count_spatial_convs(const NetworkPlan& plan);

/// Runnable network built from a plan. Owns parameters, gradients and the
/// per-layer forward caches.
template <typename T>
class Network {
 public:
  Network(NetworkPlan plan, std::uint64_t seed);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkPlan& plan() const { return plan_; }
  const NetSpec& spec() const { return plan_.spec; }

  Tensor<T> forward(const Tensor<T>& x, bool training);
  /// Back-propagates d(loss)/d(logits); returns d(loss)/d(input) and
  /// accumulates parameter gradients.
  Tensor<T> backward(const Tensor<T>& grad_logits);

  std::vector<ParamRef<T>> parameters();
  /// Parameters plus non-trainable buffers (BN running statistics).
  std::vector<StateRef<T>> state();
  void zero_grad();
  std::size_t param_count();

  std::vector<Layer<T>*> flatten();
  Layer<T>* find(std::string_view name);

 private:
  NetworkPlan plan_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <typename T>
Network<T> build_network(const NetSpec& spec);

}  // namespace lrnet
