// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/layers.hpp"
#include "lrnet/model.hpp"

namespace lrnet {

// Convention: one multiply-accumulate is one FLOP. BN, ReLU, pooling and the
// classifier softmax are not counted. Windows are counted at the full k x k
// footprint, the same way padded convolutions are counted.

struct LrFlops {
  /// Query transform at the anchors, key transform, aggregation, and the
  /// optional output transform.
  double headline = 0;
  /// headline plus the per-window scalar work: composability terms, prior
  /// add, and softmax (exp, sum, scale).
  double exact = 0;
  /// ((1 + s^2)/m + 1) * C * (C + k^2) * HW / s^2
  double formula = 0;
};

LrFlops lr_layer_flops(const LocalRelationConfig& config, std::size_t height, std::size_t width);

std::size_t lr_param_count(const LocalRelationConfig& config);

/// Recursive over residual blocks (branch and shortcut).
std::size_t layer_params(const LayerDesc& desc);
double layer_flops(const LayerDesc& desc);
double layer_exact_flops(const LayerDesc& desc);

struct CostRow {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::size_t params = 0;
  double flops = 0;
  double exact_flops = 0;
  double formula_flops = 0;  // local relation rows only
  Shape output{};
};

struct CostReport {
  std::string model;
  std::vector<CostRow> rows;  // leaf layers in execution order
  std::size_t total_params = 0;
  double total_flops = 0;
  double total_exact_flops = 0;
  /// LR rows only: headline count vs the complexity formula.
  double lr_flops = 0;
  double lr_formula_flops = 0;
  int depth = 0;
  std::array<int, 4> inner_widths{};

  std::string to_text() const;
  std::string to_csv() const;
};

CostReport network_cost(const NetworkPlan& plan);

struct PublishedTarget {
  std::string model;
  double params_millions = 0;
  double gflops = 0;
  double params_tolerance = 0.03;
  double flops_tolerance = 0.05;
};

std::optional<PublishedTarget> published_target(std::string_view model);

struct TargetCheck {
  double params_rel = 0;  // (measured - target) / target
  double flops_rel = 0;
  bool params_ok = false;
  bool flops_ok = false;
  bool ok() const { return params_ok && flops_ok; }
};

TargetCheck check_target(const CostReport& report, const PublishedTarget& target);

}  // namespace lrnet
