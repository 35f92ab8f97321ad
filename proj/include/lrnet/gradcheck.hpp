// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lrnet/local_relation.hpp"

namespace lrnet {

struct Tolerance {
  double rel = 1e-6;
  double abs_floor = 1e-8;
};

/// Element-wise agreement: |a - n| <= abs_floor, or |a - n| / max(|a|, |n|) <= rel.
struct GradComparison {
  std::string group;
  double max_abs = 0;
  double max_rel = 0;  // over elements whose difference exceeds the absolute floor
  std::size_t checked = 0;
  std::size_t failures = 0;
  bool pass() const { return failures == 0; }
};

GradComparison compare_gradients(std::string group, std::span<const double> analytic,
                                 std::span<const double> numeric, const Tolerance& tol = {});

/// Central differences of `loss` with respect to every entry of `values`,
/// which `loss` must read on each call.
std::vector<double> numeric_gradient(const std::function<double()>& loss, std::span<double> values,
                                     double step = 1e-5);

/// Deliberate defects used to prove that the checker catches them.
enum class Mutation { none, negate_theta_g, drop_query_key_path };

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  std::size_t height = 7;
  std::size_t width = 7;
  int channels = 8;
  int kernel = 3;
  int channels_per_group = 4;
  int qk_dim = 1;
  int geo_hidden = 4;
  double step = 1e-5;
  Tolerance tol{};
  /// Minimum distance kept between |q - k| (absolute difference) or the prior
  /// network's pre-activations and their kinks.
  double kink_margin = 1e-3;
  Mutation mutation = Mutation::none;
};

struct GradCheckCase {
  std::string label;
  LocalRelationConfig config;
  Shape shape{};
  std::vector<GradComparison> groups;  // x, theta_q, theta_k, theta_g, theta_out
  bool pass() const;
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  std::vector<GradCheckCase> cases;
  bool pass() const;
  /// Labels and groups of every failing case.
  std::vector<std::string> failures() const;
  std::string to_text() const;
};

std::string describe(const LocalRelationConfig& config);

/// Analytic vs. numeric gradients of sum(R * y) for a random cotangent R.
GradCheckCase gradcheck_local_relation(const LocalRelationConfig& config, const GradCheckOptions& options);

/// variant x stride x geo mode x normalization, plus one case with the
/// output transform enabled. Shapes and k, m, d come from `options`.
GradCheckReport gradcheck_sweep(const GradCheckOptions& options);

}  // namespace lrnet
