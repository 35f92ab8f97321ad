// SPDX-License-Identifier: Apache-2.0
#include "lrnet/cost.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace lrnet {

LrFlops lr_layer_flops(const LocalRelationConfig& config, std::size_t height, std::size_t width) {
  config.validate();
  const double c = config.channels;
  const double groups = config.groups();
  const double d = config.qk_dim;
  const double win = config.window();
  const double s = config.stride;
  const double in_area = static_cast<double>(height * width);
  const double out_area = static_cast<double>(strided_extent(height, config.stride) *
                                              strided_extent(width, config.stride));
  LrFlops f;
  const double query = c * groups * d * out_area;
  const double key = c * groups * d * in_area;
  const double aggregate = c * win * out_area;
  const double output = config.output_transform ? c * c * out_area : 0.0;
  f.headline = query + key + aggregate + output;

  double per_entry = d;
  if (config.geo_mode != GeoMode::off) per_entry += 1;
  if (config.normalization == Normalization::softmax) per_entry += 3;
  f.exact = f.headline + groups * win * out_area * per_entry;

  f.formula = ((1.0 + s * s) / config.channels_per_group + 1.0) * c * (c + win) * in_area / (s * s);
  return f;
}

std::size_t lr_param_count(const LocalRelationConfig& config) {
  const std::size_t c = static_cast<std::size_t>(config.channels);
  const std::size_t g = static_cast<std::size_t>(config.groups());
  const std::size_t d = static_cast<std::size_t>(config.qk_dim);
  const std::size_t h = static_cast<std::size_t>(config.geo_hidden);
  std::size_t n = 2 * c * g * d;
  switch (config.geo_mode) {
    case GeoMode::network: n += 2 * h + h + h * g + g; break;
    case GeoMode::direct: n += g * static_cast<std::size_t>(config.window()); break;
    case GeoMode::off: break;
  }
  if (config.output_transform) n += c * c;
  return n;
}

std::size_t layer_params(const LayerDesc& l) {
  const std::size_t in = static_cast<std::size_t>(l.in_channels);
  const std::size_t out = static_cast<std::size_t>(l.out_channels);
  const std::size_t k = static_cast<std::size_t>(l.kernel);
  switch (l.kind) {
    case LayerKind::channel_transform:
    case LayerKind::fully_connected: return in * out + (l.bias ? out : 0);
    case LayerKind::conv: return in * out * k * k;
    case LayerKind::local_relation: return lr_param_count(l.lr);
    case LayerKind::batch_norm: return 2 * out;
    case LayerKind::residual: {
      std::size_t n = 0;
      for (const auto& b : l.branch) n += layer_params(b);
      for (const auto& b : l.shortcut) n += layer_params(b);
      return n;
    }
    default: return 0;
  }
}

namespace {

double dense_flops(const LayerDesc& l) {
  const double in = l.in_channels;
  const double out = l.out_channels;
  const double area = static_cast<double>(l.output.h * l.output.w);
  switch (l.kind) {
    case LayerKind::channel_transform:
    case LayerKind::fully_connected: return in * out * area;
    case LayerKind::conv: return in * out * l.kernel * l.kernel * area;
    default: return 0;
  }
}

template <typename Leaf>
double sum_tree(const LayerDesc& l, Leaf leaf) {
  if (l.kind != LayerKind::residual) return leaf(l);
  double f = 0;
  for (const auto& b : l.branch) f += sum_tree(b, leaf);
  for (const auto& b : l.shortcut) f += sum_tree(b, leaf);
  return f;
}

void flatten(const LayerDesc& l, std::vector<const LayerDesc*>& out) {
  if (l.kind != LayerKind::residual) {
    out.push_back(&l);
    return;
  }
  for (const auto& b : l.branch) flatten(b, out);
  for (const auto& b : l.shortcut) flatten(b, out);
}

std::string human(double v) {
  char buf[32];
  if (v >= 1e9) std::snprintf(buf, sizeof buf, "%.3fG", v / 1e9);
  else if (v >= 1e6) std::snprintf(buf, sizeof buf, "%.3fM", v / 1e6);
  else if (v >= 1e3) std::snprintf(buf, sizeof buf, "%.1fK", v / 1e3);
  else std::snprintf(buf, sizeof buf, "%.0f", v);
  return buf;
}

}  // namespace

double layer_flops(const LayerDesc& desc) {
  return sum_tree(desc, [](const LayerDesc& l) {
    if (l.kind == LayerKind::local_relation) return lr_layer_flops(l.lr, l.input.h, l.input.w).headline;
    return dense_flops(l);
  });
}

double layer_exact_flops(const LayerDesc& desc) {
  return sum_tree(desc, [](const LayerDesc& l) {
    if (l.kind == LayerKind::local_relation) return lr_layer_flops(l.lr, l.input.h, l.input.w).exact;
    return dense_flops(l);
  });
}

CostReport network_cost(const NetworkPlan& plan) {
  CostReport r;
  r.model = plan.spec.name;
  r.depth = network_depth(plan);
  r.inner_widths = plan.inner_widths;
  std::vector<const LayerDesc*> leaves;
  for (const auto& l : plan.layers) flatten(l, leaves);
  for (const LayerDesc* l : leaves) {
    CostRow row;
    row.name = l->name;
    row.kind = l->kind;
    row.params = layer_params(*l);
    row.flops = layer_flops(*l);
    row.exact_flops = layer_exact_flops(*l);
    row.output = l->output;
    if (l->kind == LayerKind::local_relation) {
      row.formula_flops = lr_layer_flops(l->lr, l->input.h, l->input.w).formula;
      r.lr_flops += row.flops;
      r.lr_formula_flops += row.formula_flops;
    }
    r.total_params += row.params;
    r.total_flops += row.flops;
    r.total_exact_flops += row.exact_flops;
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-8s %12s %14s %14s  %s\n", "layer", "kind", "params", "flops",
                "exact_flops", "output");
  os << line;
  for (const auto& row : rows) {
    if (row.params == 0 && row.flops == 0) continue;
    std::snprintf(line, sizeof line, "%-28s %-8s %12zu %14.0f %14.0f  %zux%zux%zu\n", row.name.c_str(),
                  std::string(to_string(row.kind)).c_str(), row.params, row.flops, row.exact_flops, row.output.c,
                  row.output.h, row.output.w);
    os << line;
  }
  os << "model " << model << ": depth " << depth << ", params " << total_params << " (" << human(total_params)
     << "), flops " << static_cast<long long>(total_flops) << " (" << human(total_flops) << "), exact "
     << human(total_exact_flops) << "\n";
  if (lr_flops > 0) {
    os << "local relation layers: counted " << human(lr_flops) << ", complexity formula " << human(lr_formula_flops)
       << ", ratio " << lr_formula_flops / lr_flops << "\n";
    os << "inner widths: " << inner_widths[0] << " " << inner_widths[1] << " " << inner_widths[2] << " "
       << inner_widths[3] << "\n";
  }
  return os.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "layer,kind,params,flops,exact_flops,formula_flops,out_c,out_h,out_w\n";
  os.precision(17);
  for (const auto& row : rows) {
    os << row.name << ',' << to_string(row.kind) << ',' << row.params << ',' << row.flops << ','
       << row.exact_flops << ',' << row.formula_flops << ',' << row.output.c << ',' << row.output.h << ','
       << row.output.w << '\n';
  }
  os << "total,," << total_params << ',' << total_flops << ',' << total_exact_flops << ',' << lr_formula_flops
     << ",,,\n";
  return os.str();
}

std::optional<PublishedTarget> published_target(std::string_view model) {
  if (model == "resnet50") return PublishedTarget{"resnet50", 25.5, 4.3};
  if (model == "lr50") return PublishedTarget{"lr50", 23.3, 4.3};
  if (model == "resnet26") return PublishedTarget{"resnet26", 16.0, 2.6};
  if (model == "lr26") return PublishedTarget{"lr26", 14.7, 2.6};
  // Widths for this one are not published, so the check is looser.
  if (model == "lr18") return PublishedTarget{"lr18", 14.4, 2.5, 0.10, 0.10};
  return std::nullopt;
}

TargetCheck check_target(const CostReport& report, const PublishedTarget& target) {
  TargetCheck c;
  c.params_rel = (static_cast<double>(report.total_params) / 1e6 - target.params_millions) / target.params_millions;
  c.flops_rel = (report.total_flops / 1e9 - target.gflops) / target.gflops;
  c.params_ok = std::abs(c.params_rel) <= target.params_tolerance;
  c.flops_ok = std::abs(c.flops_rel) <= target.flops_tolerance;
  return c;
}

}  // namespace lrnet
