// SPDX-License-Identifier: Apache-2.0
#include "lrnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lrnet {

GradComparison compare_gradients(std::string group, std::span<const double> analytic,
                                 std::span<const double> numeric, const Tolerance& tol) {
  if (analytic.size() != numeric.size()) throw ShapeError(group + ": analytic/numeric length mismatch");
  GradComparison c;
  c.group = std::move(group);
  c.checked = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    c.max_abs = std::max(c.max_abs, diff);
    if (diff <= tol.abs_floor) continue;
    const double rel = diff / std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    c.max_rel = std::max(c.max_rel, rel);
    if (rel > tol.rel) ++c.failures;
  }
  return c;
}

std::vector<double> numeric_gradient(const std::function<double()>& loss, std::span<double> values, double step) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + step;
    const double up = loss();
    values[i] = keep - step;
    const double down = loss();
    values[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

bool GradCheckCase::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const GradComparison& g) { return g.pass(); });
}

bool GradCheckReport::pass() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.pass(); });
}

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& c : cases)
    for (const auto& g : c.groups)
      if (!g.pass()) out.push_back(c.label + ": " + g.group);
  return out;
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  char line[256];
  for (const auto& c : cases) {
    os << (c.pass() ? "PASS " : "FAIL ") << c.label << " shape " << c.shape.str() << "\n";
    for (const auto& g : c.groups) {
      std::snprintf(line, sizeof line, "    %-10s n=%-5zu max_abs=%.3e max_rel=%.3e%s\n", g.group.c_str(), g.checked,
                    g.max_abs, g.max_rel, g.pass() ? "" : "  <-- exceeds tolerance");
      os << line;
    }
  }
  std::size_t passed = 0;
  for (const auto& c : cases) passed += c.pass();
  os << "gradcheck seed " << seed << ": " << passed << "/" << cases.size() << " configurations pass\n";
  return os.str();
}

std::string describe(const LocalRelationConfig& c) {
  std::ostringstream os;
  os << "variant=" << to_string(c.variant) << " stride=" << c.stride << " geo=" << to_string(c.geo_mode)
     << " norm=" << to_string(c.normalization) << " k=" << c.kernel << " m=" << c.channels_per_group
     << " d=" << c.qk_dim;
  if (c.output_transform) os << " output_transform";
  return os.str();
}

namespace {

using Td = Tensor<double>;

void append(std::vector<double>& out, const Td& t) { out.insert(out.end(), t.storage().begin(), t.storage().end()); }

// Numeric gradient of a parameter group made of several tensors.
std::vector<double> numeric_group(const std::function<double()>& loss, std::vector<Td*> parts, double step) {
  std::vector<double> g;
  for (Td* t : parts) {
    if (t->empty()) continue;
    const auto part = numeric_gradient(loss, t->span(), step);
    g.insert(g.end(), part.begin(), part.end());
  }
  return g;
}

bool prior_near_kink(const LocalRelationParams<double>& p, const LocalRelationConfig& c, double margin) {
  if (c.geo_mode != GeoMode::network) return false;
  const int r = c.radius();
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      for (std::size_t j = 0; j < p.geo_hidden.out_channels(); ++j) {
        const double pre = p.geo_hidden.weight[j * 2] * dy + p.geo_hidden.weight[j * 2 + 1] * dx + p.geo_hidden.bias[j];
        if (std::abs(pre) < margin) return true;
      }
  return false;
}

bool composability_near_kink(const Td& x, const LocalRelationParams<double>& p, const LocalRelationConfig& c,
                             double margin) {
  if (c.variant != Composability::absolute_difference) return false;
  const auto wf = compute_weight_field(x, p, c);
  const auto& f = wf.field;
  const std::size_t s = static_cast<std::size_t>(c.stride);
  const std::size_t k = f.kernel;
  const std::size_t r = static_cast<std::size_t>(c.radius());
  const std::size_t d = static_cast<std::size_t>(c.qk_dim);
  for (std::size_t n = 0; n < f.batch; ++n)
    for (std::size_t g = 0; g < f.groups; ++g)
      for (std::size_t oh = 0; oh < f.out_h; ++oh)
        for (std::size_t ow = 0; ow < f.out_w; ++ow) {
          const auto mask = f.mask(oh, ow);
          for (std::size_t e = 0; e < k * k; ++e) {
            if (!mask[e]) continue;
            const std::size_t ih = oh * s + e / k - r;
            const std::size_t iw = ow * s + e % k - r;
            for (std::size_t i = 0; i < d; ++i) {
              if (std::abs(wf.q_map(n, g * d + i, oh, ow) - wf.k_map(n, g * d + i, ih, iw)) < margin) return true;
            }
          }
        }
  return false;
}

// d(loss)/dx through the aggregation only, with the weights held fixed.
Td value_path_only(const Td& grad_y, const ForwardCache<double>& cache, const LocalRelationParams<double>& p,
                   const LocalRelationConfig& c) {
  Td grad_agg = grad_y;
  if (c.output_transform) grad_agg = channel_transform_bwd(cache.aggregated, p.output, grad_y).x;
  const auto& f = cache.field;
  const std::size_t s = static_cast<std::size_t>(c.stride);
  const std::size_t k = f.kernel;
  const std::size_t r = static_cast<std::size_t>(c.radius());
  const std::size_t m = static_cast<std::size_t>(c.channels_per_group);
  Td gx(cache.x.shape());
  for (std::size_t n = 0; n < f.batch; ++n)
    for (std::size_t ch = 0; ch < cache.x.c(); ++ch)
      for (std::size_t oh = 0; oh < f.out_h; ++oh)
        for (std::size_t ow = 0; ow < f.out_w; ++ow) {
          const auto w = f.at(n, ch / m, oh, ow);
          const auto mask = f.mask(oh, ow);
          for (std::size_t e = 0; e < k * k; ++e)
            if (mask[e]) gx(n, ch, oh * s + e / k - r, ow * s + e % k - r) += w[e] * grad_agg(n, ch, oh, ow);
        }
  return gx;
}

}  // namespace

GradCheckCase gradcheck_local_relation(const LocalRelationConfig& config, const GradCheckOptions& opt) {
  config.validate();
  std::mt19937_64 rng(opt.seed);
  GradCheckCase result;
  result.label = describe(config);
  result.config = config;
  result.shape = {opt.batch, static_cast<std::size_t>(config.channels), opt.height, opt.width};

  LocalRelationParams<double> p;
  Td x(result.shape);
  bool ok = false;
  for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
    p = init_local_relation<double>(config, rng);
    // Random values everywhere, including the zero-initialized parts, so
    // every gradient path carries signal.
    if (!p.geo_hidden.bias.empty()) fill_normal(p.geo_hidden.bias, rng, 0.0, 0.5);
    if (!p.geo_out.weight.empty()) fill_normal(p.geo_out.weight, rng, 0.0, 0.5);
    if (!p.geo_out.bias.empty()) fill_normal(p.geo_out.bias, rng, 0.0, 0.5);
    if (!p.geo_table.empty()) fill_normal(p.geo_table, rng, 0.0, 0.5);
    fill_normal(x, rng, 0.0, 1.0);
    ok = !prior_near_kink(p, config, opt.kink_margin) && !composability_near_kink(x, p, config, opt.kink_margin);
  }
  if (!ok) throw NumericError("gradcheck: could not sample an input away from non-differentiable points");

  const Shape out_shape = lr_output_shape(result.shape, config);
  Td cotangent(out_shape);
  fill_normal(cotangent, rng, 0.0, 1.0);

  auto loss = [&]() {
    const Td y = lr_forward(x, p, config).y;
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += cotangent[i] * y[i];
    return acc;
  };

  const auto fwd = lr_forward(x, p, config);
  LocalRelationGrads<double> g = lr_backward(cotangent, fwd.cache, p, config);
  if (opt.mutation == Mutation::negate_theta_g) {
    for (Td* t : {&g.geo_hidden_weight, &g.geo_hidden_bias, &g.geo_out_weight, &g.geo_out_bias, &g.geo_table})
      for (auto& v : t->storage()) v = -v;
  } else if (opt.mutation == Mutation::drop_query_key_path) {
    g.x = value_path_only(cotangent, fwd.cache, p, config);
    g.query.fill(0.0);
    g.key.fill(0.0);
  }

  auto add_group = [&](const std::string& name, std::vector<const Td*> analytic_parts, std::vector<Td*> params) {
    std::vector<double> a;
    for (const Td* t : analytic_parts) append(a, *t);
    const auto n = numeric_group(loss, std::move(params), opt.step);
    result.groups.push_back(compare_gradients(name, a, n, opt.tol));
  };

  add_group("x", {&g.x}, {&x});
  add_group("theta_q", {&g.query}, {&p.query.weight});
  add_group("theta_k", {&g.key}, {&p.key.weight});
  if (config.geo_mode == GeoMode::network) {
    add_group("theta_g", {&g.geo_hidden_weight, &g.geo_hidden_bias, &g.geo_out_weight, &g.geo_out_bias},
              {&p.geo_hidden.weight, &p.geo_hidden.bias, &p.geo_out.weight, &p.geo_out.bias});
  } else if (config.geo_mode == GeoMode::direct) {
    add_group("theta_g", {&g.geo_table}, {&p.geo_table});
  }
  if (config.output_transform) add_group("theta_out", {&g.output}, {&p.output.weight});
  return result;
}

GradCheckReport gradcheck_sweep(const GradCheckOptions& opt) {
  GradCheckReport report;
  report.seed = opt.seed;
  LocalRelationConfig base;
  base.channels = opt.channels;
  base.kernel = opt.kernel;
  base.channels_per_group = opt.channels_per_group;
  base.qk_dim = opt.qk_dim;
  base.geo_hidden = opt.geo_hidden;

  std::vector<LocalRelationConfig> configs;
  for (Composability v : {Composability::squared_difference, Composability::absolute_difference,
                          Composability::multiplication})
    for (int s : {1, 2})
      for (GeoMode geo : {GeoMode::network, GeoMode::direct, GeoMode::off})
        for (Normalization norm : {Normalization::softmax, Normalization::none}) {
          LocalRelationConfig c = base;
          c.variant = v;
          c.stride = s;
          c.geo_mode = geo;
          c.normalization = norm;
          configs.push_back(c);
        }
  LocalRelationConfig with_output = base;
  with_output.output_transform = true;
  with_output.stride = 2;
  configs.push_back(with_output);

  std::uint64_t case_seed = opt.seed;
  for (const auto& c : configs) {
    GradCheckOptions o = opt;
    o.seed = case_seed++;
    report.cases.push_back(gradcheck_local_relation(c, o));
  }
  return report;
}

}  // namespace lrnet
