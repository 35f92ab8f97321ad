// SPDX-License-Identifier: Apache-2.0
#include "lrnet/local_relation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lrnet/parallel.hpp"

namespace lrnet {

namespace {

using idx = std::ptrdiff_t;

template <typename T>
T sign(T v) {
  return static_cast<T>((v > T(0)) - (v < T(0)));
}

// Partial derivatives of Phi with respect to query component i and key
// component i, given the component values.
template <typename T>
void composability_partials(T q, T k, Composability variant, T& dq, T& dk) {
  switch (variant) {
    case Composability::squared_difference:
      dq = T(-2) * (q - k);
      dk = T(2) * (q - k);
      return;
    case Composability::absolute_difference:
      // Subgradient 0 at q == k.
      dq = -sign(q - k);
      dk = sign(q - k);
      return;
    case Composability::multiplication:
      dq = k;
      dk = q;
      return;
  }
}

template <typename T>
T phi_term(T q, T k, Composability variant) {
  switch (variant) {
    case Composability::squared_difference:
      return -(q - k) * (q - k);
    case Composability::absolute_difference:
      return -std::abs(q - k);
    case Composability::multiplication:
      return q * k;
  }
  return T(0);
}

// Evaluates the prior network at every offset. `pre_hidden` receives the
// pre-ReLU activations [offset][hidden]. Shared by training and
// materialization so both produce bit-identical tables.
template <typename T>
Tensor<T> evaluate_prior_network(const LocalRelationParams<T>& params, const LocalRelationConfig& config,
                                 std::vector<T>* pre_hidden) {
  const std::size_t k = static_cast<std::size_t>(config.kernel);
  const int r = config.radius();
  const std::size_t hidden = params.geo_hidden.out_channels();
  const std::size_t groups = params.geo_out.out_channels();
  Tensor<T> table({1, groups, k, k});
  std::vector<T> h(hidden);
  if (pre_hidden) pre_hidden->assign(k * k * hidden, T(0));
  for (std::size_t ky = 0; ky < k; ++ky) {
    for (std::size_t kx = 0; kx < k; ++kx) {
      const T dy = static_cast<T>(static_cast<int>(ky) - r);
      const T dx = static_cast<T>(static_cast<int>(kx) - r);
      for (std::size_t j = 0; j < hidden; ++j) {
        const T pre = params.geo_hidden.weight[j * 2] * dy + params.geo_hidden.weight[j * 2 + 1] * dx +
                      params.geo_hidden.bias[j];
        if (pre_hidden) (*pre_hidden)[(ky * k + kx) * hidden + j] = pre;
        h[j] = pre > T(0) ? pre : T(0);
      }
      for (std::size_t g = 0; g < groups; ++g) {
        T acc = params.geo_out.bias[g];
        for (std::size_t j = 0; j < hidden; ++j) acc += params.geo_out.weight[g * hidden + j] * h[j];
        table(0, g, ky, kx) = acc;
      }
    }
  }
  return table;
}

template <typename T>
void check_input(const Tensor<T>& x, const LocalRelationConfig& config) {
  config.validate();
  if (x.c() != static_cast<std::size_t>(config.channels)) {
    throw ShapeError("local relation: input has " + std::to_string(x.c()) + " channels, layer expects " +
                     std::to_string(config.channels));
  }
}

template <typename T>
void softmax_in_place(T* logits, const std::uint8_t* valid, std::size_t count) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < count; ++i)
    if (valid[i]) mx = std::max(mx, logits[i]);
  T sum = T(0);
  for (std::size_t i = 0; i < count; ++i) {
    logits[i] = valid[i] ? std::exp(logits[i] - mx) : T(0);
    sum += logits[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < count; ++i) logits[i] *= inv;
}

// Window taps [lo, hi) along one axis that land inside an extent of `size`
// for output coordinate `o`. Windows are rectangles clipped at the borders.
struct TapRange {
  std::size_t lo;
  std::size_t hi;
};

inline TapRange tap_range(std::size_t o, std::size_t stride, std::size_t radius, std::size_t size, std::size_t k) {
  const idx anchor = static_cast<idx>(o * stride);
  const idx lo = std::max<idx>(0, static_cast<idx>(radius) - anchor);
  const idx hi = std::min<idx>(static_cast<idx>(k), static_cast<idx>(size + radius) - anchor);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

}  // namespace

std::string_view to_string(Composability v) {
  switch (v) {
    case Composability::squared_difference:
      return "sqdiff";
    case Composability::absolute_difference:
      return "absdiff";
    case Composability::multiplication:
      return "mul";
  }
  return "?";
}

std::string_view to_string(Normalization v) { return v == Normalization::softmax ? "softmax" : "none"; }

std::string_view to_string(GeoMode v) {
  switch (v) {
    case GeoMode::network:
      return "network";
    case GeoMode::direct:
      return "direct";
    case GeoMode::off:
      return "off";
  }
  return "?";
}

Composability parse_composability(std::string_view s) {
  if (s == "sqdiff" || s == "squared_difference") return Composability::squared_difference;
  if (s == "absdiff" || s == "absolute_difference") return Composability::absolute_difference;
  if (s == "mul" || s == "multiplication") return Composability::multiplication;
  throw ConfigError("unknown composability variant '" + std::string(s) + "'");
}

Normalization parse_normalization(std::string_view s) {
  if (s == "softmax") return Normalization::softmax;
  if (s == "none") return Normalization::none;
  throw ConfigError("unknown normalization '" + std::string(s) + "'");
}

GeoMode parse_geo_mode(std::string_view s) {
  if (s == "network") return GeoMode::network;
  if (s == "direct") return GeoMode::direct;
  if (s == "off") return GeoMode::off;
  throw ConfigError("unknown geometric prior mode '" + std::string(s) + "'");
}

void LocalRelationConfig::validate() const {
  if (channels <= 0) throw ConfigError("local relation: channels must be positive");
  if (channels_per_group <= 0 || channels % channels_per_group != 0) {
    throw ConfigError("local relation: channels (" + std::to_string(channels) +
                      ") must be divisible by channels_per_group (" + std::to_string(channels_per_group) + ")");
  }
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("local relation: kernel size must be odd and positive");
  if (kernel > 9) throw ConfigError("local relation: kernel size above 9 is not supported");
  if (stride != 1 && stride != 2) throw ConfigError("local relation: stride must be 1 or 2");
  if (qk_dim < 1) throw ConfigError("local relation: qk_dim must be >= 1");
  if (geo_hidden < 1) throw ConfigError("local relation: geo_hidden must be >= 1");
}

Shape lr_output_shape(const Shape& in, const LocalRelationConfig& config) {
  const auto s = static_cast<std::size_t>(config.stride);
  return {in.n, in.c, strided_extent(in.h, s), strided_extent(in.w, s)};
}

template <typename T>
LocalRelationParams<T> init_local_relation(const LocalRelationConfig& config, std::mt19937_64& rng) {
  config.validate();
  const auto c = static_cast<std::size_t>(config.channels);
  const auto gd = static_cast<std::size_t>(config.groups() * config.qk_dim);
  const auto groups = static_cast<std::size_t>(config.groups());
  const auto k = static_cast<std::size_t>(config.kernel);
  LocalRelationParams<T> p;
  p.query = ChannelTransform<T>(c, gd, false);
  p.key = ChannelTransform<T>(c, gd, false);
  fill_normal(p.query.weight, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(c)));
  fill_normal(p.key.weight, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(c)));
  switch (config.geo_mode) {
    case GeoMode::network: {
      const auto hidden = static_cast<std::size_t>(config.geo_hidden);
      p.geo_hidden = ChannelTransform<T>(2, hidden, true);
      p.geo_out = ChannelTransform<T>(hidden, groups, true);
      fill_normal(p.geo_hidden.weight, rng, 0.0, 1.0 / std::sqrt(2.0));
      break;
    }
    case GeoMode::direct:
      p.geo_table = Tensor<T>({1, groups, k, k});
      break;
    case GeoMode::off:
      break;
  }
  if (config.output_transform) {
    p.output = ChannelTransform<T>(c, c, false);
    fill_normal(p.output.weight, rng, 0.0, std::sqrt(2.0 / static_cast<double>(c)));
  }
  return p;
}

template <typename T>
T composability(std::span<const T> query, std::span<const T> key, Composability variant) {
  T acc = T(0);
  for (std::size_t i = 0; i < query.size(); ++i) acc += phi_term(query[i], key[i], variant);
  return acc;
}

template <typename T>
GeometricPriorTable<T> materialize_prior(const LocalRelationParams<T>& params, const LocalRelationConfig& config) {
  switch (config.geo_mode) {
    case GeoMode::off:
      throw PriorDisabledError("materialize_prior: geometric prior is disabled (geo_mode=off)");
    case GeoMode::direct:
      return params.geo_table;
    case GeoMode::network:
      break;
  }
  return evaluate_prior_network<T>(params, config, nullptr);
}

template <typename T>
WeightFieldResult<T> compute_weight_field(const Tensor<T>& x, const LocalRelationParams<T>& params,
                                          const LocalRelationConfig& config) {
  check_input(x, config);
  const std::size_t s = static_cast<std::size_t>(config.stride);
  const std::size_t k = static_cast<std::size_t>(config.kernel);
  const std::size_t win = k * k;
  const idx r = config.radius();
  const std::size_t d = static_cast<std::size_t>(config.qk_dim);
  const std::size_t groups = static_cast<std::size_t>(config.groups());
  const std::size_t H = x.h();
  const std::size_t W = x.w();

  WeightFieldResult<T> res;
  // Query is projected on the full map, then sampled at the anchors.
  res.q_map = subsample(channel_transform_fwd(x, params.query), s);
  res.k_map = channel_transform_fwd(x, params.key);

  Tensor<T> prior;
  if (config.geo_mode == GeoMode::network) {
    prior = evaluate_prior_network<T>(params, config, nullptr);
  } else if (config.geo_mode == GeoMode::direct) {
    prior = params.geo_table;
  }

  WeightField<T>& f = res.field;
  f.batch = x.n();
  f.groups = groups;
  f.out_h = strided_extent(H, s);
  f.out_w = strided_extent(W, s);
  f.kernel = k;
  f.weights.assign(f.batch * groups * f.out_h * f.out_w * win, T(0));
  f.valid.assign(f.out_h * f.out_w * win, 0);
  for (std::size_t oh = 0; oh < f.out_h; ++oh) {
    for (std::size_t ow = 0; ow < f.out_w; ++ow) {
      std::uint8_t* m = f.valid.data() + f.mask_index(oh, ow);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const idx ih = static_cast<idx>(oh * s) + static_cast<idx>(ky) - r;
          const idx iw = static_cast<idx>(ow * s) + static_cast<idx>(kx) - r;
          m[ky * k + kx] = ih >= 0 && iw >= 0 && ih < static_cast<idx>(H) && iw < static_cast<idx>(W);
        }
      }
    }
  }

  const std::size_t rr = static_cast<std::size_t>(r);
  parallel_for(0, static_cast<idx>(f.batch), [&](idx n) {
    std::vector<T> q(d);
    std::vector<const T*> keys(d);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < d; ++i) keys[i] = res.k_map.plane(n, g * d + i);
      const T* pri = prior.empty() ? nullptr : prior.plane(0, g);
      for (std::size_t oh = 0; oh < f.out_h; ++oh) {
        const TapRange ty = tap_range(oh, s, rr, H, k);
        for (std::size_t ow = 0; ow < f.out_w; ++ow) {
          const TapRange tx = tap_range(ow, s, rr, W, k);
          for (std::size_t i = 0; i < d; ++i) q[i] = res.q_map(n, g * d + i, oh, ow);
          T* wts = f.weights.data() + f.index(n, g, oh, ow);
          for (std::size_t ky = ty.lo; ky < ty.hi; ++ky) {
            const std::size_t row = (oh * s + ky - rr) * W + ow * s - rr;
            for (std::size_t kx = tx.lo; kx < tx.hi; ++kx) {
              T logit = pri ? pri[ky * k + kx] : T(0);
              for (std::size_t i = 0; i < d; ++i) logit += phi_term(q[i], keys[i][row + kx], config.variant);
              wts[ky * k + kx] = logit;
            }
          }
          if (config.normalization == Normalization::softmax)
            softmax_in_place(wts, f.valid.data() + f.mask_index(oh, ow), win);
        }
      }
    }
  });
  return res;
}

template <typename T>
LocalRelationResult<T> lr_forward(const Tensor<T>& x, const LocalRelationParams<T>& params,
                                  const LocalRelationConfig& config) {
  WeightFieldResult<T> wf = compute_weight_field(x, params, config);
  const WeightField<T>& f = wf.field;
  const std::size_t s = static_cast<std::size_t>(config.stride);
  const std::size_t k = f.kernel;
  const std::size_t r = static_cast<std::size_t>(config.radius());
  const std::size_t m = static_cast<std::size_t>(config.channels_per_group);

  Tensor<T> agg({x.n(), x.c(), f.out_h, f.out_w});
  const std::size_t W = x.w();
  parallel_for(0, static_cast<idx>(x.n()), [&](idx n) {
    for (std::size_t g = 0; g < f.groups; ++g) {
      for (std::size_t oh = 0; oh < f.out_h; ++oh) {
        const TapRange ty = tap_range(oh, s, r, x.h(), k);
        for (std::size_t ow = 0; ow < f.out_w; ++ow) {
          const TapRange tx = tap_range(ow, s, r, W, k);
          const T* wts = f.weights.data() + f.index(n, g, oh, ow);
          for (std::size_t c = g * m; c < (g + 1) * m; ++c) {
            const T* xp = x.plane(n, c);
            T acc = T(0);
            for (std::size_t ky = ty.lo; ky < ty.hi; ++ky) {
              const T* xr = xp + (oh * s + ky - r) * W + ow * s - r;
              const T* wr = wts + ky * k;
              for (std::size_t kx = tx.lo; kx < tx.hi; ++kx) acc += wr[kx] * xr[kx];
            }
            agg(n, c, oh, ow) = acc;
          }
        }
      }
    }
  });

  LocalRelationResult<T> out;
  if (config.output_transform) {
    out.y = channel_transform_fwd(agg, params.output);
    out.cache.aggregated = std::move(agg);
  } else {
    out.y = std::move(agg);
  }
  out.cache.x = x;
  out.cache.q_map = std::move(wf.q_map);
  out.cache.k_map = std::move(wf.k_map);
  out.cache.field = std::move(wf.field);
  if (config.geo_mode == GeoMode::network) evaluate_prior_network(params, config, &out.cache.geo_pre_hidden);
  return out;
}

template <typename T>
LocalRelationGrads<T> lr_backward(const Tensor<T>& grad_y, const ForwardCache<T>& cache,
                                  const LocalRelationParams<T>& params, const LocalRelationConfig& config) {
  const Tensor<T>& x = cache.x;
  const WeightField<T>& f = cache.field;
  require_shape(grad_y.shape(), lr_output_shape(x.shape(), config), "lr_backward grad_y");
  const std::size_t s = static_cast<std::size_t>(config.stride);
  const std::size_t k = f.kernel;
  const std::size_t win = k * k;
  const std::size_t r = static_cast<std::size_t>(config.radius());
  const std::size_t m = static_cast<std::size_t>(config.channels_per_group);
  const std::size_t d = static_cast<std::size_t>(config.qk_dim);
  const std::size_t groups = f.groups;

  LocalRelationGrads<T> g;

  // Output transform.
  const Tensor<T>* grad_agg = &grad_y;
  Tensor<T> grad_agg_storage;
  if (config.output_transform) {
    ChannelTransformGrads<T> og = channel_transform_bwd(cache.aggregated, params.output, grad_y);
    grad_agg_storage = std::move(og.x);
    g.output = std::move(og.weight);
    grad_agg = &grad_agg_storage;
  }

  Tensor<T> grad_x(x.shape());
  Tensor<T> grad_q(cache.q_map.shape());
  Tensor<T> grad_k(cache.k_map.shape());
  const bool has_prior = config.geo_mode != GeoMode::off;
  // Per-sample prior gradient partials, reduced in sample order below.
  std::vector<T> prior_partials(has_prior ? x.n() * groups * win : 0, T(0));

  const std::size_t W = x.w();
  parallel_for(0, static_cast<idx>(x.n()), [&](idx n) {
    std::vector<T> grad_w(win);
    std::vector<T> grad_logit(win);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      for (std::size_t oh = 0; oh < f.out_h; ++oh) {
        const TapRange ty = tap_range(oh, s, r, x.h(), k);
        for (std::size_t ow = 0; ow < f.out_w; ++ow) {
          const TapRange tx = tap_range(ow, s, r, W, k);
          const T* wts = f.weights.data() + f.index(n, gi, oh, ow);
          // Value path and d(loss)/d(weight); taps outside the image keep zero.
          std::fill(grad_w.begin(), grad_w.end(), T(0));
          for (std::size_t c = gi * m; c < (gi + 1) * m; ++c) {
            const T go = (*grad_agg)(n, c, oh, ow);
            const T* xp = x.plane(n, c);
            T* gxp = grad_x.plane(n, c);
            for (std::size_t ky = ty.lo; ky < ty.hi; ++ky) {
              const std::size_t row = (oh * s + ky - r) * W + ow * s - r;
              const T* wr = wts + ky * k;
              T* gwr = grad_w.data() + ky * k;
              for (std::size_t kx = tx.lo; kx < tx.hi; ++kx) {
                gwr[kx] += go * xp[row + kx];
                gxp[row + kx] += wr[kx] * go;
              }
            }
          }
          // Through the normalization; masked taps have zero weight and gradient.
          if (config.normalization == Normalization::softmax) {
            T dot = T(0);
            for (std::size_t e = 0; e < win; ++e) dot += wts[e] * grad_w[e];
            for (std::size_t e = 0; e < win; ++e) grad_logit[e] = wts[e] * (grad_w[e] - dot);
          } else {
            std::copy(grad_w.begin(), grad_w.end(), grad_logit.begin());
          }
          // Through composability and the prior.
          if (has_prior) {
            T* pp = prior_partials.data() + (n * groups + gi) * win;
            for (std::size_t ky = ty.lo; ky < ty.hi; ++ky)
              for (std::size_t kx = tx.lo; kx < tx.hi; ++kx) pp[ky * k + kx] += grad_logit[ky * k + kx];
          }
          for (std::size_t i = 0; i < d; ++i) {
            const std::size_t ch = gi * d + i;
            const T q = cache.q_map(n, ch, oh, ow);
            const T* kp = cache.k_map.plane(n, ch);
            T* gkp = grad_k.plane(n, ch);
            T gq = T(0);
            for (std::size_t ky = ty.lo; ky < ty.hi; ++ky) {
              const std::size_t row = (oh * s + ky - r) * W + ow * s - r;
              for (std::size_t kx = tx.lo; kx < tx.hi; ++kx) {
                const T gl = grad_logit[ky * k + kx];
                T dq = T(0);
                T dk = T(0);
                composability_partials(q, kp[row + kx], config.variant, dq, dk);
                gq += gl * dq;
                gkp[row + kx] += gl * dk;
              }
            }
            grad_q(n, ch, oh, ow) += gq;
          }
        }
      }
    }
  });

  // Query was sampled at anchors: back-project through the strided transform.
  ChannelTransformGrads<T> qg = channel_transform_bwd(x, params.query, grad_q, s);
  ChannelTransformGrads<T> kg = channel_transform_bwd(x, params.key, grad_k);
  for (std::size_t i = 0; i < grad_x.numel(); ++i) grad_x[i] += qg.x[i] + kg.x[i];
  g.x = std::move(grad_x);
  g.query = std::move(qg.weight);
  g.key = std::move(kg.weight);

  if (has_prior) {
    Tensor<T> grad_table({1, groups, k, k});
    for (std::size_t n = 0; n < x.n(); ++n)
      for (std::size_t i = 0; i < groups * win; ++i) grad_table[i] += prior_partials[n * groups * win + i];

    if (config.geo_mode == GeoMode::direct) {
      g.geo_table = std::move(grad_table);
    } else {
      const std::size_t hidden = params.geo_hidden.out_channels();
      g.geo_hidden_weight = Tensor<T>(params.geo_hidden.weight.shape());
      g.geo_hidden_bias = Tensor<T>(params.geo_hidden.bias.shape());
      g.geo_out_weight = Tensor<T>(params.geo_out.weight.shape());
      g.geo_out_bias = Tensor<T>(params.geo_out.bias.shape());
      std::vector<T> gh(hidden);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t e = ky * k + kx;
          const T dy = static_cast<T>(static_cast<int>(ky) - static_cast<int>(r));
          const T dx = static_cast<T>(static_cast<int>(kx) - static_cast<int>(r));
          const T* pre = cache.geo_pre_hidden.data() + e * hidden;
          std::fill(gh.begin(), gh.end(), T(0));
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const T gt = grad_table[gi * win + e];
            g.geo_out_bias[gi] += gt;
            for (std::size_t j = 0; j < hidden; ++j) {
              const T hj = pre[j] > T(0) ? pre[j] : T(0);
              g.geo_out_weight[gi * hidden + j] += gt * hj;
              gh[j] += params.geo_out.weight[gi * hidden + j] * gt;
            }
          }
          for (std::size_t j = 0; j < hidden; ++j) {
            const T gp = pre[j] > T(0) ? gh[j] : T(0);
            g.geo_hidden_weight[j * 2] += gp * dy;
            g.geo_hidden_weight[j * 2 + 1] += gp * dx;
            g.geo_hidden_bias[j] += gp;
          }
        }
      }
    }
  }
  return g;
}

#define LRNET_INSTANTIATE_LR(T)                                                                              \
  template LocalRelationParams<T> init_local_relation(const LocalRelationConfig&, std::mt19937_64&);         \
  template T composability(std::span<const T>, std::span<const T>, Composability);                           \
  template GeometricPriorTable<T> materialize_prior(const LocalRelationParams<T>&, const LocalRelationConfig&); \
  template WeightFieldResult<T> compute_weight_field(const Tensor<T>&, const LocalRelationParams<T>&,        \
                                                     const LocalRelationConfig&);                            \
  template LocalRelationResult<T> lr_forward(const Tensor<T>&, const LocalRelationParams<T>&,                \
                                             const LocalRelationConfig&);                                    \
  template LocalRelationGrads<T> lr_backward(const Tensor<T>&, const ForwardCache<T>&,                       \
                                             const LocalRelationParams<T>&, const LocalRelationConfig&);

LRNET_INSTANTIATE_LR(float)
LRNET_INSTANTIATE_LR(double)

#undef LRNET_INSTANTIATE_LR

}  // namespace lrnet
