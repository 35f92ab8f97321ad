// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <type_traits>
#include <vector>

#include "lrnet/local_relation.hpp"
#include "lrnet/parallel.hpp"

namespace lrnet {

namespace {

using idx = std::ptrdiff_t;

struct Span1d {
  std::size_t lo;  // first valid tap
  std::size_t hi;  // one past the last valid tap
};

// Valid taps t in [0, k) with 0 <= anchor + t - r < extent.
Span1d valid_taps(std::size_t anchor, std::size_t k, std::size_t r, std::size_t extent) {
  const idx a = static_cast<idx>(anchor) - static_cast<idx>(r);
  const idx lo = std::max<idx>(0, -a);
  const idx hi = std::min<idx>(static_cast<idx>(k), static_cast<idx>(extent) - a);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// exp for non-positive arguments in float, written as plain arithmetic so
// the compiler can vectorize it: range reduction by ln 2, a degree-5
// polynomial for the remainder, and the power of two built in the exponent
// bits. Relative error is a few ulp; inputs below -87 are clamped.
inline float exp_nonpositive(float x) {
  x = std::max(x, -87.0f);
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

template <typename T>
T exp_nonpositive(T x) {
  return std::exp(x);
}

}  // namespace

template <typename T>
Tensor<T> lr_forward_optimized(const Tensor<T>& x, const LocalRelationParams<T>& params,
                               const LocalRelationConfig& config) {
  config.validate();
  if (x.c() != static_cast<std::size_t>(config.channels)) {
    throw ShapeError("local relation: input has " + std::to_string(x.c()) + " channels, layer expects " +
                     std::to_string(config.channels));
  }
  const Shape out_shape = lr_output_shape(x.shape(), config);
  if (x.n() == 0) return Tensor<T>(out_shape);

  const std::size_t s = static_cast<std::size_t>(config.stride);
  const std::size_t k = static_cast<std::size_t>(config.kernel);
  const std::size_t win = k * k;
  const std::size_t r = static_cast<std::size_t>(config.radius());
  const std::size_t m = static_cast<std::size_t>(config.channels_per_group);
  const std::size_t d = static_cast<std::size_t>(config.qk_dim);
  const std::size_t groups = static_cast<std::size_t>(config.groups());
  const std::size_t H = x.h();
  const std::size_t W = x.w();
  const std::size_t Ho = out_shape.h;
  const std::size_t Wo = out_shape.w;
  const bool softmax = config.normalization == Normalization::softmax;
  const Composability variant = config.variant;

  // Query only at anchors; key at full resolution.
  const Tensor<T> q = channel_transform_fwd(x, params.query, s);
  const Tensor<T> kmap = channel_transform_fwd(x, params.key);
  Tensor<T> prior;
  if (config.geo_mode != GeoMode::off) prior = materialize_prior(params, config);

  // Output columns that see column tap kx inside the image.
  std::vector<Span1d> col_span(k);
  for (std::size_t kx = 0; kx < k; ++kx) {
    const idx first = std::max<idx>(0, (static_cast<idx>(r) - static_cast<idx>(kx) + static_cast<idx>(s) - 1) /
                                           static_cast<idx>(s));
    const idx last = std::min<idx>(static_cast<idx>(Wo),
                                   (static_cast<idx>(W + r) - static_cast<idx>(kx) + static_cast<idx>(s) - 1) /
                                       static_cast<idx>(s));
    col_span[kx] = {static_cast<std::size_t>(first), static_cast<std::size_t>(std::max(first, last))};
  }

  Tensor<T> agg(out_shape);
  parallel_for(0, static_cast<idx>(x.n() * groups), [&](idx ng) {
    const std::size_t n = static_cast<std::size_t>(ng) / groups;
    const std::size_t g = static_cast<std::size_t>(ng) % groups;
    const T* pr = prior.empty() ? nullptr : prior.plane(0, g);
    // Weights for one output row, tap-major so the inner loops run along
    // output columns.
    std::vector<T> wts(win * Wo);
    std::vector<T> mx(Wo);
    std::vector<T> sum(Wo);

    for (std::size_t oh = 0; oh < Ho; ++oh) {
      const Span1d rows = valid_taps(oh * s, k, r, H);
      for (std::size_t ky = rows.lo; ky < rows.hi; ++ky) {
        const std::size_t ih = oh * s + ky - r;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const Span1d cols = col_span[kx];
          T* w = wts.data() + (ky * k + kx) * Wo;
          const T bias = pr ? pr[ky * k + kx] : T(0);
          for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) w[ow] = bias;
          for (std::size_t i = 0; i < d; ++i) {
            const T* qrow = q.plane(n, g * d + i) + oh * Wo;
            const T* krow = kmap.plane(n, g * d + i) + ih * W + kx - r;
            switch (variant) {
              case Composability::squared_difference:
                for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                  const T diff = qrow[ow] - krow[ow * s];
                  w[ow] -= diff * diff;
                }
                break;
              case Composability::absolute_difference:
                for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) w[ow] -= std::abs(qrow[ow] - krow[ow * s]);
                break;
              case Composability::multiplication:
                for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) w[ow] += qrow[ow] * krow[ow * s];
                break;
            }
          }
        }
      }
      if (softmax) {
        std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
        std::fill(sum.begin(), sum.end(), T(0));
        for (std::size_t ky = rows.lo; ky < rows.hi; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T* w = wts.data() + (ky * k + kx) * Wo;
            for (std::size_t ow = col_span[kx].lo; ow < col_span[kx].hi; ++ow) mx[ow] = std::max(mx[ow], w[ow]);
          }
        for (std::size_t ky = rows.lo; ky < rows.hi; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            T* w = wts.data() + (ky * k + kx) * Wo;
            for (std::size_t ow = col_span[kx].lo; ow < col_span[kx].hi; ++ow) {
              w[ow] = exp_nonpositive(w[ow] - mx[ow]);
              sum[ow] += w[ow];
            }
          }
        for (std::size_t ow = 0; ow < Wo; ++ow) sum[ow] = T(1) / sum[ow];
        for (std::size_t ky = rows.lo; ky < rows.hi; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            T* w = wts.data() + (ky * k + kx) * Wo;
            for (std::size_t ow = col_span[kx].lo; ow < col_span[kx].hi; ++ow) w[ow] *= sum[ow];
          }
      }
      // Aggregate the m channels that share these weights.
      for (std::size_t c = g * m; c < (g + 1) * m; ++c) {
        const T* src = x.plane(n, c);
        T* dst = agg.plane(n, c) + oh * Wo;
        for (std::size_t ky = rows.lo; ky < rows.hi; ++ky) {
          const T* xrow = src + (oh * s + ky - r) * W;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T* w = wts.data() + (ky * k + kx) * Wo;
            const T* xs = xrow + kx - r;
            for (std::size_t ow = col_span[kx].lo; ow < col_span[kx].hi; ++ow) dst[ow] += w[ow] * xs[ow * s];
          }
        }
      }
    }
  });

  if (config.output_transform) return channel_transform_fwd(agg, params.output);
  return agg;
}

template Tensor<float> lr_forward_optimized(const Tensor<float>&, const LocalRelationParams<float>&,
                                            const LocalRelationConfig&);
template Tensor<double> lr_forward_optimized(const Tensor<double>&, const LocalRelationParams<double>&,
                                             const LocalRelationConfig&);

}  // namespace lrnet
