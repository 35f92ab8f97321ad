// SPDX-License-Identifier: Apache-2.0
#include "lrnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"
#include "lrnet/parallel.hpp"

namespace lrnet {

namespace {

using idx = std::ptrdiff_t;

// Output columns [lo, hi) whose input column o*stride + tap - pad lies in [0, extent).
struct ClipRange {
  std::size_t lo;
  std::size_t hi;
};

ClipRange clip(std::size_t out_extent, std::size_t in_extent, std::size_t stride, idx tap_minus_pad) {
  // need 0 <= o*s + t < in_extent
  idx lo = 0;
  if (tap_minus_pad < 0) lo = (-tap_minus_pad + static_cast<idx>(stride) - 1) / static_cast<idx>(stride);
  idx hi_excl = (static_cast<idx>(in_extent) - tap_minus_pad + static_cast<idx>(stride) - 1) /
                static_cast<idx>(stride);
  hi_excl = std::clamp<idx>(hi_excl, 0, static_cast<idx>(out_extent));
  lo = std::min<idx>(lo, hi_excl);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi_excl)};
}

}  // namespace

template <typename T>
Tensor<T> subsample(const Tensor<T>& x, std::size_t stride) {
  if (stride == 1) return x;
  const Shape s = x.shape();
  Tensor<T> out({s.n, s.c, strided_extent(s.h, stride), strided_extent(s.w, stride)});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < out.h(); ++h)
        for (std::size_t w = 0; w < out.w(); ++w) out(n, c, h, w) = x(n, c, h * stride, w * stride);
  return out;
}

template <typename T>
Tensor<T> subsample_adjoint(const Tensor<T>& g, const Shape& full, std::size_t stride) {
  if (stride == 1) {
    require_shape(g.shape(), full, "subsample_adjoint");
    return g;
  }
  Tensor<T> out(full);
  for (std::size_t n = 0; n < g.n(); ++n)
    for (std::size_t c = 0; c < g.c(); ++c)
      for (std::size_t h = 0; h < g.h(); ++h)
        for (std::size_t w = 0; w < g.w(); ++w) out(n, c, h * stride, w * stride) = g(n, c, h, w);
  return out;
}

template <typename T>
Tensor<T> channel_transform_fwd(const Tensor<T>& x, const ChannelTransform<T>& ct, std::size_t stride) {
  if (x.c() != ct.in_channels()) {
    throw ShapeError("channel_transform: input has " + std::to_string(x.c()) + " channels, transform expects " +
                     std::to_string(ct.in_channels()));
  }
  const Tensor<T> xs = subsample(x, stride);
  const std::size_t cin = ct.in_channels();
  const std::size_t cout = ct.out_channels();
  const std::size_t plane = xs.shape().plane();
  Tensor<T> y({xs.n(), cout, xs.h(), xs.w()});
  for (std::size_t n = 0; n < xs.n(); ++n) {
    T* dst = y.plane(n, 0);
    if (ct.has_bias())
      for (std::size_t o = 0; o < cout; ++o) std::fill(dst + o * plane, dst + (o + 1) * plane, ct.bias[o]);
    detail::gemm(false, false, cout, plane, cin, T(1), ct.weight.data(), cin, xs.plane(n, 0), plane,
                 ct.has_bias() ? T(1) : T(0), dst, plane);
  }
  return y;
}

template <typename T>
ChannelTransformGrads<T> channel_transform_bwd(const Tensor<T>& x, const ChannelTransform<T>& ct,
                                               const Tensor<T>& grad_out, std::size_t stride) {
  if (x.c() != ct.in_channels()) throw ShapeError("channel_transform_bwd: input channel mismatch");
  const Tensor<T> xs = subsample(x, stride);
  require_shape(grad_out.shape(), Shape{xs.n(), ct.out_channels(), xs.h(), xs.w()},
                "channel_transform_bwd grad_out");
  const std::size_t cin = ct.in_channels();
  const std::size_t cout = ct.out_channels();
  const std::size_t plane = xs.shape().plane();

  ChannelTransformGrads<T> g;
  g.weight = Tensor<T>(ct.weight.shape());
  if (ct.has_bias()) g.bias = Tensor<T>(ct.bias.shape());
  Tensor<T> gxs(xs.shape());
  // Samples are accumulated in order, so the sums do not depend on timing.
  for (std::size_t n = 0; n < xs.n(); ++n) {
    const T* go = grad_out.plane(n, 0);
    detail::gemm(false, true, cout, cin, plane, T(1), go, plane, xs.plane(n, 0), plane, T(1), g.weight.data(), cin);
    detail::gemm(true, false, cin, plane, cout, T(1), ct.weight.data(), cin, go, plane, T(0), gxs.plane(n, 0), plane);
    if (ct.has_bias())
      for (std::size_t o = 0; o < cout; ++o) {
        T acc = T(0);
        for (std::size_t p = 0; p < plane; ++p) acc += go[o * plane + p];
        g.bias[o] += acc;
      }
  }
  g.x = subsample_adjoint(gxs, x.shape(), stride);
  return g;
}

template <typename T>
Tensor<T> batchnorm_fwd(const Tensor<T>& x, BatchNormState<T>& state, bool training,
                        BatchNormCache<T>* cache) {
  const Shape s = x.shape();
  if (s.c != state.channels()) throw ShapeError("batchnorm: channel mismatch " + s.str());
  if (training && s.n == 1) {
    throw UnsupportedError("batchnorm: training mode with a batch of one sample is unsupported");
  }
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;
  Tensor<T> y(s);
  Tensor<T> x_hat(s);
  std::vector<T> inv_std(s.c);

  parallel_for(0, static_cast<idx>(s.c), [&](idx c) {
    T mean;
    T var;
    if (training) {
      // Two-pass: mean first, then centered second moment.
      double sum = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = x.plane(n, c);
        for (std::size_t p = 0; p < plane; ++p) sum += src[p];
      }
      mean = static_cast<T>(sum / static_cast<double>(count));
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = x.plane(n, c);
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = static_cast<double>(src[p]) - static_cast<double>(mean);
          sq += d * d;
        }
      }
      var = static_cast<T>(sq / static_cast<double>(count));
      const T unbiased = count > 1 ? static_cast<T>(sq / static_cast<double>(count - 1)) : var;
      state.running_mean[c] = state.momentum * state.running_mean[c] + (T(1) - state.momentum) * mean;
      state.running_var[c] = state.momentum * state.running_var[c] + (T(1) - state.momentum) * unbiased;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + state.epsilon);
    inv_std[c] = istd;
    const T gamma = state.gamma[c];
    const T beta = state.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = x.plane(n, c);
      T* xh = x_hat.plane(n, c);
      T* dst = y.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        xh[p] = (src[p] - mean) * istd;
        dst[p] = gamma * xh[p] + beta;
      }
    }
  });

  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->training = training;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_bwd(const Tensor<T>& grad_out, const BatchNormState<T>& state,
                                const BatchNormCache<T>& cache) {
  const Shape s = grad_out.shape();
  require_shape(s, cache.x_hat.shape(), "batchnorm_bwd grad_out");
  const std::size_t plane = s.plane();
  const T count = static_cast<T>(s.n * plane);
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(state.gamma.shape()), Tensor<T>(state.beta.shape())};

  parallel_for(0, static_cast<idx>(s.c), [&](idx c) {
    T sum_g = T(0);
    T sum_gx = T(0);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* go = grad_out.plane(n, c);
      const T* xh = cache.x_hat.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        sum_g += go[p];
        sum_gx += go[p] * xh[p];
      }
    }
    g.gamma[c] = sum_gx;
    g.beta[c] = sum_g;
    const T scale = state.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* go = grad_out.plane(n, c);
      const T* xh = cache.x_hat.plane(n, c);
      T* gx = g.x.plane(n, c);
      if (cache.training) {
        for (std::size_t p = 0; p < plane; ++p) {
          gx[p] = scale * (go[p] - sum_g / count - xh[p] * sum_gx / count);
        }
      } else {
        for (std::size_t p = 0; p < plane; ++p) gx[p] = scale * go[p];
      }
    }
  });
  return g;
}

template <typename T>
Tensor<T> relu_fwd(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_bwd(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_shape(grad_out.shape(), x.shape(), "relu_bwd");
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
MaxPoolResult<T> maxpool3x3s2_fwd(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t ho = strided_extent(s.h, 2);
  const std::size_t wo = strided_extent(s.w, 2);
  MaxPoolResult<T> r{Tensor<T>({s.n, s.c, ho, wo}), std::vector<std::uint32_t>(s.n * s.c * ho * wo)};
  parallel_for(0, static_cast<idx>(s.n * s.c), [&](idx nc) {
    const T* src = x.data() + nc * s.plane();
    T* dst = r.y.data() + nc * ho * wo;
    std::uint32_t* arg = r.argmax.data() + nc * ho * wo;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_i = 0;
        for (idx dy = -1; dy <= 1; ++dy) {
          const idx ih = static_cast<idx>(oh * 2) + dy;
          if (ih < 0 || ih >= static_cast<idx>(s.h)) continue;
          for (idx dx = -1; dx <= 1; ++dx) {
            const idx iw = static_cast<idx>(ow * 2) + dx;
            if (iw < 0 || iw >= static_cast<idx>(s.w)) continue;
            const std::size_t i = static_cast<std::size_t>(ih) * s.w + static_cast<std::size_t>(iw);
            if (src[i] > best) {
              best = src[i];
              best_i = static_cast<std::uint32_t>(i);
            }
          }
        }
        dst[oh * wo + ow] = best;
        arg[oh * wo + ow] = best_i;
      }
    }
  });
  return r;
}

template <typename T>
Tensor<T> maxpool3x3s2_bwd(const Tensor<T>& grad_out, const std::vector<std::uint32_t>& argmax,
                           const Shape& input_shape) {
  const std::size_t out_plane = grad_out.shape().plane();
  if (argmax.size() != grad_out.numel() || grad_out.n() != input_shape.n || grad_out.c() != input_shape.c) {
    throw ShapeError("maxpool3x3s2_bwd: grad_out does not match forward");
  }
  Tensor<T> g(input_shape);
  for (std::size_t nc = 0; nc < input_shape.n * input_shape.c; ++nc) {
    T* dst = g.data() + nc * input_shape.plane();
    for (std::size_t i = 0; i < out_plane; ++i) dst[argmax[nc * out_plane + i]] += grad_out[nc * out_plane + i];
  }
  return g;
}

template <typename T>
Tensor<T> global_avgpool_fwd(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> y({s.n, s.c, 1, 1});
  const T inv = T(1) / static_cast<T>(s.plane());
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.data() + nc * s.plane();
    T acc = T(0);
    for (std::size_t p = 0; p < s.plane(); ++p) acc += src[p];
    y[nc] = acc * inv;
  }
  return y;
}

template <typename T>
Tensor<T> global_avgpool_bwd(const Tensor<T>& grad_out, const Shape& input_shape) {
  require_shape(grad_out.shape(), Shape{input_shape.n, input_shape.c, 1, 1}, "global_avgpool_bwd");
  Tensor<T> g(input_shape);
  const T inv = T(1) / static_cast<T>(input_shape.plane());
  for (std::size_t nc = 0; nc < input_shape.n * input_shape.c; ++nc) {
    T* dst = g.data() + nc * input_shape.plane();
    std::fill(dst, dst + input_shape.plane(), grad_out[nc] * inv);
  }
  return g;
}

template <typename T>
Tensor<T> fc_fwd(const Tensor<T>& x, const ChannelTransform<T>& fc) {
  const std::size_t features = x.c() * x.h() * x.w();
  if (features != fc.in_channels()) {
    throw ShapeError("fc: input has " + std::to_string(features) + " features, layer expects " +
                     std::to_string(fc.in_channels()));
  }
  const std::size_t out = fc.out_channels();
  Tensor<T> y({x.n(), out, 1, 1});
  if (fc.has_bias())
    for (std::size_t n = 0; n < x.n(); ++n) std::copy(fc.bias.data(), fc.bias.data() + out, y.data() + n * out);
  detail::gemm(false, true, x.n(), out, features, T(1), x.data(), features, fc.weight.data(), features,
               fc.has_bias() ? T(1) : T(0), y.data(), out);
  return y;
}

template <typename T>
ChannelTransformGrads<T> fc_bwd(const Tensor<T>& x, const ChannelTransform<T>& fc, const Tensor<T>& grad_out) {
  const std::size_t features = x.c() * x.h() * x.w();
  const std::size_t out = fc.out_channels();
  require_shape(grad_out.shape(), Shape{x.n(), out, 1, 1}, "fc_bwd grad_out");
  ChannelTransformGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(fc.weight.shape()), Tensor<T>()};
  detail::gemm(true, false, out, features, x.n(), T(1), grad_out.data(), out, x.data(), features, T(0),
               g.weight.data(), features);
  detail::gemm(false, false, x.n(), features, out, T(1), grad_out.data(), out, fc.weight.data(), features, T(0),
               g.x.data(), features);
  if (fc.has_bias()) {
    g.bias = Tensor<T>(fc.bias.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
      for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_out[n * out + o];
  }
  return g;
}

template <typename T>
SoftmaxXentResult<T> softmax_xent_fwd(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.n();
  const std::size_t k = logits.c() * logits.h() * logits.w();
  if (labels.size() != n) throw ShapeError("softmax_xent: label count does not match batch");
  SoftmaxXentResult<T> r{T(0), Tensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) throw ShapeError("softmax_xent: label out of range");
    const T* z = logits.data() + i * k;
    T* p = r.probs.data() + i * k;
    const T zmax = *std::max_element(z, z + k);
    T sum = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - zmax);
      sum += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
    total += -(static_cast<double>(z[label] - zmax) - std::log(static_cast<double>(sum)));
  }
  r.loss = n > 0 ? static_cast<T>(total / static_cast<double>(n)) : T(0);
  return r;
}

template <typename T>
Tensor<T> softmax_xent_bwd(const Tensor<T>& probs, std::span<const int> labels) {
  const std::size_t n = probs.n();
  const std::size_t k = probs.c() * probs.h() * probs.w();
  if (labels.size() != n) throw ShapeError("softmax_xent_bwd: label count does not match batch");
  Tensor<T> g = probs;
  const T inv = n > 0 ? T(1) / static_cast<T>(n) : T(0);
  for (std::size_t i = 0; i < n; ++i) {
    g[i * k + static_cast<std::size_t>(labels[i])] -= T(1);
    for (std::size_t j = 0; j < k; ++j) g[i * k + j] *= inv;
  }
  return g;
}

namespace {

// Unfolds one sample into rows (c, kh, kw) and columns (oh, ow); taps that
// fall outside the image are zero.
template <typename T>
void im2col(const T* src, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t ho, std::size_t wo, T* cols) {
  const idx pad = static_cast<idx>(k / 2);
  std::fill(cols, cols + channels * k * k * ho * wo, T(0));
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t kh = 0; kh < k; ++kh) {
      const ClipRange rows = clip(ho, h, stride, static_cast<idx>(kh) - pad);
      for (std::size_t kw = 0; kw < k; ++kw) {
        const ClipRange span = clip(wo, w, stride, static_cast<idx>(kw) - pad);
        T* dst = cols + ((c * k + kh) * k + kw) * ho * wo;
        for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
          const T* srow = src + (c * h + oh * stride + kh - static_cast<std::size_t>(pad)) * w;
          for (std::size_t ow = span.lo; ow < span.hi; ++ow)
            dst[oh * wo + ow] = srow[ow * stride + kw - static_cast<std::size_t>(pad)];
        }
      }
    }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t ho, std::size_t wo, T* dst) {
  const idx pad = static_cast<idx>(k / 2);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t kh = 0; kh < k; ++kh) {
      const ClipRange rows = clip(ho, h, stride, static_cast<idx>(kh) - pad);
      for (std::size_t kw = 0; kw < k; ++kw) {
        const ClipRange span = clip(wo, w, stride, static_cast<idx>(kw) - pad);
        const T* src = cols + ((c * k + kh) * k + kw) * ho * wo;
        for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
          T* drow = dst + (c * h + oh * stride + kh - static_cast<std::size_t>(pad)) * w;
          for (std::size_t ow = span.lo; ow < span.hi; ++ow)
            drow[ow * stride + kw - static_cast<std::size_t>(pad)] += src[oh * wo + ow];
        }
      }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Conv2d<T>& conv) {
  if (x.c() != conv.in_channels()) throw ShapeError("conv2d: input channel mismatch");
  const std::size_t k = conv.kernel();
  const std::size_t s = conv.stride;
  const std::size_t ho = strided_extent(x.h(), s);
  const std::size_t wo = strided_extent(x.w(), s);
  const std::size_t rows = conv.in_channels() * k * k;
  const std::size_t cout = conv.out_channels();
  Tensor<T> y({x.n(), cout, ho, wo});
  std::vector<T> cols(rows * ho * wo);
  for (std::size_t n = 0; n < x.n(); ++n) {
    im2col(x.plane(n, 0), x.c(), x.h(), x.w(), k, s, ho, wo, cols.data());
    detail::gemm(false, false, cout, ho * wo, rows, T(1), conv.weight.data(), rows, cols.data(), ho * wo, T(0),
                 y.plane(n, 0), ho * wo);
  }
  return y;
}

template <typename T>
Conv2dGrads<T> conv2d_bwd(const Tensor<T>& x, const Conv2d<T>& conv, const Tensor<T>& grad_out) {
  const std::size_t k = conv.kernel();
  const std::size_t s = conv.stride;
  const std::size_t ho = strided_extent(x.h(), s);
  const std::size_t wo = strided_extent(x.w(), s);
  const std::size_t rows = conv.in_channels() * k * k;
  const std::size_t cout = conv.out_channels();
  require_shape(grad_out.shape(), Shape{x.n(), cout, ho, wo}, "conv2d_bwd grad_out");
  Conv2dGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(conv.weight.shape())};
  std::vector<T> cols(rows * ho * wo);
  std::vector<T> grad_cols(rows * ho * wo);
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* go = grad_out.plane(n, 0);
    im2col(x.plane(n, 0), x.c(), x.h(), x.w(), k, s, ho, wo, cols.data());
    detail::gemm(false, true, cout, rows, ho * wo, T(1), go, ho * wo, cols.data(), ho * wo, T(1), g.weight.data(),
                 rows);
    detail::gemm(true, false, rows, ho * wo, cout, T(1), conv.weight.data(), rows, go, ho * wo, T(0),
                 grad_cols.data(), ho * wo);
    col2im(grad_cols.data(), x.c(), x.h(), x.w(), k, s, ho, wo, g.x.plane(n, 0));
  }
  return g;
}

#define LRNET_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> subsample(const Tensor<T>&, std::size_t);                                                \
  template Tensor<T> subsample_adjoint(const Tensor<T>&, const Shape&, std::size_t);                          \
  template Tensor<T> channel_transform_fwd(const Tensor<T>&, const ChannelTransform<T>&, std::size_t);        \
  template ChannelTransformGrads<T> channel_transform_bwd(const Tensor<T>&, const ChannelTransform<T>&,       \
                                                          const Tensor<T>&, std::size_t);                     \
  template Tensor<T> batchnorm_fwd(const Tensor<T>&, BatchNormState<T>&, bool, BatchNormCache<T>*);           \
  template BatchNormGrads<T> batchnorm_bwd(const Tensor<T>&, const BatchNormState<T>&,                        \
                                           const BatchNormCache<T>&);                                         \
  template Tensor<T> relu_fwd(const Tensor<T>&);                                                              \
  template Tensor<T> relu_bwd(const Tensor<T>&, const Tensor<T>&);                                            \
  template MaxPoolResult<T> maxpool3x3s2_fwd(const Tensor<T>&);                                               \
  template Tensor<T> maxpool3x3s2_bwd(const Tensor<T>&, const std::vector<std::uint32_t>&, const Shape&);     \
  template Tensor<T> global_avgpool_fwd(const Tensor<T>&);                                                    \
  template Tensor<T> global_avgpool_bwd(const Tensor<T>&, const Shape&);                                      \
  template Tensor<T> fc_fwd(const Tensor<T>&, const ChannelTransform<T>&);                                    \
  template ChannelTransformGrads<T> fc_bwd(const Tensor<T>&, const ChannelTransform<T>&, const Tensor<T>&);   \
  template SoftmaxXentResult<T> softmax_xent_fwd(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> softmax_xent_bwd(const Tensor<T>&, std::span<const int>);                                \
  template Tensor<T> conv2d_fwd(const Tensor<T>&, const Conv2d<T>&);                                          \
  template Conv2dGrads<T> conv2d_bwd(const Tensor<T>&, const Conv2d<T>&, const Tensor<T>&);

LRNET_INSTANTIATE_OPS(float)
LRNET_INSTANTIATE_OPS(double)

#undef LRNET_INSTANTIATE_OPS

}  // namespace lrnet
