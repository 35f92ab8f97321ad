// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "lrnet/ops.hpp"
#include "oracles.hpp"

using namespace lrnet;

namespace {

Tensord cotangent_like(const Shape& s, std::mt19937_64& rng) { return oracle::random<double>(s, rng); }

}  // namespace

TEST_CASE("channel transform: identity weight leaves the input unchanged") {
  std::mt19937_64 rng(1);
  const Tensorf x = oracle::random<float>({2, 3, 4, 5}, rng);
  ChannelTransform<float> ct(3, 3, true);
  for (std::size_t i = 0; i < 3; ++i) ct.weight(i, i, 0, 0) = 1;
  CHECK(channel_transform_fwd(x, ct) == x);
}

TEST_CASE("channel transform: ones through an all-ones row sum to three") {
  const Tensorf x({1, 3, 2, 2}, 1.0f);
  ChannelTransform<float> ct(3, 1, true);
  ct.weight.fill(1.0f);
  const Tensorf y = channel_transform_fwd(x, ct);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (float v : y.storage()) CHECK(v == 3.0f);
}

TEST_CASE("channel transform: matches the triple-loop oracle") {
  std::mt19937_64 rng(2);
  const Tensorf x = oracle::random<float>({1, 4, 3, 3}, rng);
  ChannelTransform<float> ct(4, 2, true);
  fill_normal(ct.weight, rng, 0, 1);
  fill_normal(ct.bias, rng, 0, 1);
  const Tensorf expect = oracle::channel_transform(x, ct.weight, ct.bias);
  CHECK(max_abs_diff(channel_transform_fwd(x, ct), expect) < 1e-6);
}

TEST_CASE("channel transform: channel mismatch is a shape error") {
  ChannelTransform<float> ct(4, 2, false);
  CHECK_THROWS_AS(channel_transform_fwd(Tensorf({1, 3, 2, 2}), ct), ShapeError);
  const Tensorf x({1, 4, 2, 2});
  CHECK_THROWS_AS(channel_transform_bwd(x, ct, Tensorf({1, 2, 3, 2})), ShapeError);
}

TEST_CASE("channel transform backward: unit cotangent through identity gives ones") {
  std::mt19937_64 rng(3);
  const Tensord x = oracle::random<double>({1, 2, 3, 3}, rng);
  ChannelTransform<double> ct(2, 2, false);
  ct.weight(0, 0, 0, 0) = ct.weight(1, 1, 0, 0) = 1;
  const auto g = channel_transform_bwd(x, ct, Tensord(x.shape(), 1.0));
  for (double v : g.x.storage()) CHECK(v == 1.0);
}

TEST_CASE("channel transform backward: weight gradient counts spatial positions") {
  const Tensord x({1, 2, 2, 2}, 1.0);
  ChannelTransform<double> ct(2, 1, false);
  const auto g = channel_transform_bwd(x, ct, Tensord({1, 1, 2, 2}, 1.0));
  CHECK(g.weight.numel() == 2);
  for (double v : g.weight.storage()) CHECK(v == 4.0);
}

TEST_CASE("channel transform backward: finite differences, with and without stride") {
  for (std::size_t stride : {1u, 2u}) {
    std::mt19937_64 rng(4 + stride);
    Tensord x = oracle::random<double>({2, 3, 5, 4}, rng);
    ChannelTransform<double> ct(3, 4, true);
    fill_normal(ct.weight, rng, 0, 1);
    fill_normal(ct.bias, rng, 0, 1);
    const Tensord y = channel_transform_fwd(x, ct, stride);
    const Tensord r = cotangent_like(y.shape(), rng);
    const auto g = channel_transform_bwd(x, ct, r, stride);
    auto f = [&] { return channel_transform_fwd(x, ct, stride); };
    CHECK(oracle::fd_check("x", f, x, r, g.x).pass());
    CHECK(oracle::fd_check("weight", f, ct.weight, r, g.weight).pass());
    CHECK(oracle::fd_check("bias", f, ct.bias, r, g.bias).pass());
  }
}

TEST_CASE("channel transform is linear without bias") {
  std::mt19937_64 rng(6);
  const Tensord a = oracle::random<double>({2, 3, 4, 4}, rng);
  const Tensord b = oracle::random<double>({2, 3, 4, 4}, rng);
  ChannelTransform<double> ct(3, 5, false);
  fill_normal(ct.weight, rng, 0, 1);
  const double alpha = 1.7;
  const double beta = -0.4;
  Tensord mix(a.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = alpha * a[i] + beta * b[i];
  const Tensord ya = channel_transform_fwd(a, ct);
  const Tensord yb = channel_transform_fwd(b, ct);
  const Tensord ym = channel_transform_fwd(mix, ct);
  double worst = 0;
  for (std::size_t i = 0; i < ym.numel(); ++i) worst = std::max(worst, std::abs(ym[i] - alpha * ya[i] - beta * yb[i]));
  CHECK(worst < 1e-6);
}

TEST_CASE("relu forward and backward") {
  const Tensorf x({1, 3, 1, 1}, std::vector<float>{-1, 0, 2});
  const Tensorf y = relu_fwd(x);
  CHECK(y.storage() == std::vector<float>{0, 0, 2});
  const Tensorf g = relu_bwd(x, Tensorf(x.shape(), 5.0f));
  CHECK(g.storage() == std::vector<float>{0, 0, 5});
}

TEST_CASE("global average pool: mean of a 2x2 plane") {
  const Tensorf x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensorf y = global_avgpool_fwd(x);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(2.5));
}

TEST_CASE("global average pool backward: finite differences") {
  std::mt19937_64 rng(7);
  Tensord x = oracle::random<double>({2, 3, 3, 4}, rng);
  const Tensord r = cotangent_like({2, 3, 1, 1}, rng);
  const Tensord g = global_avgpool_bwd(r, x.shape());
  CHECK(oracle::fd_check("x", [&] { return global_avgpool_fwd(x); }, x, r, g).pass());
}

TEST_CASE("softmax cross-entropy: uniform logits give ln 2") {
  const Tensorf logits({1, 2, 1, 1}, 0.0f);
  const std::vector<int> labels{0};
  const auto r = softmax_xent_fwd(logits, std::span<const int>(labels));
  CHECK(r.loss == doctest::Approx(std::log(2.0)));
}

TEST_CASE("softmax cross-entropy backward: finite differences") {
  std::mt19937_64 rng(8);
  Tensord logits = oracle::random<double>({3, 5, 1, 1}, rng);
  const std::vector<int> labels{4, 0, 2};
  const auto fwd = softmax_xent_fwd(logits, std::span<const int>(labels));
  const Tensord g = softmax_xent_bwd(fwd.probs, std::span<const int>(labels));
  auto loss = [&] { return softmax_xent_fwd(logits, std::span<const int>(labels)).loss; };
  const auto numeric = numeric_gradient(loss, logits.span());
  CHECK(compare_gradients("logits", g.span(), numeric).pass());
}

TEST_CASE("fully connected backward: finite differences") {
  std::mt19937_64 rng(9);
  Tensord x = oracle::random<double>({2, 3, 2, 2}, rng);
  ChannelTransform<double> fc(12, 4, true);
  fill_normal(fc.weight, rng, 0, 1);
  fill_normal(fc.bias, rng, 0, 1);
  const Tensord y = fc_fwd(x, fc);
  CHECK(y.shape() == Shape{2, 4, 1, 1});
  const Tensord r = cotangent_like(y.shape(), rng);
  const auto g = fc_bwd(x, fc, r);
  auto f = [&] { return fc_fwd(x, fc); };
  CHECK(oracle::fd_check("x", f, x, r, g.x).pass());
  CHECK(oracle::fd_check("weight", f, fc.weight, r, g.weight).pass());
  CHECK(oracle::fd_check("bias", f, fc.bias, r, g.bias).pass());
}

TEST_CASE("batch norm backward in training mode: finite differences") {
  std::mt19937_64 rng(10);
  Tensord x = oracle::random<double>({3, 4, 3, 3}, rng);
  BatchNormState<double> st(4);
  fill_normal(st.gamma, rng, 1, 0.3);
  fill_normal(st.beta, rng, 0, 0.3);
  auto f = [&] {
    BatchNormState<double> copy = st;
    return batchnorm_fwd(x, copy, true);
  };
  BatchNormState<double> run = st;
  BatchNormCache<double> cache;
  const Tensord y = batchnorm_fwd(x, run, true, &cache);
  const Tensord r = cotangent_like(y.shape(), rng);
  const auto g = batchnorm_bwd(r, st, cache);
  CHECK(oracle::fd_check("x", f, x, r, g.x).pass());
  CHECK(oracle::fd_check("gamma", f, st.gamma, r, g.gamma).pass());
  CHECK(oracle::fd_check("beta", f, st.beta, r, g.beta).pass());
}

TEST_CASE("batch norm: training statistics and running estimates") {
  const Tensord x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
  BatchNormState<double> st(1);
  const Tensord y = batchnorm_fwd(x, st, true);
  const double mean = 3.0;
  const double var = (4 + 1 + 0 + 9) / 4.0;
  CHECK(y[0] == doctest::Approx((1 - mean) / std::sqrt(var + 1e-5)));
  CHECK(st.running_mean[0] == doctest::Approx(0.1 * mean));
  // Running variance uses the unbiased estimate.
  CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * var * 4.0 / 3.0));
  const Tensord e = batchnorm_fwd(x, st, false);
  CHECK(e[3] == doctest::Approx((6 - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5)));
}

TEST_CASE("batch norm: a single sample in training mode is unsupported") {
  BatchNormState<float> st(2);
  CHECK_THROWS_AS(batchnorm_fwd(Tensorf({1, 2, 1, 1}), st, true), UnsupportedError);
  CHECK_NOTHROW(batchnorm_fwd(Tensorf({1, 2, 1, 1}), st, false));
}

TEST_CASE("max pool: output extent, routing, and finite differences") {
  std::mt19937_64 rng(11);
  Tensord x = oracle::random<double>({2, 2, 7, 6}, rng);
  const auto fwd = maxpool3x3s2_fwd(x);
  CHECK(fwd.y.shape() == Shape{2, 2, 4, 3});
  const Tensord r = cotangent_like(fwd.y.shape(), rng);
  const Tensord g = maxpool3x3s2_bwd(r, fwd.argmax, x.shape());
  const double in_sum = std::accumulate(g.storage().begin(), g.storage().end(), 0.0);
  const double out_sum = std::accumulate(r.storage().begin(), r.storage().end(), 0.0);
  CHECK(in_sum == doctest::Approx(out_sum).epsilon(1e-12));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 42; ++i) {
        const bool chosen = std::any_of(fwd.argmax.begin() + static_cast<long>((n * 2 + c) * 12),
                                        fwd.argmax.begin() + static_cast<long>((n * 2 + c + 1) * 12),
                                        [&](std::uint32_t a) { return a == i; });
        if (!chosen) CHECK(g.plane(n, c)[i] == 0.0);
      }
  CHECK(oracle::fd_check("x", [&] { return maxpool3x3s2_fwd(x).y; }, x, r, g).pass());
}

TEST_CASE("conv2d backward: finite differences") {
  std::mt19937_64 rng(12);
  Tensord x = oracle::random<double>({2, 3, 5, 5}, rng);
  Conv2d<double> conv(3, 2, 3, 2);
  fill_normal(conv.weight, rng, 0, 1);
  const Tensord y = conv2d_fwd(x, conv);
  CHECK(y.shape() == Shape{2, 2, 3, 3});
  const Tensord r = cotangent_like(y.shape(), rng);
  const auto g = conv2d_bwd(x, conv, r);
  auto f = [&] { return conv2d_fwd(x, conv); };
  CHECK(oracle::fd_check("x", f, x, r, g.x).pass());
  CHECK(oracle::fd_check("weight", f, conv.weight, r, g.weight).pass());
}

TEST_CASE("tensor: data length must match the shape") {
  CHECK_THROWS_AS(Tensorf({1, 2, 2, 2}, std::vector<float>(7)), ShapeError);
  CHECK(Tensorf({0, 3, 4, 4}).empty());
}
