// SPDX-License-Identifier: Apache-2.0
#include "lrnet/layers.hpp"

#include <cmath>

namespace lrnet {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::channel_transform: return "ct";
    case LayerKind::conv: return "conv";
    case LayerKind::local_relation: return "lr";
    case LayerKind::batch_norm: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "maxpool";
    case LayerKind::global_avg_pool: return "avgpool";
    case LayerKind::fully_connected: return "fc";
    case LayerKind::residual: return "residual";
  }
  return "?";
}

namespace {

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& g) {
  if (g.empty()) return;
  if (into.empty()) {
    into = g;
    return;
  }
  require_shape(g.shape(), into.shape(), "gradient accumulation");
  for (std::size_t i = 0; i < g.numel(); ++i) into[i] += g[i];
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return t.empty() ? Tensor<T>() : Tensor<T>(t.shape());
}

template <typename T>
ChannelTransform<T> zero_grads(const ChannelTransform<T>& ct) {
  ChannelTransform<T> g;
  g.weight = zeros_like(ct.weight);
  g.bias = zeros_like(ct.bias);
  return g;
}

template <typename T>
void push(std::vector<ParamRef<T>>& out, std::string name, Tensor<T>& value, Tensor<T>& grad, bool decay) {
  if (value.empty()) return;
  out.push_back({std::move(name), &value, &grad, decay});
}

template <typename T>
void he_normal(Tensor<T>& w, std::mt19937_64& rng, std::size_t fan_in) {
  fill_normal(w, rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
void chain_check(const Tensor<T>& x, const LayerDesc& d) {
  if (x.c() != d.input.c || x.h() != d.input.h || x.w() != d.input.w) {
    throw ShapeError(d.name + ": input " + x.shape().str() + " does not match planned " + d.input.str());
  }
}

}  // namespace

template <typename T>
void Layer<T>::state(std::vector<StateRef<T>>& out) {
  std::vector<ParamRef<T>> params;
  parameters(params);
  for (auto& p : params) out.push_back({p.name, p.value});
}

// --- channel transform ----------------------------------------------------

template <typename T>
ChannelTransformLayer<T>::ChannelTransformLayer(LayerDesc desc)
    : Layer<T>(std::move(desc)),
      ct(this->desc_.in_channels, this->desc_.out_channels, this->desc_.bias),
      grad(zero_grads(ct)) {}

template <typename T>
Tensor<T> ChannelTransformLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  if (training) x_ = x;
  return channel_transform_fwd(x, ct, static_cast<std::size_t>(this->desc_.stride));
}

template <typename T>
Tensor<T> ChannelTransformLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = channel_transform_bwd(x_, ct, grad_out, static_cast<std::size_t>(this->desc_.stride));
  accumulate(grad.weight, g.weight);
  accumulate(grad.bias, g.bias);
  return std::move(g.x);
}

template <typename T>
void ChannelTransformLayer<T>::init(std::mt19937_64& rng) {
  he_normal(ct.weight, rng, ct.in_channels());
  ct.bias.fill(T(0));
}

template <typename T>
void ChannelTransformLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  push(out, this->qualified("weight"), ct.weight, grad.weight, true);
  push(out, this->qualified("bias"), ct.bias, grad.bias, false);
}

// --- conv -----------------------------------------------------------------

template <typename T>
ConvLayer<T>::ConvLayer(LayerDesc desc)
    : Layer<T>(std::move(desc)),
      conv(this->desc_.in_channels, this->desc_.out_channels, this->desc_.kernel, this->desc_.stride),
      grad_weight(conv.weight.shape()) {}

template <typename T>
Tensor<T> ConvLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  if (training) x_ = x;
  return conv2d_fwd(x, conv);
}

template <typename T>
Tensor<T> ConvLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = conv2d_bwd(x_, conv, grad_out);
  accumulate(grad_weight, g.weight);
  return std::move(g.x);
}

template <typename T>
void ConvLayer<T>::init(std::mt19937_64& rng) {
  he_normal(conv.weight, rng, conv.in_channels() * conv.kernel() * conv.kernel());
}

template <typename T>
void ConvLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  push(out, this->qualified("weight"), conv.weight, grad_weight, true);
}

// --- local relation -------------------------------------------------------

template <typename T>
LocalRelationLayer<T>::LocalRelationLayer(LayerDesc desc) : Layer<T>(std::move(desc)) {
  std::mt19937_64 rng(0);
  params = init_local_relation<T>(this->desc_.lr, rng);
  grad.query = zero_grads(params.query);
  grad.key = zero_grads(params.key);
  grad.geo_hidden = zero_grads(params.geo_hidden);
  grad.geo_out = zero_grads(params.geo_out);
  grad.geo_table = zeros_like(params.geo_table);
  grad.output = zero_grads(params.output);
}

template <typename T>
Tensor<T> LocalRelationLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  if (!training) {
    has_cache_ = false;
    return lr_forward_optimized(x, params, this->desc_.lr);
  }
  auto res = lr_forward(x, params, this->desc_.lr);
  cache_ = std::move(res.cache);
  has_cache_ = true;
  return std::move(res.y);
}

template <typename T>
Tensor<T> LocalRelationLayer<T>::backward(const Tensor<T>& grad_out) {
  if (!has_cache_) throw UnsupportedError(this->name() + ": backward without a training-mode forward");
  auto g = lr_backward(grad_out, cache_, params, this->desc_.lr);
  accumulate(grad.query.weight, g.query);
  accumulate(grad.key.weight, g.key);
  accumulate(grad.geo_hidden.weight, g.geo_hidden_weight);
  accumulate(grad.geo_hidden.bias, g.geo_hidden_bias);
  accumulate(grad.geo_out.weight, g.geo_out_weight);
  accumulate(grad.geo_out.bias, g.geo_out_bias);
  accumulate(grad.geo_table, g.geo_table);
  accumulate(grad.output.weight, g.output);
  return std::move(g.x);
}

template <typename T>
void LocalRelationLayer<T>::init(std::mt19937_64& rng) {
  params = init_local_relation<T>(this->desc_.lr, rng);
}

template <typename T>
void LocalRelationLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  push(out, this->qualified("query.weight"), params.query.weight, grad.query.weight, true);
  push(out, this->qualified("key.weight"), params.key.weight, grad.key.weight, true);
  push(out, this->qualified("geo.hidden.weight"), params.geo_hidden.weight, grad.geo_hidden.weight, false);
  push(out, this->qualified("geo.hidden.bias"), params.geo_hidden.bias, grad.geo_hidden.bias, false);
  push(out, this->qualified("geo.out.weight"), params.geo_out.weight, grad.geo_out.weight, false);
  push(out, this->qualified("geo.out.bias"), params.geo_out.bias, grad.geo_out.bias, false);
  push(out, this->qualified("geo.table"), params.geo_table, grad.geo_table, false);
  push(out, this->qualified("output.weight"), params.output.weight, grad.output.weight, true);
}

// --- batch norm -----------------------------------------------------------

template <typename T>
BatchNormLayer<T>::BatchNormLayer(LayerDesc desc)
    : Layer<T>(std::move(desc)),
      bn(static_cast<std::size_t>(this->desc_.out_channels)),
      grad_gamma(bn.gamma.shape()),
      grad_beta(bn.beta.shape()) {}

template <typename T>
Tensor<T> BatchNormLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  return batchnorm_fwd(x, bn, training, &cache_);
}

template <typename T>
Tensor<T> BatchNormLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = batchnorm_bwd(grad_out, bn, cache_);
  accumulate(grad_gamma, g.gamma);
  accumulate(grad_beta, g.beta);
  return std::move(g.x);
}

template <typename T>
void BatchNormLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  push(out, this->qualified("gamma"), bn.gamma, grad_gamma, false);
  push(out, this->qualified("beta"), bn.beta, grad_beta, false);
}

template <typename T>
void BatchNormLayer<T>::state(std::vector<StateRef<T>>& out) {
  Layer<T>::state(out);
  out.push_back({this->qualified("running_mean"), &bn.running_mean});
  out.push_back({this->qualified("running_var"), &bn.running_var});
}

// --- parameter-free layers ------------------------------------------------

template <typename T>
Tensor<T> ReluLayer<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> y = relu_fwd(x);
  if (training) y_ = y;
  return y;
}

template <typename T>
Tensor<T> ReluLayer<T>::backward(const Tensor<T>& grad_out) {
  return relu_bwd(y_, grad_out);
}

template <typename T>
Tensor<T> MaxPoolLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  auto res = maxpool3x3s2_fwd(x);
  if (training) {
    argmax_ = std::move(res.argmax);
    in_shape_ = x.shape();
  }
  return std::move(res.y);
}

template <typename T>
Tensor<T> MaxPoolLayer<T>::backward(const Tensor<T>& grad_out) {
  return maxpool3x3s2_bwd(grad_out, argmax_, in_shape_);
}

template <typename T>
Tensor<T> GlobalAvgPoolLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  if (training) in_shape_ = x.shape();
  return global_avgpool_fwd(x);
}

template <typename T>
Tensor<T> GlobalAvgPoolLayer<T>::backward(const Tensor<T>& grad_out) {
  return global_avgpool_bwd(grad_out, in_shape_);
}

// --- fully connected ------------------------------------------------------

template <typename T>
FullyConnectedLayer<T>::FullyConnectedLayer(LayerDesc desc)
    : Layer<T>(std::move(desc)),
      fc(this->desc_.in_channels, this->desc_.out_channels, true),
      grad(zero_grads(fc)) {}

template <typename T>
Tensor<T> FullyConnectedLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  if (training) x_ = x;
  return fc_fwd(x, fc);
}

template <typename T>
Tensor<T> FullyConnectedLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = fc_bwd(x_, fc, grad_out);
  accumulate(grad.weight, g.weight);
  accumulate(grad.bias, g.bias);
  return std::move(g.x);
}

template <typename T>
void FullyConnectedLayer<T>::init(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fc.in_channels()));
  fill_uniform(fc.weight, rng, -bound, bound);
  fc.bias.fill(T(0));
}

template <typename T>
void FullyConnectedLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  push(out, this->qualified("weight"), fc.weight, grad.weight, true);
  push(out, this->qualified("bias"), fc.bias, grad.bias, false);
}

// --- residual -------------------------------------------------------------

template <typename T>
ResidualLayer<T>::ResidualLayer(LayerDesc desc) : Layer<T>(std::move(desc)) {
  for (const auto& d : this->desc_.branch) branch.push_back(make_layer<T>(d));
  for (const auto& d : this->desc_.shortcut) shortcut.push_back(make_layer<T>(d));
}

template <typename T>
Tensor<T> ResidualLayer<T>::forward(const Tensor<T>& x, bool training) {
  chain_check(x, this->desc_);
  Tensor<T> b = x;
  for (auto& l : branch) b = l->forward(b, training);
  Tensor<T> s = x;
  for (auto& l : shortcut) s = l->forward(s, training);
  require_shape(s.shape(), b.shape(), this->name() + " residual add");
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] += s[i];
  Tensor<T> y = relu_fwd(b);
  if (training) y_ = y;
  return y;
}

template <typename T>
Tensor<T> ResidualLayer<T>::backward(const Tensor<T>& grad_out) {
  const Tensor<T> g = relu_bwd(y_, grad_out);
  Tensor<T> gb = g;
  for (auto it = branch.rbegin(); it != branch.rend(); ++it) gb = (*it)->backward(gb);
  Tensor<T> gs = g;
  for (auto it = shortcut.rbegin(); it != shortcut.rend(); ++it) gs = (*it)->backward(gs);
  for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += gs[i];
  return gb;
}

template <typename T>
void ResidualLayer<T>::init(std::mt19937_64& rng) {
  for (auto& l : branch) l->init(rng);
  for (auto& l : shortcut) l->init(rng);
}

template <typename T>
void ResidualLayer<T>::parameters(std::vector<ParamRef<T>>& out) {
  for (auto& l : branch) l->parameters(out);
  for (auto& l : shortcut) l->parameters(out);
}

template <typename T>
void ResidualLayer<T>::state(std::vector<StateRef<T>>& out) {
  for (auto& l : branch) l->state(out);
  for (auto& l : shortcut) l->state(out);
}

template <typename T>
void ResidualLayer<T>::children(std::vector<Layer<T>*>& out) {
  for (auto& l : branch) {
    out.push_back(l.get());
    l->children(out);
  }
  for (auto& l : shortcut) {
    out.push_back(l.get());
    l->children(out);
  }
}

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerDesc& desc) {
  switch (desc.kind) {
    case LayerKind::channel_transform: return std::make_unique<ChannelTransformLayer<T>>(desc);
    case LayerKind::conv: return std::make_unique<ConvLayer<T>>(desc);
    case LayerKind::local_relation: return std::make_unique<LocalRelationLayer<T>>(desc);
    case LayerKind::batch_norm: return std::make_unique<BatchNormLayer<T>>(desc);
    case LayerKind::relu: return std::make_unique<ReluLayer<T>>(desc);
    case LayerKind::max_pool: return std::make_unique<MaxPoolLayer<T>>(desc);
    case LayerKind::global_avg_pool: return std::make_unique<GlobalAvgPoolLayer<T>>(desc);
    case LayerKind::fully_connected: return std::make_unique<FullyConnectedLayer<T>>(desc);
    case LayerKind::residual: return std::make_unique<ResidualLayer<T>>(desc);
  }
  throw ConfigError("unknown layer kind");
}

#define LRNET_INSTANTIATE_LAYERS(T)                                   \
  template class Layer<T>;                                            \
  template class ChannelTransformLayer<T>;                            \
  template class ConvLayer<T>;                                        \
  template class LocalRelationLayer<T>;                               \
  template class BatchNormLayer<T>;                                   \
  template class ReluLayer<T>;                                        \
  template class MaxPoolLayer<T>;                                     \
  template class GlobalAvgPoolLayer<T>;                               \
  template class FullyConnectedLayer<T>;                              \
  template class ResidualLayer<T>;                                    \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerDesc&);

LRNET_INSTANTIATE_LAYERS(float)
LRNET_INSTANTIATE_LAYERS(double)

#undef LRNET_INSTANTIATE_LAYERS

}  // namespace lrnet
