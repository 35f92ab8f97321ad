// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/local_relation.hpp"
#include "lrnet/ops.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

enum class LayerKind {
  channel_transform,
  conv,
  local_relation,
  batch_norm,
  relu,
  max_pool,
  global_avg_pool,
  fully_connected,
  residual,
};

std::string_view to_string(LayerKind kind);

/// Structural description of one layer. Shapes are per sample (n = 1).
struct LayerDesc {
  std::string name;
  LayerKind kind = LayerKind::relu;
  Shape input{};
  Shape output{};
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  bool bias = false;
  /// Whether this layer counts toward the network's nominal depth.
  bool counted = false;
  LocalRelationConfig lr{};         // local_relation only
  std::vector<LayerDesc> branch;    // residual only
  std::vector<LayerDesc> shortcut;  // residual only; empty means identity
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
  bool weight_decay = true;
};

template <typename T>
struct StateRef {
  std::string name;
  Tensor<T>* value = nullptr;
};

template <typename T>
class Layer {
 public:
  explicit Layer(LayerDesc desc) : desc_(std::move(desc)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const LayerDesc& desc() const { return desc_; }
  const std::string& name() const { return desc_.name; }

  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  /// Requires a preceding forward in training mode.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;

  virtual void init(std::mt19937_64& /*rng*/) {}
  virtual void parameters(std::vector<ParamRef<T>>& /*out*/) {}
  /// Parameters first, then buffers.
  virtual void state(std::vector<StateRef<T>>& out);
  virtual void children(std::vector<Layer<T>*>& /*out*/) {}

 protected:
  std::string qualified(std::string_view leaf) const { return desc_.name + "." + std::string(leaf); }

  LayerDesc desc_;
};

template <typename T>
class ChannelTransformLayer final : public Layer<T> {
 public:
  explicit ChannelTransformLayer(LayerDesc desc);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void init(std::mt19937_64& rng) override;
  void parameters(std::vector<ParamRef<T>>& out) override;

  ChannelTransform<T> ct;
  ChannelTransform<T> grad;

 private:
  Tensor<T> x_;
};

template <typename T>
class ConvLayer final : public Layer<T> {
 public:
  explicit ConvLayer(LayerDesc desc);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void init(std::mt19937_64& rng) override;
  void parameters(std::vector<ParamRef<T>>& out) override;

  Conv2d<T> conv;
  Tensor<T> grad_weight;

 private:
  Tensor<T> x_;
};

template <typename T>
class LocalRelationLayer final : public Layer<T> {
 public:
  explicit LocalRelationLayer(LayerDesc desc);
  /// Training uses the reference kernel (it keeps the cache for backward);
  /// eval uses the optimized kernel.
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void init(std::mt19937_64& rng) override;
  void parameters(std::vector<ParamRef<T>>& out) override;

  const LocalRelationConfig& config() const { return this->desc_.lr; }

  LocalRelationParams<T> params;
  LocalRelationParams<T> grad;

 private:
  ForwardCache<T> cache_;
  bool has_cache_ = false;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  explicit BatchNormLayer(LayerDesc desc);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<ParamRef<T>>& out) override;
  void state(std::vector<StateRef<T>>& out) override;

  BatchNormState<T> bn;
  Tensor<T> grad_gamma;
  Tensor<T> grad_beta;

 private:
  BatchNormCache<T> cache_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> y_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  std::vector<std::uint32_t> argmax_;
  Shape in_shape_{};
};

template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Shape in_shape_{};
};

template <typename T>
class FullyConnectedLayer final : public Layer<T> {
 public:
  explicit FullyConnectedLayer(LayerDesc desc);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void init(std::mt19937_64& rng) override;
  void parameters(std::vector<ParamRef<T>>& out) override;

  ChannelTransform<T> fc;
  ChannelTransform<T> grad;

 private:
  Tensor<T> x_;
};

/// relu(branch(x) + shortcut(x)); the shortcut is the identity when empty.
template <typename T>
class ResidualLayer final : public Layer<T> {
 public:
  explicit ResidualLayer(LayerDesc desc);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void init(std::mt19937_64& rng) override;
  void parameters(std::vector<ParamRef<T>>& out) override;
  void state(std::vector<StateRef<T>>& out) override;
  void children(std::vector<Layer<T>*>& out) override;

  std::vector<std::unique_ptr<Layer<T>>> branch;
  std::vector<std::unique_ptr<Layer<T>>> shortcut;

 private:
  Tensor<T> y_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerDesc& desc);

}  // namespace lrnet
