// SPDX-License-Identifier: Apache-2.0
#include "lrnet/model.hpp"

#include <cmath>
#include <limits>

#include "lrnet/cost.hpp"

namespace lrnet {

namespace {

Shape spatial(const Shape& in, int channels, int stride) {
  return {1, static_cast<std::size_t>(channels), strided_extent(in.h, static_cast<std::size_t>(stride)),
          strided_extent(in.w, static_cast<std::size_t>(stride))};
}

LayerDesc ct_desc(std::string name, const Shape& in, int out, int stride, bool counted) {
  LayerDesc d;
  d.name = std::move(name);
  d.kind = LayerKind::channel_transform;
  d.input = in;
  d.output = spatial(in, out, stride);
  d.in_channels = static_cast<int>(in.c);
  d.out_channels = out;
  d.stride = stride;
  d.counted = counted;
  return d;
}

LayerDesc conv_desc(std::string name, const Shape& in, int out, int kernel, int stride) {
  LayerDesc d;
  d.name = std::move(name);
  d.kind = LayerKind::conv;
  d.input = in;
  d.output = spatial(in, out, stride);
  d.in_channels = static_cast<int>(in.c);
  d.out_channels = out;
  d.kernel = kernel;
  d.stride = stride;
  d.counted = true;
  return d;
}

LayerDesc lr_desc(std::string name, const Shape& in, LocalRelationConfig cfg, int stride) {
  cfg.channels = static_cast<int>(in.c);
  cfg.stride = stride;
  cfg.validate();
  LayerDesc d;
  d.name = std::move(name);
  d.kind = LayerKind::local_relation;
  d.input = in;
  d.output = lr_output_shape(in, cfg);
  d.in_channels = d.out_channels = cfg.channels;
  d.kernel = cfg.kernel;
  d.stride = stride;
  d.counted = true;
  d.lr = cfg;
  return d;
}

LayerDesc simple_desc(std::string name, LayerKind kind, const Shape& in, const Shape& out) {
  LayerDesc d;
  d.name = std::move(name);
  d.kind = kind;
  d.input = in;
  d.output = out;
  d.in_channels = static_cast<int>(in.c);
  d.out_channels = static_cast<int>(out.c);
  return d;
}

LayerDesc bn_desc(std::string name, const Shape& in) { return simple_desc(std::move(name), LayerKind::batch_norm, in, in); }
LayerDesc relu_desc(std::string name, const Shape& in) { return simple_desc(std::move(name), LayerKind::relu, in, in); }

// Appends a layer and advances the running shape.
void add(std::vector<LayerDesc>& list, Shape& cur, LayerDesc d) {
  cur = d.output;
  list.push_back(std::move(d));
}

LayerDesc residual(const BlockSpec& spec, const Shape& input, const std::string& name, std::vector<LayerDesc> branch,
                   const Shape& out) {
  LayerDesc block = simple_desc(name, LayerKind::residual, input, out);
  block.stride = spec.stride;
  if (spec.stride != 1 || spec.in_channels != spec.out_channels) {
    Shape s = input;
    add(block.shortcut, s, ct_desc(name + ".shortcut.ct", input, spec.out_channels, spec.stride, false));
    add(block.shortcut, s, bn_desc(name + ".shortcut.bn", s));
  }
  block.branch = std::move(branch);
  return block;
}

void check_block_input(const BlockSpec& spec, const Shape& input) {
  spec.validate();
  if (input.c != static_cast<std::size_t>(spec.in_channels)) {
    throw ShapeError("block expects " + std::to_string(spec.in_channels) + " input channels, got " + input.str());
  }
}

int depth_of(const LayerDesc& d) {
  if (d.kind != LayerKind::residual) return d.counted ? 1 : 0;
  int n = 0;
  for (const auto& b : d.branch) n += depth_of(b);
  return n;
}

int convs_in(const LayerDesc& d) {
  int n = d.kind == LayerKind::conv ? 1 : 0;
  for (const auto& b : d.branch) n += convs_in(b);
  for (const auto& b : d.shortcut) n += convs_in(b);
  return n;
}

int baseline_inner(BlockKind kind, int out) { return is_bottleneck(kind) ? out / 4 : out; }

}  // namespace

std::vector<LayerDesc> build_lr_stem(const LocalRelationConfig& lr_template, int channels, int kernel,
                                     int channels_per_group, const Shape& input, bool small_image) {
  if (input.c != 3) throw ShapeError("stem expects 3 input channels, got " + input.str());
  LocalRelationConfig cfg = lr_template;
  cfg.kernel = kernel;
  cfg.channels_per_group = channels_per_group;
  std::vector<LayerDesc> list;
  Shape cur = input;
  cur.n = 1;
  // The input transform and the window layer replace one 7x7 convolution;
  // only the latter is counted toward depth.
  add(list, cur, ct_desc("stem.ct", cur, channels, 1, false));
  add(list, cur, bn_desc("stem.bn1", cur));
  add(list, cur, relu_desc("stem.relu1", cur));
  add(list, cur, lr_desc("stem.lr", cur, cfg, small_image ? 1 : 2));
  add(list, cur, bn_desc("stem.bn2", cur));
  add(list, cur, relu_desc("stem.relu2", cur));
  return list;
}

LayerDesc build_bottleneck_block(const BlockSpec& spec, const Shape& input, const std::string& name) {
  check_block_input(spec, input);
  if (!is_bottleneck(spec.kind)) throw ConfigError("build_bottleneck_block needs a bottleneck kind");
  std::vector<LayerDesc> b;
  Shape cur = input;
  add(b, cur, ct_desc(name + ".ct1", cur, spec.inner_channels, 1, true));
  add(b, cur, bn_desc(name + ".bn1", cur));
  add(b, cur, relu_desc(name + ".relu1", cur));
  if (spec.kind == BlockKind::bottleneck_lr) add(b, cur, lr_desc(name + ".lr", cur, *spec.lr_config, spec.stride));
  else add(b, cur, conv_desc(name + ".conv", cur, spec.inner_channels, 3, spec.stride));
  add(b, cur, bn_desc(name + ".bn2", cur));
  add(b, cur, relu_desc(name + ".relu2", cur));
  add(b, cur, ct_desc(name + ".ct2", cur, spec.out_channels, 1, true));
  add(b, cur, bn_desc(name + ".bn3", cur));
  return residual(spec, input, name, std::move(b), cur);
}

LayerDesc build_basic_block(const BlockSpec& spec, const Shape& input, const std::string& name) {
  check_block_input(spec, input);
  if (is_bottleneck(spec.kind)) throw ConfigError("build_basic_block needs a basic kind");
  std::vector<LayerDesc> b;
  Shape cur = input;
  if (spec.kind == BlockKind::basic_conv) {
    add(b, cur, conv_desc(name + ".conv1", cur, spec.inner_channels, 3, spec.stride));
    add(b, cur, bn_desc(name + ".bn1", cur));
    add(b, cur, relu_desc(name + ".relu1", cur));
    add(b, cur, conv_desc(name + ".conv2", cur, spec.out_channels, 3, 1));
    add(b, cur, bn_desc(name + ".bn2", cur));
  } else {
    // Each 3x3 convolution becomes a channel transform followed by a local
    // relation layer, as in the stem; each pair counts once.
    add(b, cur, ct_desc(name + ".ct1", cur, spec.inner_channels, 1, false));
    add(b, cur, bn_desc(name + ".bn1", cur));
    add(b, cur, relu_desc(name + ".relu1", cur));
    add(b, cur, lr_desc(name + ".lr1", cur, *spec.lr_config, spec.stride));
    add(b, cur, bn_desc(name + ".bn2", cur));
    add(b, cur, relu_desc(name + ".relu2", cur));
    add(b, cur, ct_desc(name + ".ct2", cur, spec.out_channels, 1, false));
    add(b, cur, bn_desc(name + ".bn3", cur));
    add(b, cur, relu_desc(name + ".relu3", cur));
    add(b, cur, lr_desc(name + ".lr2", cur, *spec.lr_config, 1));
    add(b, cur, bn_desc(name + ".bn4", cur));
  }
  return residual(spec, input, name, std::move(b), cur);
}

double template_flops(const WidthTemplate& t, int inner_width) {
  double total = 0;
  Shape cur{1, static_cast<std::size_t>(t.in_channels), static_cast<std::size_t>(t.input_h),
            static_cast<std::size_t>(t.input_w)};
  for (int i = 0; i < t.blocks; ++i) {
    BlockSpec b;
    b.kind = t.kind;
    b.in_channels = static_cast<int>(cur.c);
    b.inner_channels = inner_width;
    b.out_channels = t.out_channels;
    b.stride = i == 0 ? t.stride : 1;
    if (is_lr(t.kind)) b.lr_config = t.lr;
    const LayerDesc d = is_bottleneck(t.kind) ? build_bottleneck_block(b, cur, "t") : build_basic_block(b, cur, "t");
    total += layer_exact_flops(d);
    cur = d.output;
  }
  return total;
}

int solve_inner_width(double baseline_flops, const WidthTemplate& tmpl, double tolerance) {
  if (!(baseline_flops > 0)) throw SolverError("baseline FLOPs must be positive");
  const int step = is_lr(tmpl.kind) ? tmpl.lr.channels_per_group : 1;
  int best = -1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int w = step; w <= 4096; w += step) {
    const double gap = std::abs(template_flops(tmpl, w) - baseline_flops);
    if (gap < best_gap) {
      best_gap = gap;
      best = w;
    }
  }
  if (best < 0 || best_gap > tolerance * baseline_flops) {
    throw SolverError("no inner width in [1, 4096] within " + std::to_string(tolerance * 100) +
                      "% of the target FLOPs " + std::to_string(baseline_flops));
  }
  return best;
}

NetworkPlan plan_network(const NetSpec& spec) {
  spec.validate();
  NetworkPlan plan;
  plan.spec = spec;
  plan.input = {1, 3, static_cast<std::size_t>(spec.input_h), static_cast<std::size_t>(spec.input_w)};
  Shape cur = plan.input;

  if (spec.stem == StemKind::lr_stem) {
    for (auto& d : build_lr_stem(spec.lr, spec.stem_channels, spec.stem_kernel, spec.stem_channels_per_group, cur,
                                 spec.small_image))
      add(plan.layers, cur, std::move(d));
  } else {
    if (spec.small_image) add(plan.layers, cur, conv_desc("stem.conv", cur, spec.stem_channels, 3, 1));
    else add(plan.layers, cur, conv_desc("stem.conv", cur, spec.stem_channels, 7, 2));
    add(plan.layers, cur, bn_desc("stem.bn", cur));
    add(plan.layers, cur, relu_desc("stem.relu", cur));
  }
  if (!spec.small_image) add(plan.layers, cur, simple_desc("stem.pool", LayerKind::max_pool, cur, spatial(cur, static_cast<int>(cur.c), 2)));

  for (int stage = 0; stage < 4; ++stage) {
    const int out = spec.stage_out_channels[stage];
    const int stride = stage == 0 ? 1 : 2;
    int inner = spec.stage_inner_channels[stage];
    if (inner == 0) {
      const BlockKind conv_kind = is_bottleneck(spec.block) ? BlockKind::bottleneck_conv : BlockKind::basic_conv;
      const int base = baseline_inner(conv_kind, out);
      if (!is_lr(spec.block)) {
        inner = base;
      } else {
        WidthTemplate conv_t{conv_kind, static_cast<int>(cur.c), out, spec.stage_blocks[stage], stride,
                             static_cast<int>(cur.h), static_cast<int>(cur.w), spec.lr};
        WidthTemplate lr_t = conv_t;
        lr_t.kind = spec.block;
        inner = solve_inner_width(template_flops(conv_t, base), lr_t);
      }
    }
    plan.inner_widths[stage] = inner;
    for (int i = 0; i < spec.stage_blocks[stage]; ++i) {
      BlockSpec b;
      b.kind = spec.block;
      b.in_channels = static_cast<int>(cur.c);
      b.inner_channels = inner;
      b.out_channels = out;
      b.stride = i == 0 ? stride : 1;
      if (is_lr(spec.block)) b.lr_config = spec.lr;
      const std::string name = "res" + std::to_string(stage + 2) + "." + std::to_string(i);
      add(plan.layers, cur, is_bottleneck(b.kind) ? build_bottleneck_block(b, cur, name) : build_basic_block(b, cur, name));
    }
  }

  add(plan.layers, cur, simple_desc("pool", LayerKind::global_avg_pool, cur, {1, cur.c, 1, 1}));
  LayerDesc fc = simple_desc("fc", LayerKind::fully_connected, cur,
                             {1, static_cast<std::size_t>(spec.num_classes), 1, 1});
  fc.bias = true;
  fc.counted = true;
  add(plan.layers, cur, std::move(fc));
  plan.output = cur;
  return plan;
}

int network_depth(const NetworkPlan& plan) {
  int n = 0;
  for (const auto& d : plan.layers) n += depth_of(d);
  return n;
}

int count_spatial_convs(const NetworkPlan& plan) {
  int n = 0;
  for (const auto& d : plan.layers) n += convs_in(d);
  return n;
}

// --- runnable network -----------------------------------------------------

template <typename T>
Network<T>::Network(NetworkPlan plan, std::uint64_t seed) : plan_(std::move(plan)) {
  for (const auto& d : plan_.layers) layers_.push_back(make_layer<T>(d));
  std::mt19937_64 rng(seed);
  for (auto& l : layers_) l->init(rng);
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, bool training) {
  if (x.c() != plan_.input.c || x.h() != plan_.input.h || x.w() != plan_.input.w) {
    throw ShapeError("network input " + x.shape().str() + " does not match " + plan_.input.str());
  }
  Tensor<T> h = x;
  for (auto& l : layers_) {
    h = l->forward(h, training);
    if (verify_finite()) check_finite(h, l->name() + " forward");
  }
  return h;
}

template <typename T>
Tensor<T> Network<T>::backward(const Tensor<T>& grad_logits) {
  Tensor<T> g = grad_logits;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    g = (*it)->backward(g);
    if (verify_finite()) check_finite(g, (*it)->name() + " backward");
  }
  return g;
}

template <typename T>
std::vector<ParamRef<T>> Network<T>::parameters() {
  std::vector<ParamRef<T>> out;
  for (auto& l : layers_) l->parameters(out);
  return out;
}

template <typename T>
std::vector<StateRef<T>> Network<T>::state() {
  std::vector<StateRef<T>> out;
  for (auto& l : layers_) l->state(out);
  return out;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(T(0));
}

template <typename T>
std::size_t Network<T>::param_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.value->numel();
  return n;
}

template <typename T>
std::vector<Layer<T>*> Network<T>::flatten() {
  std::vector<Layer<T>*> out;
  for (auto& l : layers_) {
    out.push_back(l.get());
    l->children(out);
  }
  return out;
}

template <typename T>
Layer<T>* Network<T>::find(std::string_view name) {
  for (Layer<T>* l : flatten())
    if (l->name() == name) return l;
  return nullptr;
}

template <typename T>
Network<T> build_network(const NetSpec& spec) {
  return Network<T>(plan_network(spec), spec.seed);
}

template class Network<float>;
template class Network<double>;
template Network<float> build_network<float>(const NetSpec&);
template Network<double> build_network<double>(const NetSpec&);

}  // namespace lrnet
