// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <random>

#include "fixtures.hpp"
#include "lrnet/cost.hpp"
#include "lrnet/model.hpp"
#include "lrnet/train.hpp"
#include "oracles.hpp"

using namespace lrnet;

namespace {

const LayerDesc* find_desc(const std::vector<LayerDesc>& list, const std::string& name) {
  for (const auto& d : list) {
    if (d.name == name) return &d;
    if (const LayerDesc* b = find_desc(d.branch, name)) return b;
    if (const LayerDesc* s = find_desc(d.shortcut, name)) return s;
  }
  return nullptr;
}

// Parameters of one LR layer, counted from the definitions.
std::size_t enumerate_lr(int channels, int groups, int qk_dim, int hidden, bool network_prior, bool output) {
  std::size_t n = 2u * static_cast<std::size_t>(groups * qk_dim * channels);
  if (network_prior) n += static_cast<std::size_t>(2 * hidden + hidden + hidden * groups + groups);
  if (output) n += static_cast<std::size_t>(channels * channels);
  return n;
}

BlockSpec lr_block(int in, int inner, int out, int stride, BlockKind kind = BlockKind::bottleneck_lr) {
  BlockSpec b;
  b.kind = kind;
  b.in_channels = in;
  b.inner_channels = inner;
  b.out_channels = out;
  b.stride = stride;
  if (is_lr(kind)) {
    LocalRelationConfig c;
    c.kernel = 3;
    c.channels_per_group = 4;
    c.geo_hidden = 4;
    b.lr_config = c;
  }
  return b;
}

// Finite differences of sum(R * block(x)) in training mode against the
// layer's backward, for the input and every parameter.
void gradcheck_block(const LayerDesc& desc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto layer = make_layer<double>(desc);
  layer->init(rng);
  std::vector<ParamRef<double>> params;
  layer->parameters(params);
  for (auto& p : params) fill_normal(*p.value, rng, 0.0, 0.4);
  Tensord x = oracle::random<double>({2, desc.input.c, desc.input.h, desc.input.w}, rng);
  auto f = [&] { return layer->forward(x, true); };
  const Tensord y = f();
  const Tensord r = oracle::random<double>(y.shape(), rng);
  for (auto& p : params) p.grad->fill(0);
  const Tensord gx = layer->backward(r);
  CHECK(oracle::fd_check("x", f, x, r, gx).pass());
  for (auto& p : params) {
    const Tensord analytic = *p.grad;
    INFO(p.name);
    CHECK(oracle::fd_check(p.name, f, *p.value, r, analytic).pass());
  }
}

}  // namespace

TEST_CASE("LR stem output extents") {
  const NetSpec s = preset("lr50");
  const auto stem = build_lr_stem(s.lr, 64, 7, 8, {1, 3, 224, 224}, false);
  CHECK(stem.back().output == Shape{1, 64, 112, 112});
  const auto small = build_lr_stem(s.lr, 64, 7, 8, {1, 3, 32, 32}, false);
  CHECK(small.back().output == Shape{1, 64, 16, 16});
  const auto desk = build_lr_stem(s.lr, 64, 7, 8, {1, 3, 32, 32}, true);
  CHECK(desk.back().output == Shape{1, 64, 32, 32});
  CHECK_THROWS_AS(build_lr_stem(s.lr, 64, 7, 8, {1, 1, 32, 32}, false), ShapeError);
}

TEST_CASE("LR stem parameter count by enumeration") {
  NetSpec s = preset("lr50");
  const auto stem = build_lr_stem(s.lr, 64, 7, 8, {1, 3, 224, 224}, false);
  std::size_t counted = 0;
  for (const auto& d : stem) counted += layer_params(d);
  const std::size_t expect = 3 * 64 + 2 * 64 + enumerate_lr(64, 8, 1, 32, true, true) + 2 * 64;
  CHECK(counted == expect);

  Network<float> net(plan_network(s), 0);
  std::size_t allocated = 0;
  for (const auto& p : net.parameters())
    if (p.name.rfind("stem.", 0) == 0) allocated += p.value->numel();
  CHECK(allocated == expect);
}

TEST_CASE("bottleneck blocks") {
  SUBCASE("conv bottleneck keeps the shape on the identity path") {
    BlockSpec b;
    b.kind = BlockKind::bottleneck_conv;
    b.in_channels = 256;
    b.inner_channels = 64;
    b.out_channels = 256;
    const LayerDesc d = build_bottleneck_block(b, {1, 256, 56, 56}, "blk");
    CHECK(d.output == d.input);
    CHECK(d.shortcut.empty());
  }
  SUBCASE("LR bottleneck at the first res2 position") {
    BlockSpec b = lr_block(64, 100, 256, 1);
    b.lr_config->kernel = 7;
    b.lr_config->channels_per_group = 4;
    const LayerDesc d = build_bottleneck_block(b, {1, 64, 56, 56}, "res2.0");
    CHECK(d.output == Shape{1, 256, 56, 56});
    REQUIRE(find_desc(d.branch, "res2.0.lr") != nullptr);
    CHECK(find_desc(d.branch, "res2.0.lr")->output == Shape{1, 100, 56, 56});
    REQUIRE(d.shortcut.size() == 2);
    CHECK(d.shortcut[0].kind == LayerKind::channel_transform);
    CHECK(d.shortcut[1].kind == LayerKind::batch_norm);
  }
  SUBCASE("mismatched input channels fail at build time") {
    CHECK_THROWS_AS(build_bottleneck_block(lr_block(32, 8, 16, 1), {1, 16, 8, 8}, "b"), ShapeError);
    BlockSpec bad = lr_block(16, 8, 16, 1);
    bad.lr_config.reset();
    CHECK_THROWS_AS(build_bottleneck_block(bad, {1, 16, 8, 8}, "b"), std::invalid_argument);
  }
}

TEST_CASE("block gradients match finite differences") {
  SUBCASE("LR bottleneck, stride 2, projection shortcut") {
    gradcheck_block(build_bottleneck_block(lr_block(8, 8, 12, 2), {1, 8, 6, 6}, "b"), 1);
  }
  SUBCASE("LR bottleneck, identity shortcut") {
    gradcheck_block(build_bottleneck_block(lr_block(8, 8, 8, 1), {1, 8, 6, 6}, "b"), 2);
  }
  SUBCASE("conv bottleneck, stride 2") {
    gradcheck_block(build_bottleneck_block(lr_block(8, 4, 12, 2, BlockKind::bottleneck_conv), {1, 8, 6, 6}, "b"), 3);
  }
  SUBCASE("basic LR block, stride 2") {
    gradcheck_block(build_basic_block(lr_block(8, 8, 12, 2, BlockKind::basic_lr), {1, 8, 6, 6}, "b"), 4);
  }
  SUBCASE("basic conv block") {
    gradcheck_block(build_basic_block(lr_block(8, 8, 8, 1, BlockKind::basic_conv), {1, 8, 6, 6}, "b"), 5);
  }
}

TEST_CASE("width solver reproduces the LR-Net-50 widths") {
  const NetworkPlan plan = plan_network(preset("lr50"));
  const int expect[4] = {100, 200, 400, 800};
  for (int i = 0; i < 4; ++i) {
    INFO("stage ", i + 2, " width ", plan.inner_widths[i]);
    CHECK(std::abs(plan.inner_widths[i] - expect[i]) <= 8);
    CHECK(plan.inner_widths[i] % 8 == 0);
  }
}

TEST_CASE("width solver behaviour") {
  WidthTemplate t;
  t.kind = BlockKind::bottleneck_lr;
  t.in_channels = 256;
  t.out_channels = 256;
  t.input_h = t.input_w = 56;
  t.lr.channels_per_group = 8;
  WidthTemplate conv = t;
  conv.kind = BlockKind::bottleneck_conv;
  const double target = template_flops(conv, 64);

  SUBCASE("solution minimizes the gap among multiples of the group size") {
    const int w = solve_inner_width(target, t);
    const double gap = std::abs(template_flops(t, w) - target);
    CHECK(std::abs(template_flops(t, w - 8) - target) >= gap);
    CHECK(std::abs(template_flops(t, w + 8) - target) > gap);
    CHECK(gap / target < 0.02);
  }
  SUBCASE("doubling the target never decreases the width") {
    int prev = 0;
    for (double scale = 0.25; scale <= 8; scale *= 2) {
      const int w = solve_inner_width(target * scale, t);
      CHECK(w >= prev);
      prev = w;
    }
  }
  SUBCASE("unreachable targets raise") {
    CHECK_THROWS_AS(solve_inner_width(1.0, t), SolverError);
    CHECK_THROWS_AS(solve_inner_width(1e15, t), SolverError);
    CHECK_THROWS_AS(solve_inner_width(0.0, t), SolverError);
  }
}

TEST_CASE("network depth and topology") {
  CHECK(network_depth(plan_network(preset("lr50"))) == 50);
  CHECK(network_depth(plan_network(preset("resnet50"))) == 50);
  CHECK(network_depth(plan_network(preset("lr26"))) == 26);
  CHECK(network_depth(plan_network(preset("resnet26"))) == 26);
  CHECK(network_depth(plan_network(preset("lr18"))) == 18);
  CHECK(network_depth(plan_network(preset("resnet18"))) == 18);
  CHECK(network_depth(plan_network(preset("lr101"))) == 101);
  for (const char* m : {"lr18", "lr26", "lr50", "lr101"}) CHECK(count_spatial_convs(plan_network(preset(m))) == 0);
  CHECK(count_spatial_convs(plan_network(preset("resnet50"))) == 17);

  const NetworkPlan p = plan_network(preset("lr50"));
  const std::size_t blocks[4] = {3, 4, 6, 3};
  for (int s = 0; s < 4; ++s) {
    std::size_t found = 0;
    for (const auto& d : p.layers)
      if (d.name.rfind("res" + std::to_string(s + 2) + ".", 0) == 0) ++found;
    CHECK(found == blocks[s]);
  }
}

TEST_CASE("stage extents for a 224 input") {
  const NetworkPlan p = plan_network(preset("lr50"));
  auto out = [&](const std::string& name) {
    const LayerDesc* d = find_desc(p.layers, name);
    REQUIRE(d != nullptr);
    return d->output.h;
  };
  CHECK(out("stem.lr") == 112);
  CHECK(out("res2.2") == 56);
  CHECK(out("res3.3") == 28);
  CHECK(out("res4.5") == 14);
  CHECK(out("res5.2") == 7);
  CHECK(p.output == Shape{1, 1000, 1, 1});
}

TEST_CASE("residual shortcuts are shape consistent") {
  const NetworkPlan p = plan_network(preset("lr26"));
  for (const auto& d : p.layers) {
    if (d.kind != LayerKind::residual) continue;
    CHECK(d.branch.back().output == d.output);
    if (d.shortcut.empty()) CHECK(d.input == d.output);
    else CHECK(d.shortcut.back().output == d.output);
  }
}

TEST_CASE("spec validation rejects unusable resolutions") {
  NetSpec s = preset("lr26");
  s.input_h = s.input_w = 100;
  CHECK_THROWS_AS(plan_network(s), ConfigError);
  s = preset("lr26");
  s.stage_blocks[1] = 0;
  CHECK_THROWS_AS(plan_network(s), ConfigError);
  CHECK_THROWS_AS(preset("lr34"), ConfigError);
}

TEST_CASE("plan parameters equal allocated parameters") {
  for (const char* m : {"lr26", "resnet18", "lr18"}) {
    const NetworkPlan plan = plan_network(preset(m));
    Network<float> net(plan, 0);
    CHECK(network_cost(plan).total_params == net.param_count());
  }
}

TEST_CASE("batch of two through the full-size head gives 1000 logits") {
  NetSpec s = preset("lr26");
  const NetworkPlan plan = plan_network(s);
  CHECK(plan.input == Shape{1, 3, 224, 224});
  CHECK(plan.output == Shape{1, 1000, 1, 1});
  // Executed at reduced width to keep the test fast; the head contract is the same.
  NetSpec narrow = scale_widths(s, 0.125);
  narrow.lr.kernel = narrow.stem_kernel = 3;
  Network<float> net = build_network<float>(narrow);
  std::mt19937_64 rng(0);
  const Tensorf logits = net.forward(oracle::random<float>({2, 3, 224, 224}, rng), false);
  CHECK(logits.shape() == Shape{2, 1000, 1, 1});
  CHECK(all_finite(logits));
}

TEST_CASE("building is deterministic given the seed") {
  const NetSpec s = fixture::tiny_spec("lr26");
  Network<float> a = build_network<float>(s);
  Network<float> b = build_network<float>(s);
  NetSpec other = s;
  other.seed = 1;
  Network<float> c = build_network<float>(other);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  const auto pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool same = true;
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    same = same && pa[i].name == pb[i].name &&
           std::memcmp(pa[i].value->data(), pb[i].value->data(), pa[i].value->numel() * sizeof(float)) == 0;
    differs = differs || *pa[i].value != *pc[i].value;
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("tiny LR-Net-26 takes one SGD step at 32x32") {
  Network<float> net = build_network<float>(fixture::tiny_spec("lr26"));
  std::mt19937_64 rng(3);
  const Tensorf x = oracle::random<float>({4, 3, 32, 32}, rng);
  const std::vector<int> labels{0, 3, 7, 9};
  Sgd<float> opt;
  const double loss = train_step(net, opt, x, labels, 0.05);
  CHECK(std::isfinite(loss));
  for (const auto& p : net.parameters()) CHECK(all_finite(*p.value));
}

TEST_CASE("weight decay flags and parameter names") {
  Network<float> net = build_network<float>(fixture::tiny_spec("lr26"));
  bool saw_geo = false;
  for (const auto& p : net.parameters()) {
    const bool exempt = p.name.find(".geo.") != std::string::npos || p.name.find("bn") != std::string::npos ||
                        p.name.find("bias") != std::string::npos;
    INFO(p.name);
    CHECK(p.weight_decay == !exempt);
    saw_geo = saw_geo || p.name.find(".geo.") != std::string::npos;
  }
  CHECK(saw_geo);
  CHECK(net.find("res3.1.lr") != nullptr);
  CHECK(net.find("nope") == nullptr);
}
