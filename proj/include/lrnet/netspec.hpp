// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/local_relation.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

enum class StemKind { conv7x7, lr_stem };
enum class BlockKind { bottleneck_conv, bottleneck_lr, basic_conv, basic_lr };

std::string_view to_string(StemKind v);
std::string_view to_string(BlockKind v);
StemKind parse_stem_kind(std::string_view s);
BlockKind parse_block_kind(std::string_view s);
bool is_lr(BlockKind kind);
bool is_bottleneck(BlockKind kind);

/// One residual block. inner_channels is the width controlled by the
/// expansion ratio.
struct BlockSpec {
  BlockKind kind = BlockKind::bottleneck_conv;
  int in_channels = 0;
  int inner_channels = 0;
  int out_channels = 0;
  int stride = 1;
  std::optional<LocalRelationConfig> lr_config;  // present iff kind is *_lr

  void validate() const;
};

/// Declarative description of a full network.
struct NetSpec {
  std::string name = "custom";
  StemKind stem = StemKind::lr_stem;
  BlockKind block = BlockKind::bottleneck_lr;
  std::array<int, 4> stage_blocks{2, 2, 2, 2};
  std::array<int, 4> stage_out_channels{256, 512, 1024, 2048};
  /// 0 means "derive": baseline ratio for conv blocks, width solver for LR blocks.
  std::array<int, 4> stage_inner_channels{0, 0, 0, 0};
  int stem_channels = 64;
  int num_classes = 1000;
  int input_h = 224;
  int input_w = 224;
  /// Desk-scale mode for 32x32 inputs: stride-1 stem and no max-pool.
  bool small_image = false;
  /// Block-level LR hyper-parameters; channels and stride are filled per layer.
  LocalRelationConfig lr{};
  /// The LR stem always uses a 7x7 window with m = 8.
  int stem_kernel = 7;
  int stem_channels_per_group = 8;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const NetSpec&) const = default;
};

/// Baseline-equivalent conv spec for an LR spec (same stages, conv blocks and
/// stem), used as the FLOPs target of the width solver.
NetSpec conv_counterpart(const NetSpec& spec);

/// Published configurations: resnet18|resnet26|resnet50|resnet101|lr18|lr26|lr50|lr101.
NetSpec preset(std::string_view model);
std::vector<std::string> preset_names();

/// Scales stem and stage channel widths (rounded up to a multiple of 8 and of
/// the LR group size) for desk-scale experiments.
NetSpec scale_widths(NetSpec spec, double multiplier);

std::string netspec_to_json(const NetSpec& spec);
NetSpec netspec_from_json(std::string_view text);

/// Stable content hash of the serialized spec (FNV-1a over the JSON text).
std::string netspec_hash(const NetSpec& spec);

}  // namespace lrnet
