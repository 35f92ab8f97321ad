// SPDX-License-Identifier: Apache-2.0
#include "lrnet/netspec.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"

namespace lrnet {

using json = nlohmann::json;

std::string_view to_string(StemKind v) { return v == StemKind::conv7x7 ? "conv7x7" : "lr_stem"; }

std::string_view to_string(BlockKind v) {
  switch (v) {
    case BlockKind::bottleneck_conv: return "bottleneck_conv";
    case BlockKind::bottleneck_lr: return "bottleneck_lr";
    case BlockKind::basic_conv: return "basic_conv";
    case BlockKind::basic_lr: return "basic_lr";
  }
  return "?";
}

StemKind parse_stem_kind(std::string_view s) {
  if (s == "conv7x7") return StemKind::conv7x7;
  if (s == "lr_stem") return StemKind::lr_stem;
  throw ConfigError("unknown stem kind '" + std::string(s) + "'");
}

BlockKind parse_block_kind(std::string_view s) {
  for (BlockKind k : {BlockKind::bottleneck_conv, BlockKind::bottleneck_lr, BlockKind::basic_conv, BlockKind::basic_lr})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown block kind '" + std::string(s) + "'");
}

bool is_lr(BlockKind kind) { return kind == BlockKind::bottleneck_lr || kind == BlockKind::basic_lr; }
bool is_bottleneck(BlockKind kind) { return kind == BlockKind::bottleneck_conv || kind == BlockKind::bottleneck_lr; }

void BlockSpec::validate() const {
  if (in_channels <= 0 || inner_channels <= 0 || out_channels <= 0)
    throw ConfigError("block channels must be positive");
  if (stride != 1 && stride != 2) throw ConfigError("block stride must be 1 or 2");
  if (is_lr(kind) != lr_config.has_value())
    throw ConfigError("lr_config must be present exactly for local relation blocks");
  if (lr_config) {
    LocalRelationConfig c = *lr_config;
    c.channels = inner_channels;
    c.stride = stride;
    c.validate();
    if (kind == BlockKind::basic_lr) {
      c.channels = out_channels;
      c.stride = 1;
      c.validate();
    }
  }
}

void NetSpec::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (stage_blocks[i] <= 0) throw ConfigError("stage_blocks must be positive");
    if (stage_out_channels[i] <= 0) throw ConfigError("stage_out_channels must be positive");
    if (stage_inner_channels[i] < 0) throw ConfigError("stage_inner_channels must be non-negative");
  }
  if (stem_channels <= 0) throw ConfigError("stem_channels must be positive");
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  const int reduction = small_image ? 8 : 32;
  if (input_h <= 0 || input_w <= 0 || input_h % reduction != 0 || input_w % reduction != 0) {
    throw ConfigError("input resolution " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " must be a positive multiple of " + std::to_string(reduction));
  }
  if (stem == StemKind::lr_stem) {
    LocalRelationConfig c = lr;
    c.channels = stem_channels;
    c.kernel = stem_kernel;
    c.channels_per_group = stem_channels_per_group;
    c.stride = 1;
    c.validate();
  }
  if (is_lr(block)) {
    LocalRelationConfig c = lr;
    c.channels = c.channels_per_group;
    c.stride = 1;
    c.validate();
    for (int i = 0; i < 4; ++i) {
      if (stage_inner_channels[i] % lr.channels_per_group != 0)
        throw ConfigError("stage_inner_channels must be multiples of channels_per_group");
      if (block == BlockKind::basic_lr && stage_out_channels[i] % lr.channels_per_group != 0)
        throw ConfigError("basic local relation blocks need stage_out_channels divisible by channels_per_group");
    }
  }
}

NetSpec conv_counterpart(const NetSpec& spec) {
  NetSpec c = spec;
  c.name = spec.name + "-conv";
  c.stem = StemKind::conv7x7;
  c.block = is_bottleneck(spec.block) ? BlockKind::bottleneck_conv : BlockKind::basic_conv;
  c.stage_inner_channels = {0, 0, 0, 0};
  return c;
}

NetSpec preset(std::string_view model) {
  NetSpec s;
  s.name = std::string(model);
  s.lr = LocalRelationConfig{};
  s.lr.output_transform = true;
  const bool lr = model.substr(0, 2) == "lr";
  const std::string_view depth = lr ? model.substr(2) : (model.substr(0, 6) == "resnet" ? model.substr(6) : "");
  if (depth == "18") {
    s.stage_blocks = {2, 2, 2, 2};
    s.stage_out_channels = {64, 128, 256, 512};
    s.block = lr ? BlockKind::basic_lr : BlockKind::basic_conv;
  } else if (depth == "26" || depth == "50" || depth == "101") {
    s.stage_blocks = depth == "26" ? std::array<int, 4>{2, 2, 2, 2}
                     : depth == "50" ? std::array<int, 4>{3, 4, 6, 3}
                                     : std::array<int, 4>{3, 4, 23, 3};
    s.stage_out_channels = {256, 512, 1024, 2048};
    s.block = lr ? BlockKind::bottleneck_lr : BlockKind::bottleneck_conv;
  } else {
    throw ConfigError("unknown model '" + std::string(model) + "'");
  }
  s.stem = lr ? StemKind::lr_stem : StemKind::conv7x7;
  return s;
}

std::vector<std::string> preset_names() {
  return {"resnet18", "resnet26", "resnet50", "resnet101", "lr18", "lr26", "lr50", "lr101"};
}

NetSpec scale_widths(NetSpec spec, double multiplier) {
  if (!(multiplier > 0)) throw ConfigError("width multiplier must be positive");
  int unit = std::lcm(8, spec.lr.channels_per_group);
  if (spec.stem == StemKind::lr_stem) unit = std::lcm(unit, spec.stem_channels_per_group);
  auto scale = [&](int c) {
    if (c == 0) return 0;
    const int v = static_cast<int>(std::ceil(c * multiplier / unit)) * unit;
    return std::max(unit, v);
  };
  spec.stem_channels = scale(spec.stem_channels);
  for (auto& c : spec.stage_out_channels) c = scale(c);
  for (auto& c : spec.stage_inner_channels) c = scale(c);
  return spec;
}

namespace {

json lr_to_json(const LocalRelationConfig& c) {
  return json{{"kernel", c.kernel},
              {"channels_per_group", c.channels_per_group},
              {"variant", to_string(c.variant)},
              {"qk_dim", c.qk_dim},
              {"geo_hidden", c.geo_hidden},
              {"normalization", to_string(c.normalization)},
              {"geo_mode", to_string(c.geo_mode)},
              {"output_transform", c.output_transform}};
}

LocalRelationConfig lr_from_json(const json& j) {
  LocalRelationConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "kernel") c.kernel = v.get<int>();
    else if (key == "channels_per_group") c.channels_per_group = v.get<int>();
    else if (key == "variant") c.variant = parse_composability(v.get<std::string>());
    else if (key == "qk_dim") c.qk_dim = v.get<int>();
    else if (key == "geo_hidden") c.geo_hidden = v.get<int>();
    else if (key == "normalization") c.normalization = parse_normalization(v.get<std::string>());
    else if (key == "geo_mode") c.geo_mode = parse_geo_mode(v.get<std::string>());
    else if (key == "output_transform") c.output_transform = v.get<bool>();
    else throw ConfigError("unknown local relation key '" + key + "'");
  }
  return c;
}

}  // namespace

std::string netspec_to_json(const NetSpec& s) {
  json j{{"name", s.name},
         {"stem", to_string(s.stem)},
         {"block", to_string(s.block)},
         {"stage_blocks", s.stage_blocks},
         {"stage_out_channels", s.stage_out_channels},
         {"stage_inner_channels", s.stage_inner_channels},
         {"stem_channels", s.stem_channels},
         {"num_classes", s.num_classes},
         {"input_resolution", {s.input_h, s.input_w}},
         {"small_image", s.small_image},
         {"local_relation", lr_to_json(s.lr)},
         {"stem_kernel", s.stem_kernel},
         {"stem_channels_per_group", s.stem_channels_per_group},
         {"seed", s.seed}};
  return j.dump(2);
}

NetSpec netspec_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("netspec: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("netspec: top level must be an object");
  NetSpec s;
  if (j.contains("preset")) s = preset(j.at("preset").get<std::string>());
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "preset") continue;
      if (key == "name") s.name = v.get<std::string>();
      else if (key == "stem") s.stem = parse_stem_kind(v.get<std::string>());
      else if (key == "block") s.block = parse_block_kind(v.get<std::string>());
      else if (key == "stage_blocks") s.stage_blocks = v.get<std::array<int, 4>>();
      else if (key == "stage_out_channels") s.stage_out_channels = v.get<std::array<int, 4>>();
      else if (key == "stage_inner_channels") s.stage_inner_channels = v.get<std::array<int, 4>>();
      else if (key == "stem_channels") s.stem_channels = v.get<int>();
      else if (key == "num_classes") s.num_classes = v.get<int>();
      else if (key == "input_resolution") {
        const auto hw = v.get<std::array<int, 2>>();
        s.input_h = hw[0];
        s.input_w = hw[1];
      } else if (key == "small_image") s.small_image = v.get<bool>();
      else if (key == "local_relation") s.lr = lr_from_json(v);
      else if (key == "stem_kernel") s.stem_kernel = v.get<int>();
      else if (key == "stem_channels_per_group") s.stem_channels_per_group = v.get<int>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else throw ConfigError("netspec: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("netspec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string netspec_hash(const NetSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : netspec_to_json(spec)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lrnet
