// SPDX-License-Identifier: Apache-2.0
// Desk-scale network specs shared by the model and training tests.
#pragma once

#include <string_view>
#include <utility>

#include "lrnet/dataset.hpp"
#include "lrnet/netspec.hpp"

namespace fixture {

/// Preset topology at 32x32 with reduced widths and a small LR window.
inline lrnet::NetSpec tiny_spec(std::string_view model, double width = 0.125, int classes = 10, int kernel = 3) {
  lrnet::NetSpec s = lrnet::preset(model);
  s.small_image = true;
  s.input_h = s.input_w = 32;
  s.num_classes = classes;
  s.lr.kernel = kernel;
  s.stem_kernel = kernel;
  s.lr.channels_per_group = 8;
  s.lr.geo_hidden = 8;
  s = lrnet::scale_widths(s, width);
  s.validate();
  return s;
}

/// Single-stage-per-block network small enough for 64-bit finite differences.
inline lrnet::NetSpec micro_spec(lrnet::BlockKind block, int width = 1, int input = 8) {
  lrnet::NetSpec s;
  s.name = "micro";
  s.block = block;
  s.stem = lrnet::is_lr(block) ? lrnet::StemKind::lr_stem : lrnet::StemKind::conv7x7;
  s.stage_blocks = {1, 1, 1, 1};
  s.stage_out_channels = {16 * width, 16 * width, 16 * width, 16 * width};
  s.stage_inner_channels = {8 * width, 8 * width, 8 * width, 8 * width};
  s.stem_channels = 8 * width;
  s.num_classes = 3;
  s.input_h = s.input_w = input;
  s.small_image = true;
  s.lr.kernel = 3;
  s.lr.channels_per_group = 4;
  s.lr.geo_hidden = 4;
  s.stem_kernel = 3;
  s.stem_channels_per_group = 4;
  s.validate();
  return s;
}

/// Train and validation splits drawn from one blob problem (the class
/// templates depend on the seed, so both splits must share it).
inline std::pair<lrnet::Dataset, lrnet::Dataset> blob_split(std::size_t train, std::size_t val, int classes, int size,
                                                            std::uint64_t seed) {
  const lrnet::Dataset all = lrnet::make_blobs(train + val, classes, size, size, seed);
  const std::size_t per = all.images.numel() / all.size();
  auto slice = [&](std::size_t begin, std::size_t count) {
    lrnet::Dataset d;
    d.num_classes = classes;
    d.images = lrnet::Tensorf({count, all.images.c(), all.images.h(), all.images.w()});
    std::copy(all.images.data() + begin * per, all.images.data() + (begin + count) * per, d.images.data());
    d.labels.assign(all.labels.begin() + static_cast<long>(begin), all.labels.begin() + static_cast<long>(begin + count));
    return d;
  };
  return {slice(0, train), slice(train, val)};
}

}  // namespace fixture
