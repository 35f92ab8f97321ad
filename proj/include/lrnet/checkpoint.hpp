// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lrnet/model.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

// Layout (little-endian):
//   "LRNC" u32 version=1 u32 count
//   count x { u16 name_len, name, u8 dtype (0 = f32), u8 ndim, ndim x u32 dims, payload }
//   u32 meta_len, meta (UTF-8 JSON)

struct NamedTensor {
  std::string name;
  Tensorf tensor;
};

struct CheckpointMeta {
  int epoch = 0;
  std::string spec_hash;
  std::string rng_state;
  std::string netspec;  // JSON text of the spec that built the network
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  CheckpointMeta meta;

  const Tensorf* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version, dtype or truncation.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of all parameters, optionally followed by BN running statistics.
Checkpoint snapshot(Network<float>& net, const CheckpointMeta& meta, bool include_buffers = true);

/// Copies every tensor of the network's state from the checkpoint. Throws
/// FormatError when a name is missing or a shape differs.
void restore(Network<float>& net, const Checkpoint& ckpt);

/// Rebuilds the network described by the embedded spec and restores it.
Network<float> network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace lrnet
