// SPDX-License-Identifier: Apache-2.0
#include "lrnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace lrnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'R', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 0;

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensorf* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& nt : ckpt.tensors) {
    if (nt.name.size() > 0xffff) throw FormatError("tensor name too long: " + nt.name.substr(0, 32));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    put<std::uint8_t>(out, kFloat32);
    put<std::uint8_t>(out, 4);
    const Shape& s = nt.tensor.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(nt.tensor.data());
    out.insert(out.end(), p, p + nt.tensor.numel() * sizeof(float));
  }
  const nlohmann::json meta{{"epoch", ckpt.meta.epoch},
                            {"spec_hash", ckpt.meta.spec_hash},
                            {"rng_state", ckpt.meta.rng_state},
                            {"netspec", ckpt.meta.netspec}};
  const std::string text = meta.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const auto* name = r.take(len);
    NamedTensor nt;
    nt.name.assign(reinterpret_cast<const char*>(name), len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != kFloat32) throw FormatError(nt.name + ": unsupported dtype code " + std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>();
    if (ndim > 4) throw FormatError(nt.name + ": more than 4 dimensions");
    std::size_t dims[4] = {1, 1, 1, 1};
    for (std::uint8_t d = 0; d < ndim; ++d) dims[4 - ndim + d] = r.get<std::uint32_t>();
    nt.tensor = Tensorf({dims[0], dims[1], dims[2], dims[3]});
    std::memcpy(nt.tensor.data(), r.take(nt.tensor.numel() * sizeof(float)), nt.tensor.numel() * sizeof(float));
    ckpt.tensors.push_back(std::move(nt));
  }
  const auto meta_len = r.get<std::uint32_t>();
  const auto* meta = r.take(meta_len);
  if (!r.done()) throw FormatError("trailing bytes after checkpoint metadata");
  try {
    const auto j = nlohmann::json::parse(meta, meta + meta_len);
    ckpt.meta.epoch = j.value("epoch", 0);
    ckpt.meta.spec_hash = j.value("spec_hash", "");
    ckpt.meta.rng_state = j.value("rng_state", "");
    ckpt.meta.netspec = j.value("netspec", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

Checkpoint snapshot(Network<float>& net, const CheckpointMeta& meta, bool include_buffers) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  if (ckpt.meta.netspec.empty()) ckpt.meta.netspec = netspec_to_json(net.spec());
  if (ckpt.meta.spec_hash.empty()) ckpt.meta.spec_hash = netspec_hash(net.spec());
  if (include_buffers) {
    for (auto& s : net.state()) ckpt.tensors.push_back({s.name, *s.value});
  } else {
    for (auto& p : net.parameters()) ckpt.tensors.push_back({p.name, *p.value});
  }
  return ckpt;
}

void restore(Network<float>& net, const Checkpoint& ckpt) {
  for (auto& s : net.state()) {
    const Tensorf* t = ckpt.find(s.name);
    if (!t) throw FormatError("checkpoint has no tensor '" + s.name + "'");
    if (t->shape() != s.value->shape()) {
      throw FormatError(s.name + ": checkpoint shape " + t->shape().str() + " vs network " + s.value->shape().str());
    }
    *s.value = *t;
  }
}

Network<float> network_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.netspec.empty()) throw FormatError("checkpoint does not embed a network spec");
  const NetSpec spec = netspec_from_json(ckpt.meta.netspec);
  Network<float> net = build_network<float>(spec);
  restore(net, ckpt);
  return net;
}

}  // namespace lrnet
