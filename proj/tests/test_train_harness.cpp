// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "lrnet/checkpoint.hpp"
#include "lrnet/dataset.hpp"
#include "lrnet/parallel.hpp"
#include "lrnet/train.hpp"
#include "oracles.hpp"

using namespace lrnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lrnet_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CifarRecords random_records(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CifarRecords r;
  r.labels.resize(count);
  r.pixels.resize(count * kCifarImageBytes);
  for (auto& l : r.labels) l = static_cast<std::uint8_t>(rng() % 10);
  for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng());
  return r;
}

bool same_bytes(Network<float>& a, Network<float>& b) {
  const auto sa = a.state();
  const auto sb = b.state();
  if (sa.size() != sb.size()) return false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i].value->shape() != sb[i].value->shape()) return false;
    if (std::memcmp(sa[i].value->data(), sb[i].value->data(), sa[i].value->numel() * sizeof(float)) != 0) return false;
  }
  return true;
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.schedule.base_lr = 0.02;
  c.schedule.warmup_epochs = 1;
  c.augment = false;
  return c;
}

constexpr int kBlobSize = 16;

NetSpec blob_spec() {
  NetSpec s = fixture::micro_spec(BlockKind::bottleneck_lr, 4, kBlobSize);
  s.num_classes = 4;
  return s;
}

}  // namespace

TEST_CASE("SGD step examples") {
  Tensorf w({1, 1, 1, 1}, 0.0f);
  Tensorf g({1, 1, 1, 1}, 1.0f);
  std::vector<ParamRef<float>> params{{"w", &w, &g, true}};
  SUBCASE("plain step") {
    Sgd<float> opt({0.0, 0.0});
    opt.step(params, 1.0);
    CHECK(w[0] == -1.0f);
  }
  SUBCASE("momentum recurrence over two steps") {
    Sgd<float> opt({0.9, 0.0});
    opt.step(params, 1.0);
    opt.step(params, 1.0);
    CHECK(w[0] == doctest::Approx(-2.9));
  }
}

TEST_CASE("SGD matches the scalar reference, with decay only where flagged") {
  std::mt19937_64 rng(1);
  Tensord w = oracle::random<double>({2, 3, 1, 1}, rng);
  Tensord b = oracle::random<double>({1, 4, 1, 1}, rng);
  Tensord gw(w.shape());
  Tensord gb(b.shape());
  std::vector<ParamRef<double>> params{{"w", &w, &gw, true}, {"b", &b, &gb, false}};
  std::vector<oracle::ScalarSgd> ref_w(w.numel(), {0.9, 1e-2});
  std::vector<oracle::ScalarSgd> ref_b(b.numel(), {0.9, 0.0});
  std::vector<double> ew(w.storage()), eb(b.storage());
  Sgd<double> opt({0.9, 1e-2});
  std::uniform_real_distribution<double> lr_dist(0.0, 0.3);
  for (int step = 0; step < 25; ++step) {
    fill_normal(gw, rng, 0, 1);
    fill_normal(gb, rng, 0, 1);
    const double lr = lr_dist(rng);
    for (std::size_t i = 0; i < ew.size(); ++i) ew[i] = ref_w[i].step(ew[i], gw[i], lr);
    for (std::size_t i = 0; i < eb.size(); ++i) eb[i] = ref_b[i].step(eb[i], gb[i], lr);
    opt.step(params, lr);
  }
  for (std::size_t i = 0; i < ew.size(); ++i) CHECK(w[i] == doctest::Approx(ew[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < eb.size(); ++i) CHECK(b[i] == doctest::Approx(eb[i]).epsilon(1e-12));
}

TEST_CASE("SGD rejects mismatched gradients") {
  Tensorf w({1, 2, 1, 1});
  Tensorf g({1, 3, 1, 1});
  Sgd<float> opt;
  CHECK_THROWS_AS(opt.step({{"w", &w, &g, true}}, 0.1), ShapeError);
}

TEST_CASE("learning-rate schedule") {
  LrSchedule s;
  s.base_lr = 0.4;
  s.warmup_epochs = 5;
  s.decay_epochs = {30, 60, 90};
  CHECK(lr_at(2.5, s) == doctest::Approx(0.2));
  CHECK(lr_at(31, s) == doctest::Approx(0.04));
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(5, s) == doctest::Approx(0.4));
  CHECK(lr_at(95, s) == doctest::Approx(0.0004));
  CHECK_THROWS_AS(lr_at(-1, s), ConfigError);
  s.warmup_epochs = 0;
  CHECK(lr_at(0, s) == doctest::Approx(0.4));
}

TEST_CASE("CIFAR-10 records") {
  const fs::path dir = scratch("cifar");
  SUBCASE("a 10000-record file round-trips") {
    CifarRecords r = random_records(10000, 2);
    r.labels[0] = 6;
    write_cifar10_records(dir / "data_batch_1.bin", r);
    CHECK(fs::file_size(dir / "data_batch_1.bin") == 10000 * kCifarRecordBytes);
    const CifarRecords back = read_cifar10_records(dir / "data_batch_1.bin");
    CHECK(back.size() == 10000);
    CHECK(back.labels[0] == 6);
    CHECK(back.labels == r.labels);
    CHECK(back.pixels == r.pixels);
    const Dataset a = records_to_dataset(r);
    const Dataset b = load_cifar10({dir / "data_batch_1.bin"});
    CHECK(b.size() == 10000);
    CHECK(b.labels[0] == 6);
    CHECK(a.images == b.images);
    CHECK(load_cifar10({dir / "data_batch_1.bin"}, 100).size() == 100);
  }
  SUBCASE("pixels are scaled then standardized per channel") {
    CifarRecords r = random_records(1, 3);
    r.pixels[0] = 255;           // red, first pixel
    r.pixels[1024] = 0;          // green
    r.pixels[2048 + 5] = 51;     // blue, sixth pixel
    const Dataset d = records_to_dataset(r);
    const Standardization n;
    CHECK(d.images(0, 0, 0, 0) == doctest::Approx((1.0 - n.mean[0]) / n.stddev[0]));
    CHECK(d.images(0, 1, 0, 0) == doctest::Approx((0.0 - n.mean[1]) / n.stddev[1]));
    CHECK(d.images(0, 2, 0, 5) == doctest::Approx((0.2 - n.mean[2]) / n.stddev[2]));
  }
  SUBCASE("truncated files are rejected") {
    write_cifar10_records(dir / "t.bin", random_records(3, 4));
    fs::resize_file(dir / "t.bin", 2 * kCifarRecordBytes + 100);
    CHECK_THROWS_AS(read_cifar10_records(dir / "t.bin"), FormatError);
  }
  SUBCASE("labels above 9 are rejected") {
    write_cifar10_records(dir / "l.bin", random_records(3, 5));
    std::fstream f(dir / "l.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(kCifarRecordBytes));
    f.put(static_cast<char>(10));
    f.close();
    CHECK_THROWS_AS(read_cifar10_records(dir / "l.bin"), FormatError);
  }
  SUBCASE("missing files are reported") {
    CHECK_THROWS(read_cifar10_records(dir / "absent.bin"));
  }
  fs::remove_all(dir);
}

TEST_CASE("augmentation keeps shape and content statistics") {
  std::mt19937_64 rng(6);
  std::vector<float> src(3 * 8 * 8);
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = static_cast<float>(i + 1);
  std::vector<float> dst(src.size());
  bool moved = false;
  for (int t = 0; t < 20; ++t) {
    augment_crop_flip(src.data(), dst.data(), 3, 8, 8, rng);
    for (float v : dst) CHECK((v == 0.0f || (v >= 1 && v <= static_cast<float>(src.size()))));
    moved = moved || dst != src;
  }
  CHECK(moved);
}

TEST_CASE("epoch batching") {
  std::mt19937_64 rng(7);
  const auto b = epoch_batches(65, 32, true, rng);
  REQUIRE(b.size() == 2);  // the trailing single example is dropped
  std::vector<std::size_t> all;
  for (const auto& v : b) all.insert(all.end(), v.begin(), v.end());
  std::sort(all.begin(), all.end());
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  CHECK(epoch_batches(66, 32, false, rng).back().size() == 2);
}

TEST_CASE("prefetcher yields batches in order, independent of timing") {
  const Dataset d = make_blobs(40, 4, kBlobSize, kBlobSize, 1);
  std::mt19937_64 rng(8);
  const auto batches = epoch_batches(d.size(), 8, true, rng);
  std::vector<Batch> first;
  {
    BatchPrefetcher p(d, batches, true, 99);
    while (auto b = p.next()) first.push_back(std::move(*b));
  }
  CHECK(first.size() == batches.size());
  BatchPrefetcher p(d, batches, true, 99);
  for (std::size_t i = 0; i < first.size(); ++i) {
    auto b = p.next();
    REQUIRE(b.has_value());
    CHECK(b->images == first[i].images);
    CHECK(b->labels == first[i].labels);
  }
  CHECK_FALSE(p.next().has_value());
}

TEST_CASE("separable blobs reach 95% within five epochs") {
  set_num_workers(1);
  const auto [train_data, val] = fixture::blob_split(512, 256, 4, kBlobSize, 1);
  Network<float> net = build_network<float>(blob_spec());
  const auto log = train(net, train_data, val, quick_config(5));
  REQUIRE(log.size() == 6);
  INFO("final val top1 ", log.back().val_top1);
  CHECK(log.back().val_top1 >= 0.95);
}

TEST_CASE("overfitting one batch") {
  set_num_workers(1);
  NetSpec s = fixture::micro_spec(BlockKind::bottleneck_lr, 4, 16);
  s.num_classes = 4;
  Network<float> net = build_network<float>(s);
  std::mt19937_64 rng(9);
  const Tensorf x = oracle::random<float>({8, 3, 16, 16}, rng);
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3};
  Sgd<float> opt({0.9, 0.0});
  std::vector<double> losses;
  for (int step = 0; step < 20; ++step) losses.push_back(train_step(net, opt, x, labels, 0.02));
  net.zero_grad();
  const Tensorf logits = net.forward(x, true);
  const double final_loss = softmax_xent_fwd(logits, std::span<const int>(labels)).loss;
  INFO("initial ", losses.front(), " final ", final_loss);
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
  CHECK(final_loss < 0.1 * losses.front());
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  set_num_workers(1);
  const Dataset d = make_blobs(96, 4, kBlobSize, kBlobSize, 3);
  Network<float> net = build_network<float>(blob_spec());
  Network<float> ref = build_network<float>(blob_spec());
  TrainConfig c = quick_config(1);
  c.schedule.base_lr = 0;
  train(net, d, d, c);
  const auto a = net.parameters();
  const auto b = ref.parameters();
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && *a[i].value == *b[i].value;
  CHECK(same);
}

TEST_CASE("zero-epoch run reports the initial model and writes checkpoint 0") {
  set_num_workers(1);
  const fs::path dir = scratch("zero");
  const Dataset d = make_blobs(64, 4, kBlobSize, kBlobSize, 4);
  Network<float> net = build_network<float>(blob_spec());
  TrainConfig c = quick_config(0);
  c.metrics_path = dir / "metrics.csv";
  c.checkpoint_dir = dir / "checkpoints";
  const auto log = train(net, d, d, c);
  REQUIRE(log.size() == 1);
  CHECK(log[0].epoch == 0);
  const EvalResult e = evaluate(net, d);
  CHECK(log[0].val_loss == e.loss);
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(dir / "checkpoints")) files.push_back(f.path().filename());
  CHECK(files == std::vector<fs::path>{"epoch_000.lrnc"});
  std::ifstream m(dir / "metrics.csv");
  std::string header, row, extra;
  std::getline(m, header);
  std::getline(m, row);
  CHECK(header == "epoch,lr,train_loss,train_top1,val_loss,val_top1");
  CHECK(row.rfind("0,0,", 0) == 0);
  CHECK_FALSE(std::getline(m, extra));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip reproduces evaluation exactly") {
  set_num_workers(1);
  const fs::path dir = scratch("ckpt");
  const auto [d, val] = fixture::blob_split(128, 64, 4, kBlobSize, 5);
  Network<float> net = build_network<float>(blob_spec());
  TrainConfig c = quick_config(2);
  c.checkpoint_dir = dir;
  const auto log = train(net, d, val, c);
  const Checkpoint ck = load_checkpoint(checkpoint_path(dir, 2));
  CHECK(ck.meta.epoch == 2);
  CHECK(ck.meta.spec_hash == netspec_hash(blob_spec()));
  Network<float> back = network_from_checkpoint(ck);
  CHECK(same_bytes(net, back));
  const EvalResult e = evaluate(back, val);
  CHECK(e.loss == log.back().val_loss);
  CHECK(e.top1 == log.back().val_top1);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint format") {
  Checkpoint ck;
  ck.tensors.push_back({"a.weight", Tensorf({2, 3, 1, 1}, std::vector<float>{1, 2, 3, 4, 5, 6})});
  ck.meta.epoch = 7;
  ck.meta.spec_hash = "abc";
  const auto bytes = serialize_checkpoint(ck);
  REQUIRE(bytes.size() > 12);
  CHECK(std::memcmp(bytes.data(), "LRNC", 4) == 0);
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at] | bytes[at + 1] << 8 | bytes[at + 2] << 16 | bytes[at + 3] << 24);
  };
  CHECK(u32(4) == 1);  // version
  CHECK(u32(8) == 1);  // tensor count
  CHECK((bytes[12] | bytes[13] << 8) == 8);  // name length
  CHECK(std::string(bytes.begin() + 14, bytes.begin() + 22) == "a.weight");
  CHECK(bytes[22] == 0);  // f32
  CHECK(bytes[23] == 4);  // ndim
  CHECK(u32(24) == 2);
  CHECK(u32(28) == 3);
  CHECK(u32(32) == 1);
  CHECK(u32(36) == 1);
  float first;
  std::memcpy(&first, bytes.data() + 40, 4);
  CHECK(first == 1.0f);
  const std::size_t meta_at = 40 + 6 * 4;
  CHECK(u32(meta_at) == bytes.size() - meta_at - 4);

  const Checkpoint back = deserialize_checkpoint(bytes);
  REQUIRE(back.tensors.size() == 1);
  CHECK(back.tensors[0].name == "a.weight");
  CHECK(back.tensors[0].tensor == ck.tensors[0].tensor);
  CHECK(back.meta.epoch == 7);
  CHECK(back.meta.spec_hash == "abc");

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  bad = bytes;
  bad[22] = 1;
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
}

TEST_CASE("restoring into a different network fails") {
  Network<float> a = build_network<float>(blob_spec());
  Network<float> b = build_network<float>(fixture::micro_spec(BlockKind::bottleneck_conv));
  CHECK_THROWS_AS(restore(b, snapshot(a, {})), FormatError);
}

TEST_CASE("single-worker training is bitwise deterministic") {
  set_num_workers(1);
  const Dataset d = make_blobs(128, 4, kBlobSize, kBlobSize, 7);
  TrainConfig c = quick_config(2);
  c.augment = true;
  c.seed = 11;
  Network<float> a = build_network<float>(blob_spec());
  Network<float> b = build_network<float>(blob_spec());
  const auto la = train(a, d, d, c);
  const auto lb = train(b, d, d, c);
  CHECK(same_bytes(a, b));
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(format_metrics_row(la[i]) == format_metrics_row(lb[i]));
}

TEST_CASE("divergence aborts with a numeric error") {
  set_num_workers(1);
  const Dataset d = make_blobs(64, 4, kBlobSize, kBlobSize, 8);
  Network<float> net = build_network<float>(blob_spec());
  TrainConfig c = quick_config(3);
  c.schedule.base_lr = 1e30;
  c.schedule.warmup_epochs = 0;
  CHECK_THROWS_AS(train(net, d, d, c), NumericError);
}

TEST_CASE("training needs at least two examples") {
  Network<float> net = build_network<float>(blob_spec());
  const Dataset d = make_blobs(1, 4, kBlobSize, kBlobSize, 9);
  CHECK_THROWS_AS(train(net, d, d, quick_config(1)), ConfigError);
}
