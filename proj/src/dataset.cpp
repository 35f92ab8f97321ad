// SPDX-License-Identifier: Apache-2.0
#include "lrnet/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace lrnet {

Dataset Dataset::head(std::size_t count) const {
  count = std::min(count, size());
  Dataset d;
  d.num_classes = num_classes;
  const Shape s = images.shape();
  d.images = Tensorf({count, s.c, s.h, s.w});
  std::copy_n(images.data(), count * s.c * s.h * s.w, d.images.data());
  d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
  return d;
}

CifarRecords read_cifar10_records(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw FormatError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a whole number of " +
                      std::to_string(kCifarRecordBytes) + "-byte records (truncated?)");
  }
  CifarRecords r;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  r.labels.resize(n);
  r.pixels.resize(n * kCifarImageBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(file.string() + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
    }
    r.labels[i] = rec[0];
    std::memcpy(r.pixels.data() + i * kCifarImageBytes, rec + 1, kCifarImageBytes);
  }
  return r;
}

void write_cifar10_records(const std::filesystem::path& file, const CifarRecords& records) {
  if (records.pixels.size() != records.size() * kCifarImageBytes) throw FormatError("pixel buffer length mismatch");
  std::ofstream f(file, std::ios::binary);
  if (!f) throw FormatError("cannot write " + file.string());
  for (std::size_t i = 0; i < records.size(); ++i) {
    f.put(static_cast<char>(records.labels[i]));
    f.write(reinterpret_cast<const char*>(records.pixels.data() + i * kCifarImageBytes), kCifarImageBytes);
  }
  if (!f) throw FormatError("write failed: " + file.string());
}

Dataset records_to_dataset(const CifarRecords& records, const Standardization& norm) {
  Dataset d;
  d.num_classes = 10;
  d.images = Tensorf({records.size(), 3, 32, 32});
  d.labels.assign(records.labels.begin(), records.labels.end());
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t* src = records.pixels.data() + i * kCifarImageBytes + c * 1024;
      float* dst = d.images.plane(i, c);
      for (std::size_t p = 0; p < 1024; ++p) dst[p] = (src[p] / 255.0f - norm.mean[c]) / norm.stddev[c];
    }
  }
  return d;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& files, std::size_t limit, const Standardization& norm) {
  CifarRecords all;
  for (const auto& file : files) {
    CifarRecords r = read_cifar10_records(file);
    all.labels.insert(all.labels.end(), r.labels.begin(), r.labels.end());
    all.pixels.insert(all.pixels.end(), r.pixels.begin(), r.pixels.end());
    if (limit > 0 && all.size() >= limit) break;
  }
  if (limit > 0 && all.size() > limit) {
    all.labels.resize(limit);
    all.pixels.resize(limit * kCifarImageBytes);
  }
  return records_to_dataset(all, norm);
}

std::vector<std::filesystem::path> cifar10_train_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return files;
}

std::vector<std::filesystem::path> cifar10_test_files(const std::filesystem::path& dir) {
  return {dir / "test_batch.bin"};
}

Dataset make_blobs(std::size_t count, int num_classes, int height, int width, std::uint64_t seed, float noise) {
  if (num_classes <= 0 || height <= 0 || width <= 0) throw ConfigError("make_blobs: invalid geometry");
  std::mt19937_64 rng(seed);
  const Shape one{1, 3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)};
  std::vector<Tensorf> templates;
  for (int c = 0; c < num_classes; ++c) {
    Tensorf t(one);
    fill_normal(t, rng, 0.0, 1.0);
    templates.push_back(std::move(t));
  }
  Dataset d;
  d.num_classes = num_classes;
  d.images = Tensorf({count, 3, one.h, one.w});
  d.labels.resize(count);
  std::normal_distribution<float> gauss(0.0f, noise);
  const std::size_t per = one.numel();
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    d.labels[i] = label;
    float* dst = d.images.data() + i * per;
    for (std::size_t p = 0; p < per; ++p) dst[p] = templates[label][p] + gauss(rng);
  }
  return d;
}

void augment_crop_flip(const float* src, float* dst, std::size_t channels, std::size_t height, std::size_t width,
                       std::mt19937_64& rng) {
  constexpr int pad = 4;
  std::uniform_int_distribution<int> offset(0, 2 * pad);
  const int oy = offset(rng) - pad;
  const int ox = offset(rng) - pad;
  const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  const int H = static_cast<int>(height);
  const int W = static_cast<int>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* sp = src + c * height * width;
    float* dp = dst + c * height * width;
    for (int y = 0; y < H; ++y) {
      const int sy = y + oy;
      for (int x = 0; x < W; ++x) {
        const int sx = (flip ? W - 1 - x : x) + ox;
        dp[y * W + x] = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? sp[sy * W + sx] : 0.0f;
      }
    }
  }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size, bool shuffle,
                                                    std::mt19937_64& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    // Fisher-Yates with an explicit distribution so the order is the same
    // across standard library implementations of std::shuffle.
    for (std::size_t i = count; i > 1; --i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < count; i += batch_size) {
    const std::size_t end = std::min(count, i + batch_size);
    if (end - i == 1 && !batches.empty()) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch gather_batch(const Dataset& data, const std::vector<std::size_t>& indices, bool augment, std::mt19937_64& rng) {
  const Shape s = data.images.shape();
  const std::size_t per = s.c * s.h * s.w;
  Batch b;
  b.images = Tensorf({indices.size(), s.c, s.h, s.w});
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = data.images.data() + indices[i] * per;
    float* dst = b.images.data() + i * per;
    if (augment) augment_crop_flip(src, dst, s.c, s.h, s.w, rng);
    else std::copy_n(src, per, dst);
    b.labels.push_back(data.labels[indices[i]]);
  }
  return b;
}

BatchPrefetcher::BatchPrefetcher(const Dataset& data, std::vector<std::vector<std::size_t>> batches, bool augment,
                                 std::uint64_t seed, std::size_t capacity)
    : data_(data), batches_(std::move(batches)), augment_(augment), rng_(seed), capacity_(std::max<std::size_t>(1, capacity)) {
  worker_ = std::thread([this] { run(); });
}

BatchPrefetcher::~BatchPrefetcher() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void BatchPrefetcher::run() {
  for (const auto& indices : batches_) {
    Batch b = gather_batch(data_, indices, augment_, rng_);
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return stop_ || queue_.size() < capacity_; });
    if (stop_) return;
    queue_.push_back(std::move(b));
    ++produced_;
    cv_.notify_all();
  }
}

std::optional<Batch> BatchPrefetcher::next() {
  std::unique_lock<std::mutex> lock(mu_);
  if (consumed_ == batches_.size()) return std::nullopt;
  cv_.wait(lock, [&] { return !queue_.empty(); });
  Batch b = std::move(queue_.front());
  queue_.pop_front();
  ++consumed_;
  cv_.notify_all();
  return b;
}

}  // namespace lrnet
