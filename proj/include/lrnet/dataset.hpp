// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "lrnet/tensor.hpp"

namespace lrnet {

struct Dataset {
  Tensorf images;           // (N, 3, H, W)
  std::vector<int> labels;  // N entries in [0, num_classes)
  int num_classes = 10;

  std::size_t size() const { return labels.size(); }
  /// First `count` examples (or all of them if fewer).
  Dataset head(std::size_t count) const;
};

/// Per-channel input standardization applied after scaling pixels to [0, 1].
struct Standardization {
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> stddev{0.2470f, 0.2435f, 0.2616f};
};

constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;

/// Raw CIFAR-10 records: one label byte and 3072 pixel bytes (R, G, B planes).
struct CifarRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // labels.size() * 3072

  std::size_t size() const { return labels.size(); }
};

/// Throws FormatError for a truncated file or a label above 9.
CifarRecords read_cifar10_records(const std::filesystem::path& file);
void write_cifar10_records(const std::filesystem::path& file, const CifarRecords& records);

Dataset records_to_dataset(const CifarRecords& records, const Standardization& norm = {});

/// Concatenates the given record files (e.g. data_batch_1..5.bin), keeping at
/// most `limit` examples when limit > 0.
Dataset load_cifar10(const std::vector<std::filesystem::path>& files, std::size_t limit = 0,
                     const Standardization& norm = {});

/// Standard file names inside a cifar-10-batches-bin directory.
std::vector<std::filesystem::path> cifar10_train_files(const std::filesystem::path& dir);
std::vector<std::filesystem::path> cifar10_test_files(const std::filesystem::path& dir);

/// Linearly separable synthetic images: each class has a fixed random
/// template, examples are template plus Gaussian noise.
Dataset make_blobs(std::size_t count, int num_classes, int height, int width, std::uint64_t seed,
                   float noise = 0.5f);

/// Pad by 4 with zeros, take a random crop of the original size, and flip
/// horizontally with probability 1/2.
void augment_crop_flip(const float* src, float* dst, std::size_t channels, std::size_t height, std::size_t width,
                       std::mt19937_64& rng);

struct Batch {
  Tensorf images;
  std::vector<int> labels;
};

/// Splits a shuffled epoch into batches. A trailing batch of one example is
/// dropped because training-mode batch norm cannot use it.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size, bool shuffle,
                                                    std::mt19937_64& rng);

Batch gather_batch(const Dataset& data, const std::vector<std::size_t>& indices, bool augment,
                   std::mt19937_64& rng);

/// Assembles batches on a background thread, at most `capacity` ahead of the
/// consumer. Batch contents depend only on the seed, not on timing.
class BatchPrefetcher {
 public:
  BatchPrefetcher(const Dataset& data, std::vector<std::vector<std::size_t>> batches, bool augment,
                  std::uint64_t seed, std::size_t capacity = 2);
  ~BatchPrefetcher();
  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  /// Next batch, or nullopt once the epoch is exhausted.
  std::optional<Batch> next();

 private:
  void run();

  const Dataset& data_;
  std::vector<std::vector<std::size_t>> batches_;
  bool augment_;
  std::mt19937_64 rng_;
  std::size_t capacity_;
  std::deque<Batch> queue_;
  std::size_t produced_ = 0;
  std::size_t consumed_ = 0;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::thread worker_;
};

}  // namespace lrnet
