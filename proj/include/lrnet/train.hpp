// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lrnet/dataset.hpp"
#include "lrnet/model.hpp"

namespace lrnet {

struct LrSchedule {
  double base_lr = 0.05;
  double warmup_epochs = 5;
  std::vector<double> decay_epochs;
  double decay_factor = 0.1;
};

/// Linear ramp 0 -> base over the warm-up, then base * factor^(decays passed).
double lr_at(double epoch, const LrSchedule& schedule);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// v <- mu * v + g + lambda * w;  w <- w - lr * v.
/// Weight decay applies only to parameters flagged for it.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig config = {}) : config_(config) {}
  void step(const std::vector<ParamRef<T>>& params, double lr);
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  SgdConfig config_;
  std::vector<Tensor<T>> velocity_;
};

struct EvalResult {
  double loss = 0;
  double top1 = 0;  // fraction in [0, 1]
};

EvalResult evaluate(Network<float>& net, const Dataset& data, std::size_t batch_size = 256);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_top1 = 0;
  double val_loss = 0;
  double val_top1 = 0;
};

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 128;
  LrSchedule schedule{};
  SgdConfig sgd{};
  std::uint64_t seed = 0;
  bool augment = true;
  std::filesystem::path metrics_path;   // CSV; empty disables
  std::filesystem::path checkpoint_dir; // empty disables
  /// Called after each epoch (including the initial epoch 0 row).
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_top1,val_loss,val_top1";
std::string format_metrics_row(const EpochMetrics& m);

/// Row 0 holds the initial model's metrics; rows 1..epochs follow training.
/// Throws NumericError when the loss becomes NaN or infinite.
std::vector<EpochMetrics> train(Network<float>& net, const Dataset& train_data, const Dataset& val_data,
                                const TrainConfig& config);

/// One full-batch SGD step on (images, labels); returns the loss before the step.
double train_step(Network<float>& net, Sgd<float>& opt, const Tensorf& images, const std::vector<int>& labels,
                  double lr);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch);

}  // namespace lrnet
