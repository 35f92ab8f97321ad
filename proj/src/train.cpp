// SPDX-License-Identifier: Apache-2.0
#include "lrnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lrnet/checkpoint.hpp"

namespace lrnet {

double lr_at(double epoch, const LrSchedule& s) {
  if (epoch < 0) throw ConfigError("epoch must be non-negative");
  if (epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
  double lr = s.base_lr;
  for (double e : s.decay_epochs)
    if (epoch >= e) lr *= s.decay_factor;
  return lr;
}

template <typename T>
void Sgd<T>::step(const std::vector<ParamRef<T>>& params, double lr) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.value->shape());
  }
  if (velocity_.size() != params.size()) throw ShapeError("optimizer: parameter list changed between steps");
  const T mu = static_cast<T>(config_.momentum);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i].value;
    const Tensor<T>& g = *params[i].grad;
    Tensor<T>& v = velocity_[i];
    require_shape(g.shape(), w.shape(), params[i].name + " gradient");
    require_shape(v.shape(), w.shape(), params[i].name + " momentum buffer");
    const T decay = params[i].weight_decay ? static_cast<T>(config_.weight_decay) : T(0);
    for (std::size_t j = 0; j < w.numel(); ++j) {
      v[j] = mu * v[j] + g[j] + decay * w[j];
      w[j] -= rate * v[j];
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;

namespace {

std::size_t correct(const Tensorf& logits, const std::vector<int>& labels) {
  std::size_t hits = 0;
  const std::size_t classes = logits.c();
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const float* row = logits.data() + n * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;
    hits += static_cast<int>(best) == labels[n];
  }
  return hits;
}

void guard(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError("training diverged: loss is " + std::to_string(loss) + " in epoch " + std::to_string(epoch));
  }
}

}  // namespace

EvalResult evaluate(Network<float>& net, const Dataset& data, std::size_t batch_size) {
  EvalResult r;
  if (data.size() == 0) return r;
  std::mt19937_64 unused(0);
  double loss_sum = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(data.size(), i + batch_size); ++j) idx.push_back(j);
    Batch b = gather_batch(data, idx, false, unused);
    const Tensorf logits = net.forward(b.images, false);
    const auto x = softmax_xent_fwd(logits, std::span<const int>(b.labels));
    loss_sum += static_cast<double>(x.loss) * static_cast<double>(idx.size());
    hits += correct(logits, b.labels);
  }
  r.loss = loss_sum / static_cast<double>(data.size());
  r.top1 = static_cast<double>(hits) / static_cast<double>(data.size());
  return r;
}

double train_step(Network<float>& net, Sgd<float>& opt, const Tensorf& images, const std::vector<int>& labels,
                  double lr) {
  net.zero_grad();
  const Tensorf logits = net.forward(images, true);
  const auto x = softmax_xent_fwd(logits, std::span<const int>(labels));
  net.backward(softmax_xent_bwd(x.probs, std::span<const int>(labels)));
  opt.step(net.parameters(), lr);
  return x.loss;
}

std::string format_metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g", m.epoch, m.lr, m.train_loss, m.train_top1,
                m.val_loss, m.val_top1);
  return buf;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.lrnc", epoch);
  return dir / buf;
}

std::vector<EpochMetrics> train(Network<float>& net, const Dataset& train_data, const Dataset& val_data,
                                const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (train_data.size() < 2) throw ConfigError("training needs at least two examples");
  std::mt19937_64 rng(cfg.seed);
  Sgd<float> opt(cfg.sgd);
  std::vector<EpochMetrics> log;

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw ConfigError("cannot write metrics to " + cfg.metrics_path.string());
    metrics << kMetricsHeader << '\n';
  }
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  auto finish_epoch = [&](EpochMetrics m) {
    const EvalResult v = evaluate(net, val_data);
    m.val_loss = v.loss;
    m.val_top1 = v.top1;
    log.push_back(m);
    if (metrics.is_open()) metrics << format_metrics_row(m) << std::endl;
    if (!cfg.checkpoint_dir.empty()) {
      std::ostringstream state;
      state << rng;
      CheckpointMeta meta;
      meta.epoch = m.epoch;
      meta.rng_state = state.str();
      save_checkpoint(checkpoint_path(cfg.checkpoint_dir, m.epoch), snapshot(net, meta));
    }
    if (cfg.on_epoch) cfg.on_epoch(m);
  };

  {
    EpochMetrics m;
    const EvalResult t = evaluate(net, train_data);
    guard(t.loss, 0);
    m.train_loss = t.loss;
    m.train_top1 = t.top1;
    finish_epoch(m);
  }

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = epoch_batches(train_data.size(), cfg.batch_size, true, rng);
    const std::size_t iters = batches.size();
    BatchPrefetcher loader(train_data, std::move(batches), cfg.augment, rng());
    double loss_sum = 0;
    std::size_t hits = 0;
    std::size_t seen = 0;
    double lr = 0;
    for (std::size_t it = 0; it < iters; ++it) {
      std::optional<Batch> b = loader.next();
      lr = lr_at(epoch - 1 + static_cast<double>(it) / static_cast<double>(iters), cfg.schedule);
      net.zero_grad();
      const Tensorf logits = net.forward(b->images, true);
      const auto x = softmax_xent_fwd(logits, std::span<const int>(b->labels));
      guard(x.loss, epoch);
      net.backward(softmax_xent_bwd(x.probs, std::span<const int>(b->labels)));
      opt.step(net.parameters(), lr);
      loss_sum += static_cast<double>(x.loss) * static_cast<double>(b->labels.size());
      hits += correct(logits, b->labels);
      seen += b->labels.size();
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_top1 = static_cast<double>(hits) / static_cast<double>(seen);
    finish_epoch(m);
  }
  return log;
}

}  // namespace lrnet
