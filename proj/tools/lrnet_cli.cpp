// SPDX-License-Identifier: Apache-2.0
// lrnet: gradient checks, cost reports, benchmarks, training and prior export.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lrnet/checkpoint.hpp"
#include "lrnet/cost.hpp"
#include "lrnet/dataset.hpp"
#include "lrnet/gradcheck.hpp"
#include "lrnet/model.hpp"
#include "lrnet/parallel.hpp"
#include "lrnet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lrnet;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every knob a subcommand may read. Values start at the built-in defaults,
// then the config file, then explicit flags.
struct Settings {
  std::string model = "lr26";
  int kernel_size = 0;    // 0 = per-command default
  int channel_share = 0;  // 0 = per-command default
  std::string variant = "sqdiff";
  int qk_dim = 1;
  std::string geo = "network";
  std::string norm = "softmax";
  std::uint64_t seed = 0;
  int workers = 0;  // 0 = available cores
  bool assert_paper = false;

  // flops / train
  std::string netspec;
  bool small_image = false;
  int input_size = 224;
  int classes = 1000;
  double width_mult = 1.0;

  // gradcheck
  std::string mutate = "none";

  // bench
  std::string shape = "8,64,56,56";
  std::string kernels = "reference,optimized,conv";
  int repeats = 3;
  std::string csv;

  // train / eval
  std::string data = "synthetic";
  std::string data_dir;
  std::size_t train_limit = 5000;
  std::size_t val_limit = 1000;
  int epochs = 20;
  std::size_t batch_size = 128;
  double lr = 0.05;
  double warmup = 5;
  std::vector<double> decay;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  bool augment = true;
  std::string out = "run";
  std::string checkpoint;
  std::string layer = "stem.lr";
};

json to_json(const Settings& s) {
  return json{{"model", s.model},         {"kernel_size", s.kernel_size}, {"channel_share", s.channel_share},
              {"variant", s.variant},     {"qk_dim", s.qk_dim},           {"geo", s.geo},
              {"norm", s.norm},           {"seed", s.seed},               {"workers", s.workers},
              {"assert_paper", s.assert_paper}, {"netspec", s.netspec},   {"small_image", s.small_image},
              {"input_size", s.input_size}, {"classes", s.classes},       {"width_mult", s.width_mult},
              {"mutate", s.mutate},       {"shape", s.shape},             {"kernels", s.kernels},
              {"repeats", s.repeats},     {"csv", s.csv},                 {"data", s.data},
              {"data_dir", s.data_dir},   {"train_limit", s.train_limit}, {"val_limit", s.val_limit},
              {"epochs", s.epochs},       {"batch_size", s.batch_size},   {"lr", s.lr},
              {"warmup", s.warmup},       {"decay", s.decay},             {"weight_decay", s.weight_decay},
              {"momentum", s.momentum},   {"augment", s.augment},         {"out", s.out},
              {"checkpoint", s.checkpoint}, {"layer", s.layer}};
}

// Registers a flag and remembers how to fill it from the config file when
// the flag itself was not given.
class Binder {
 public:
  explicit Binder(CLI::App* app) : app_(app) {}

  template <typename V>
  CLI::Option* bind(const std::string& flag, V& target, const std::string& help) {
    CLI::Option* opt = app_->add_option(flag, target, help);
    hooks_.push_back({opt, key_of(flag), [&target](const json& j) { target = j.get<V>(); }});
    return opt;
  }
  CLI::Option* bind_flag(const std::string& flag, bool& target, const std::string& help) {
    CLI::Option* opt = app_->add_flag(flag, target, help);
    hooks_.push_back({opt, key_of(flag), [&target](const json& j) { target = j.get<bool>(); }});
    return opt;
  }

  void apply(const json& config) const {
    for (const auto& h : hooks_) {
      if (h.option->count() > 0 || !config.contains(h.key)) continue;
      try {
        h.assign(config.at(h.key));
      } catch (const json::exception& e) {
        throw UsageError("config key '" + h.key + "': " + e.what());
      }
    }
  }

 private:
  static std::string key_of(std::string flag) {
    const auto comma = flag.find(',');
    if (comma != std::string::npos) flag = flag.substr(comma + 1);
    flag.erase(0, flag.find_first_not_of('-'));
    std::replace(flag.begin(), flag.end(), '-', '_');
    return flag;
  }

  struct Hook {
    CLI::Option* option;
    std::string key;
    std::function<void(const json&)> assign;
  };
  CLI::App* app_;
  std::vector<Hook> hooks_;
};

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void load_config(const std::string& path, const Binder& binder) {
  if (path.empty()) return;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + ": top level must be an object");
  binder.apply(j);
}

void echo(const std::string& command, const Settings& s) {
  std::cerr << "effective config (" << command << "): " << to_json(s).dump() << "\n";
}

NetSpec spec_from(const Settings& s) {
  NetSpec spec = s.netspec.empty() ? preset(s.model) : netspec_from_json(read_file(s.netspec));
  spec.lr.kernel = s.kernel_size;
  spec.lr.channels_per_group = s.channel_share;
  spec.lr.variant = parse_composability(s.variant);
  spec.lr.qk_dim = s.qk_dim;
  spec.lr.geo_mode = parse_geo_mode(s.geo);
  spec.lr.normalization = parse_normalization(s.norm);
  spec.seed = s.seed;
  if (s.small_image) {
    spec.small_image = true;
    spec.input_h = spec.input_w = s.input_size == 224 ? 32 : s.input_size;
    spec.num_classes = s.classes == 1000 ? 10 : s.classes;
  } else {
    spec.input_h = spec.input_w = s.input_size;
    spec.num_classes = s.classes;
  }
  if (s.width_mult != 1.0) spec = scale_widths(spec, s.width_mult);
  spec.validate();
  return spec;
}

// --- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const Settings& s, const std::vector<std::string>& only) {
  set_num_workers(1);
  GradCheckOptions o;
  o.seed = s.seed;
  o.kernel = s.kernel_size;
  o.qk_dim = s.qk_dim;
  o.channels_per_group = std::min(s.channel_share, o.channels);
  if (s.mutate == "negate-theta-g") o.mutation = Mutation::negate_theta_g;
  else if (s.mutate == "drop-qk-path") o.mutation = Mutation::drop_query_key_path;
  else if (s.mutate != "none") throw UsageError("unknown mutation '" + s.mutate + "'");

  GradCheckReport report = gradcheck_sweep(o);
  // Optional restriction of the sweep to the axes given on the command line.
  auto keep = [&](const GradCheckCase& c) {
    for (const auto& key : only) {
      if (key == "variant" && c.config.variant != parse_composability(s.variant)) return false;
      if (key == "geo" && c.config.geo_mode != parse_geo_mode(s.geo)) return false;
      if (key == "norm" && c.config.normalization != parse_normalization(s.norm)) return false;
    }
    return true;
  };
  std::erase_if(report.cases, [&](const GradCheckCase& c) { return !keep(c); });
  std::cout << report.to_text();
  if (!report.pass()) {
    for (const auto& f : report.failures()) std::cout << "failed: " << f << "\n";
    return kFailed;
  }
  return kOk;
}

// --- flops ------------------------------------------------------------------

int cmd_flops(const Settings& s) {
  set_num_workers(1);
  const NetSpec spec = spec_from(s);
  const NetworkPlan plan = plan_network(spec);
  const CostReport report = network_cost(plan);
  std::cout << report.to_text();
  if (!s.csv.empty()) {
    std::ofstream f(s.csv);
    if (!f) throw UsageError("cannot write " + s.csv);
    f << report.to_csv();
  }
  if (!s.assert_paper) return kOk;
  const auto target = published_target(spec.name);
  if (!target) throw UsageError("no published totals for model '" + spec.name + "'");
  const TargetCheck c = check_target(report, *target);
  std::printf("published %s: params %.2fM vs %.1fM (%+.1f%%, tol %.0f%%) %s; flops %.3fG vs %.1fG (%+.1f%%, tol %.0f%%) %s\n",
              target->model.c_str(), report.total_params / 1e6, target->params_millions, 100 * c.params_rel,
              100 * target->params_tolerance, c.params_ok ? "ok" : "MISMATCH", report.total_flops / 1e9,
              target->gflops, 100 * c.flops_rel, 100 * target->flops_tolerance, c.flops_ok ? "ok" : "MISMATCH");
  return c.ok() ? kOk : kFailed;
}

// --- bench ------------------------------------------------------------------

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const std::size_t i = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) ;
  return v[std::min(v.size() - 1, i == 0 ? 0 : i - 1)];
}

int cmd_bench(const Settings& s) {
  if (s.repeats <= 0) throw UsageError("repeats must be positive");
  if (s.workers > 0) set_num_workers(s.workers);
  std::vector<std::size_t> dims;
  {
    std::stringstream ss(s.shape);
    std::string tok;
    while (std::getline(ss, tok, ',')) dims.push_back(static_cast<std::size_t>(std::stoul(tok)));
  }
  if (dims.size() != 4) throw UsageError("--shape must be N,C,H,W");
  const Shape shape{dims[0], dims[1], dims[2], dims[3]};
  LocalRelationConfig cfg;
  cfg.channels = static_cast<int>(shape.c);
  cfg.kernel = s.kernel_size;
  cfg.channels_per_group = s.channel_share;
  cfg.variant = parse_composability(s.variant);
  cfg.qk_dim = s.qk_dim;
  cfg.geo_mode = parse_geo_mode(s.geo);
  cfg.normalization = parse_normalization(s.norm);
  cfg.validate();

  std::mt19937_64 rng(s.seed);
  Tensorf x(shape);
  fill_normal(x, rng, 0.0, 1.0);
  auto params = init_local_relation<float>(cfg, rng);

  // A 3x3 convolution with the channel count that costs the same FLOPs.
  const double lr_flops = lr_layer_flops(cfg, shape.h, shape.w).headline;
  const std::size_t conv_c = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(std::sqrt(lr_flops / (9.0 * static_cast<double>(shape.plane()))))));
  Conv2d<float> conv(conv_c, conv_c, 3, 1);
  fill_normal(conv.weight, rng, 0.0, 0.1);
  Tensorf xc({shape.n, conv_c, shape.h, shape.w});
  fill_normal(xc, rng, 0.0, 1.0);

  std::ostringstream out;
  out << "kernel,shape,median_us,p10_us,p90_us\n";
  std::stringstream list(s.kernels);
  std::string kernel;
  while (std::getline(list, kernel, ',')) {
    std::function<void()> run;
    Shape timed = shape;
    if (kernel == "reference") run = [&] { (void)lr_forward(x, params, cfg); };
    else if (kernel == "optimized") run = [&] { (void)lr_forward_optimized(x, params, cfg); };
    else if (kernel == "conv") {
      run = [&] { (void)conv2d_fwd(xc, conv); };
      timed = xc.shape();
    } else throw UsageError("unknown kernel '" + kernel + "'");
    std::vector<double> us;
    for (int i = 0; i < s.repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      run();
      const auto t1 = std::chrono::steady_clock::now();
      us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    }
    const std::string label = std::to_string(timed.n) + "x" + std::to_string(timed.c) + "x" +
                              std::to_string(timed.h) + "x" + std::to_string(timed.w);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%.1f,%.1f,%.1f\n", kernel.c_str(), label.c_str(), percentile(us, 0.5),
                  percentile(us, 0.1), percentile(us, 0.9));
    out << line;
  }
  std::cout << out.str();
  if (!s.csv.empty()) {
    std::ofstream f(s.csv);
    if (!f) throw UsageError("cannot write " + s.csv);
    f << out.str();
  }
  return kOk;
}

// --- train / eval -----------------------------------------------------------

struct Splits {
  Dataset train;
  Dataset val;
};

Splits load_data(const Settings& s, const NetSpec& spec) {
  if (s.data == "synthetic") {
    const std::size_t n_train = s.train_limit;
    Dataset all = make_blobs(n_train + s.val_limit, spec.num_classes, spec.input_h, spec.input_w, s.seed + 7);
    Splits sp;
    sp.train = all.head(n_train);
    Dataset rest;
    rest.num_classes = all.num_classes;
    rest.images = Tensorf({s.val_limit, 3, all.images.h(), all.images.w()});
    std::copy_n(all.images.data() + n_train * 3 * all.images.h() * all.images.w(), rest.images.numel(),
                rest.images.data());
    rest.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(n_train), all.labels.end());
    sp.val = std::move(rest);
    return sp;
  }
  if (s.data == "cifar10") {
    if (s.data_dir.empty()) throw UsageError("--data cifar10 needs --data-dir");
    if (!fs::is_directory(s.data_dir)) throw UsageError("dataset directory not found: " + s.data_dir);
    for (const auto& f : cifar10_train_files(s.data_dir))
      if (!fs::exists(f)) throw UsageError("missing dataset file " + f.string());
    Splits sp;
    sp.train = load_cifar10(cifar10_train_files(s.data_dir), s.train_limit);
    sp.val = load_cifar10(cifar10_test_files(s.data_dir), s.val_limit);
    return sp;
  }
  throw UsageError("unknown dataset kind '" + s.data + "'");
}

int cmd_train(const Settings& s) {
  if (s.workers > 0) set_num_workers(s.workers);
  const NetSpec spec = spec_from(s);
  Splits data = load_data(s, spec);
  Network<float> net = build_network<float>(spec);
  TrainConfig cfg;
  cfg.epochs = s.epochs;
  cfg.batch_size = s.batch_size;
  cfg.schedule.base_lr = s.lr;
  cfg.schedule.warmup_epochs = s.warmup;
  cfg.schedule.decay_epochs = s.decay;
  cfg.sgd.momentum = s.momentum;
  cfg.sgd.weight_decay = s.weight_decay;
  cfg.seed = s.seed;
  cfg.augment = s.augment;
  fs::create_directories(s.out);
  cfg.metrics_path = fs::path(s.out) / "metrics.csv";
  cfg.checkpoint_dir = fs::path(s.out) / "checkpoints";
  cfg.on_epoch = [](const EpochMetrics& m) { std::cout << format_metrics_row(m) << std::endl; };
  std::cout << kMetricsHeader << "\n";
  train(net, data.train, data.val, cfg);
  return kOk;
}

int cmd_eval(const Settings& s) {
  if (s.workers > 0) set_num_workers(s.workers);
  if (s.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  if (!fs::exists(s.checkpoint)) throw UsageError("checkpoint not found: " + s.checkpoint);
  const Checkpoint ckpt = load_checkpoint(s.checkpoint);
  Network<float> net = network_from_checkpoint(ckpt);
  const Splits data = load_data(s, net.spec());
  const EvalResult r = evaluate(net, data.val);
  std::printf("epoch,val_loss,val_top1\n%d,%.9g,%.9g\n", ckpt.meta.epoch, r.loss, r.top1);
  return kOk;
}

// --- export-prior -----------------------------------------------------------

int cmd_export_prior(const Settings& s) {
  if (s.checkpoint.empty()) throw UsageError("export-prior needs --checkpoint");
  if (!fs::exists(s.checkpoint)) throw UsageError("checkpoint not found: " + s.checkpoint);
  Network<float> net = network_from_checkpoint(load_checkpoint(s.checkpoint));
  auto* layer = dynamic_cast<LocalRelationLayer<float>*>(net.find(s.layer));
  if (!layer) throw UsageError("no local relation layer named '" + s.layer + "'");
  const auto& cfg = layer->config();
  const Tensorf table = materialize_prior(layer->params, cfg);
  const std::size_t k = static_cast<std::size_t>(cfg.kernel);
  const int r = cfg.radius();

  std::ostringstream os;
  os << "table,group,dy";
  for (int dx = -r; dx <= r; ++dx) os << ",dx" << dx;
  os << "\n";
  os.precision(9);
  for (const char* kind : {"logit", "softmax"}) {
    for (std::size_t g = 0; g < table.c(); ++g) {
      const float* t = table.plane(0, g);
      double mx = t[0];
      for (std::size_t i = 0; i < k * k; ++i) mx = std::max<double>(mx, t[i]);
      double sum = 0;
      for (std::size_t i = 0; i < k * k; ++i) sum += std::exp(t[i] - mx);
      for (std::size_t y = 0; y < k; ++y) {
        os << kind << ',' << g << ',' << static_cast<int>(y) - r;
        for (std::size_t x = 0; x < k; ++x) {
          const double v = t[y * k + x];
          os << ',' << (kind[0] == 'l' ? v : std::exp(v - mx) / sum);
        }
        os << '\n';
      }
    }
  }
  if (s.csv.empty()) std::cout << os.str();
  else {
    std::ofstream f(s.csv);
    if (!f) throw UsageError("cannot write " + s.csv);
    f << os.str();
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local relation networks: verification, cost accounting and desk-scale training"};
  app.require_subcommand(1);
  Settings s;
  std::string config_path;

  auto add_common = [&](CLI::App* sub, Binder& b) {
    sub->add_option("--config", config_path, "JSON file with default values for any flag");
    b.bind("--model", s.model, "resnet18|resnet26|resnet50|resnet101|lr18|lr26|lr50|lr101");
    b.bind("--kernel-size", s.kernel_size, "local relation window k");
    b.bind("--channel-share", s.channel_share, "channels per aggregation group m");
    b.bind("--variant", s.variant, "sqdiff|absdiff|mul");
    b.bind("--qk-dim", s.qk_dim, "query/key dimension d");
    b.bind("--geo", s.geo, "network|direct|off");
    b.bind("--norm", s.norm, "softmax|none");
    b.bind("--seed", s.seed, "random seed");
    b.bind("--workers", s.workers, "worker threads (0 = available cores)");
  };
  auto add_model = [&](Binder& b) {
    b.bind("--netspec", s.netspec, "network spec JSON (overrides --model)");
    b.bind_flag("--small-image", s.small_image, "32x32 inputs: stride-1 stem, no max-pool");
    b.bind("--input-size", s.input_size, "input resolution");
    b.bind("--classes", s.classes, "number of classes");
    b.bind("--width-mult", s.width_mult, "channel width multiplier");
  };
  auto add_data = [&](Binder& b) {
    b.bind("--data", s.data, "synthetic|cifar10");
    b.bind("--data-dir", s.data_dir, "cifar-10-batches-bin directory");
    b.bind("--train-limit", s.train_limit, "training examples to use");
    b.bind("--val-limit", s.val_limit, "validation examples to use");
  };

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the local relation backward");
  Binder b_grad(gradcheck);
  add_common(gradcheck, b_grad);
  b_grad.bind("--mutate", s.mutate, "none|negate-theta-g|drop-qk-path (checker self-test)")->group("");

  CLI::App* flops = app.add_subcommand("flops", "parameter and FLOP report");
  Binder b_flops(flops);
  add_common(flops, b_flops);
  add_model(b_flops);
  b_flops.bind_flag("--assert-paper", s.assert_paper, "fail unless totals match the published ones");
  b_flops.bind("--csv", s.csv, "also write the report as CSV");

  CLI::App* bench = app.add_subcommand("bench", "kernel timing");
  Binder b_bench(bench);
  add_common(bench, b_bench);
  b_bench.bind("--shape", s.shape, "N,C,H,W");
  b_bench.bind("--kernels", s.kernels, "comma list of reference,optimized,conv");
  b_bench.bind("--repeats", s.repeats, "timed runs per kernel");
  b_bench.bind("--csv", s.csv, "also write the timings to this file");

  CLI::App* trainc = app.add_subcommand("train", "train on CIFAR-10 or synthetic data");
  Binder b_train(trainc);
  add_common(trainc, b_train);
  add_model(b_train);
  add_data(b_train);
  b_train.bind("--epochs", s.epochs, "epochs");
  b_train.bind("--batch-size", s.batch_size, "batch size");
  b_train.bind("--lr", s.lr, "base learning rate");
  b_train.bind("--warmup", s.warmup, "warm-up epochs");
  b_train.bind("--decay", s.decay, "epochs at which the rate drops by 10x");
  b_train.bind("--weight-decay", s.weight_decay, "L2 coefficient");
  b_train.bind("--momentum", s.momentum, "momentum");
  b_train.bind("--augment", s.augment, "crop+flip augmentation (true/false)");
  b_train.bind("--out", s.out, "output directory for metrics.csv and checkpoints/");

  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  Binder b_eval(evalc);
  add_common(evalc, b_eval);
  add_data(b_eval);
  b_eval.bind("--checkpoint", s.checkpoint, "checkpoint file");

  CLI::App* exportc = app.add_subcommand("export-prior", "dump a layer's geometric prior as CSV");
  Binder b_export(exportc);
  add_common(exportc, b_export);
  b_export.bind("--checkpoint", s.checkpoint, "checkpoint file");
  b_export.bind("--layer", s.layer, "local relation layer name");
  b_export.bind("--csv", s.csv, "write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    // Gradient checks default to a small window so finite differences stay cheap.
    auto run = [&](Binder& b, const char* name, auto fn) {
      load_config(config_path, b);
      const bool small = std::string(name) == "gradcheck";
      if (s.kernel_size == 0) s.kernel_size = small ? 3 : 7;
      if (s.channel_share == 0) s.channel_share = small ? 4 : 8;
      echo(name, s);
      return fn();
    };
    if (*gradcheck) {
      std::vector<std::string> only;
      for (const char* key : {"variant", "geo", "norm"})
        if (gradcheck->count(std::string("--") + key) > 0) only.push_back(key);
      return run(b_grad, "gradcheck", [&] { return cmd_gradcheck(s, only); });
    }
    if (*flops) return run(b_flops, "flops", [&] { return cmd_flops(s); });
    if (*bench) return run(b_bench, "bench", [&] { return cmd_bench(s); });
    if (*trainc) return run(b_train, "train", [&] { return cmd_train(s); });
    if (*evalc) return run(b_eval, "eval", [&] { return cmd_eval(s); });
    if (*exportc) return run(b_export, "export-prior", [&] { return cmd_export_prior(s); });
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
