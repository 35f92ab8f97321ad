// SPDX-License-Identifier: Apache-2.0
// Runs the built command-line tool and checks exit codes and outputs.
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lrnet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run lrnet(const std::string& args) {
  const fs::path err_file = fs::temp_directory_path() / "lrnet_cli_stderr.txt";
  const std::string cmd = std::string(LRNET_CLI) + " " + args + " 2>" + err_file.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream e(err_file);
  std::stringstream ss;
  ss << e.rdbuf();
  r.err = ss.str();
  return r;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) v.push_back(l);
  return v;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> v;
  std::istringstream is(line);
  for (std::string f; std::getline(is, f, ',');) v.push_back(f);
  return v;
}

std::string read(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::string kTinyTrain =
    "--model lr26 --small-image --width-mult 0.125 --train-limit 64 --val-limit 32 "
    "--batch-size 16 --workers 1 --seed 3";

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(lrnet("").code == 2);
  CHECK(lrnet("frobnicate").code == 2);
  CHECK(lrnet("flops --kernel-size notanumber").code == 2);
  CHECK(lrnet("flops --variant cosine").code == 2);
  CHECK(lrnet("--help").code == 0);
}

TEST_CASE("gradcheck passes, and a corrupted backward fails naming the prior parameters") {
  const Run ok = lrnet("gradcheck --variant sqdiff");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  const Run bad = lrnet("gradcheck --variant sqdiff --geo network --mutate negate-theta-g");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("theta_g") != std::string::npos);
  CHECK(lrnet("gradcheck --mutate nonsense").code == 2);
}

TEST_CASE("gradcheck with a single-tap window") {
  const Run r = lrnet("gradcheck --kernel-size 1 --variant mul");
  CHECK(r.code == 0);
}

TEST_CASE("flops reports and checks published totals") {
  const Run r50 = lrnet("flops --model resnet50 --assert-paper");
  CHECK(r50.code == 0);
  CHECK(r50.out.find("published resnet50") != std::string::npos);
  const Run r18 = lrnet("flops --model lr18");
  CHECK(r18.code == 0);
  CHECK(r18.out.find("depth 18") != std::string::npos);
  CHECK(lrnet("flops --model resnet101 --assert-paper").code == 2);

  const fs::path dir = scratch("flops");
  CHECK(lrnet("flops --model lr26 --csv " + (dir / "r.csv").string()).code == 0);
  CHECK(lines(read(dir / "r.csv")).front() == "layer,kind,params,flops,exact_flops,formula_flops,out_c,out_h,out_w");
  fs::remove_all(dir);
}

TEST_CASE("config file fills flags that were not given") {
  const fs::path dir = scratch("config");
  std::ofstream(dir / "c.json") << R"({"model": "resnet18", "classes": 10})";
  const Run a = lrnet("flops --config " + (dir / "c.json").string());
  CHECK(a.code == 0);
  CHECK(a.out.find("depth 18") != std::string::npos);
  CHECK(a.err.find("\"classes\":10") != std::string::npos);
  const Run b = lrnet("flops --model resnet50 --config " + (dir / "c.json").string());
  CHECK(b.out.find("depth 50") != std::string::npos);
  std::ofstream(dir / "bad.json") << "[1, 2]";
  CHECK(lrnet("flops --config " + (dir / "bad.json").string()).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("bench output format and argument checks") {
  const Run r = lrnet("bench --shape 1,16,8,8 --kernel-size 3 --repeats 2 --workers 1");
  CHECK(r.code == 0);
  const auto l = lines(r.out);
  REQUIRE(l.size() == 4);
  CHECK(l[0] == "kernel,shape,median_us,p10_us,p90_us");
  CHECK(l[1].rfind("reference,1x16x8x8,", 0) == 0);
  CHECK(l[2].rfind("optimized,1x16x8x8,", 0) == 0);
  CHECK(l[3].rfind("conv,", 0) == 0);
  const Run zero = lrnet("bench --repeats 0");
  CHECK(zero.code == 2);
  CHECK(zero.err.find("repeats must be positive") != std::string::npos);
  CHECK(lrnet("bench --shape 1,16,8").code == 2);
}

TEST_CASE("train, eval and export-prior") {
  const fs::path dir = scratch("train");
  SUBCASE("zero epochs writes only checkpoint 0") {
    const Run r = lrnet("train " + kTinyTrain + " --data synthetic --epochs 0 --out " + (dir / "z").string());
    CHECK(r.code == 0);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir / "z" / "checkpoints")) files.push_back(e.path().filename());
    CHECK(files == std::vector<std::string>{"epoch_000.lrnc"});

    const Run prior = lrnet("export-prior --checkpoint " + (dir / "z" / "checkpoints" / "epoch_000.lrnc").string() +
                            " --layer stem.lr");
    CHECK(prior.code == 0);
    const auto rows = lines(prior.out);
    REQUIRE(rows.size() > 1);
    CHECK(rows[0] == "table,group,dy,dx-3,dx-2,dx-1,dx0,dx1,dx2,dx3");
    std::size_t logit_rows = 0;
    std::size_t softmax_rows = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      std::istringstream is(rows[i]);
      std::string kind, group, dy, cell;
      std::getline(is, kind, ',');
      std::getline(is, group, ',');
      std::getline(is, dy, ',');
      (kind == "logit" ? logit_rows : softmax_rows) += 1;
      while (std::getline(is, cell, ','))
        CHECK(std::stod(cell) == doctest::Approx(kind == "logit" ? 0.0 : 1.0 / 49).epsilon(1e-6));
    }
    CHECK(logit_rows == softmax_rows);
    CHECK(logit_rows % 7 == 0);  // groups times k rows
    CHECK(lrnet("export-prior --checkpoint " + (dir / "z" / "checkpoints" / "epoch_000.lrnc").string() +
                " --layer no.such.layer")
              .code == 2);
  }
  SUBCASE("eval reproduces the logged validation metrics") {
    const Run r = lrnet("train " + kTinyTrain + " --data synthetic --epochs 1 --out " + (dir / "one").string());
    REQUIRE(r.code == 0);
    const auto logged = lines(read(dir / "one" / "metrics.csv"));
    REQUIRE(logged.size() == 3);
    const auto last = fields(logged.back());  // epoch,lr,train_loss,train_top1,val_loss,val_top1
    REQUIRE(last.size() == 6);
    const Run e = lrnet("eval --data synthetic --train-limit 64 --val-limit 32 --workers 1 --seed 3 --checkpoint " +
                        (dir / "one" / "checkpoints" / "epoch_001.lrnc").string());
    CHECK(e.code == 0);
    const auto out = lines(e.out);
    REQUIRE(out.size() == 2);
    CHECK(out[1] == "1," + last[4] + "," + last[5]);
  }
  SUBCASE("missing inputs are usage errors") {
    const Run r = lrnet("train " + kTinyTrain + " --data cifar10 --data-dir " + (dir / "absent").string() +
                        " --out " + (dir / "x").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("not found") != std::string::npos);
    CHECK(lrnet("eval --checkpoint " + (dir / "absent.lrnc").string()).code == 2);
  }
  fs::remove_all(dir);
}
