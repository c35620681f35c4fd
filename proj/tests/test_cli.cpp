#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

fs::path scratch() {
  static const fs::path d = [] {
    const auto p = fs::temp_directory_path() / "mixdiff_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Run cli(const std::string& args) {
  const auto err_file = scratch() / "stderr.txt";
  const std::string cmd = std::string(MIXDIFF_CLI) + " " + args + " 2>" + err_file.string();
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  char buf[512];
  while (std::size_t k = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, k);
  const int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.err = slurp(err_file);
  return r;
}

std::string dir_contents(const fs::path& d) {
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(d)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += f.filename().string() + "\n" + slurp(f);
  return all;
}

const std::string kSmallConfig = R"({"hidden": 8, "layers": 1, "embed_dim": 4, "batch_size": 32, "epochs": 2, "seed": 5})";

// one tiny dataset + checkpoint shared by the tests below
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto s = scratch();
    std::ofstream(s / "small.json") << kSmallConfig;
    ASSERT_EQ(cli("gen-toy --out " + (s / "data").string() + " --n 96 --seq-len 6 --seed 3").code, 0);
    ASSERT_EQ(cli("train --data " + (s / "data").string() + " --config " + (s / "small.json").string() + " --out " +
                  (s / "run").string()).code,
              0);
  }
  static fs::path data() { return scratch() / "data"; }
  static fs::path run() { return scratch() / "run"; }
};

}  // namespace

TEST(CliUsage, ExitCodesAndDiagnosticLine) {
  auto r = cli("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error kind=usage"), std::string::npos) << r.err;
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("gen-toy --n 5").code, 1);  // --out missing
  EXPECT_EQ(cli("gen-toy --out x --n notanumber").code, 1);
  r = cli("eval --real /nonexistent/a --synth /nonexistent/b --out " + (scratch() / "r.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error kind=format"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(CliGenToy, SameSeedGivesIdenticalDirectories) {
  const auto a = scratch() / "toy_a", b = scratch() / "toy_b", c = scratch() / "toy_c";
  ASSERT_EQ(cli("gen-toy --out " + a.string() + " --n 40 --seed 9").code, 0);
  ASSERT_EQ(cli("gen-toy --out " + b.string() + " --n 40 --seed 9").code, 0);
  ASSERT_EQ(cli("gen-toy --out " + c.string() + " --n 40 --seed 10").code, 0);
  EXPECT_EQ(dir_contents(a), dir_contents(b));
  EXPECT_NE(slurp(a / "num.f32"), slurp(c / "num.f32"));
  const auto cfg = json::parse(slurp(a / "run_config.json"));
  EXPECT_EQ(cfg["command"], "gen-toy");
  EXPECT_EQ(cfg["args"]["seed"], 9);
}

TEST_F(CliPipeline, TrainWritesCheckpointLogAndConfig) {
  EXPECT_TRUE(fs::exists(run() / "checkpoint.bin"));
  const auto log = slurp(run() / "metrics.csv");
  EXPECT_EQ(log.rfind("step,", 0), 0u) << log.substr(0, 80);
  const auto cfg = json::parse(slurp(run() / "run_config.json"));
  EXPECT_EQ(cfg["args"]["config"]["hidden"], 8);
  EXPECT_EQ(cfg["args"]["config"]["ema_decay"], 0.997);  // defaults resolved into the log
}

TEST_F(CliPipeline, TrainIsBitReproducibleAndLeavesInputsAlone) {
  const auto before = dir_contents(data());
  const auto again = scratch() / "run_again";
  ASSERT_EQ(cli("train --data " + data().string() + " --config " + (scratch() / "small.json").string() + " --out " +
                again.string()).code,
            0);
  EXPECT_EQ(slurp(run() / "checkpoint.bin"), slurp(again / "checkpoint.bin"));
  EXPECT_EQ(slurp(run() / "metrics.csv"), slurp(again / "metrics.csv"));
  EXPECT_EQ(dir_contents(data()), before);
}

TEST_F(CliPipeline, TrainConfigErrors) {
  std::ofstream(scratch() / "unknown.json") << R"({"hidden": 8, "learning_rat": 0.1})";
  auto r = cli("train --data " + data().string() + " --config " + (scratch() / "unknown.json").string() + " --out " +
               (scratch() / "bad_run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("learning_rat"), std::string::npos) << r.err;
  std::ofstream(scratch() / "broken.json") << "{";
  EXPECT_EQ(cli("train --data " + data().string() + " --config " + (scratch() / "broken.json").string() + " --out " +
                (scratch() / "bad_run").string()).code,
            2);
}

TEST_F(CliPipeline, DivergentTrainingIsNumericFailure) {
  std::ofstream(scratch() / "diverge.json") << R"({"hidden": 8, "layers": 1, "embed_dim": 4, "batch_size": 32,
      "epochs": 3, "learning_rate": 1e30})";
  const auto r = cli("train --data " + data().string() + " --config " + (scratch() / "diverge.json").string() +
                     " --out " + (scratch() / "diverged").string());
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("error kind=numeric"), std::string::npos) << r.err;
}

TEST_F(CliPipeline, SampleIsBitReproducibleWithPaperDefaults) {
  const auto a = scratch() / "s_a", b = scratch() / "s_b", c = scratch() / "s_c";
  const std::string ck = (run() / "checkpoint.bin").string();
  ASSERT_EQ(cli("sample --ckpt " + ck + " --n 20 --seed 4 --out " + a.string()).code, 0);
  ASSERT_EQ(cli("sample --ckpt " + ck + " --n 20 --seed 4 --out " + b.string()).code, 0);
  ASSERT_EQ(cli("sample --ckpt " + ck + " --n 20 --seed 5 --out " + c.string()).code, 0);
  EXPECT_EQ(dir_contents(a), dir_contents(b));
  EXPECT_NE(slurp(a / "num.f32"), slurp(c / "num.f32"));
  const auto cfg = json::parse(slurp(a / "run_config.json"));
  EXPECT_EQ(cfg["args"]["steps"], 50);
  EXPECT_EQ(cfg["args"]["w_num"], 2.0);
  EXPECT_EQ(cfg["args"]["w_cat"], 2.0);
  const auto man = json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(man["n"], 20);
  EXPECT_EQ(man["seq_len"], 6);
}

TEST_F(CliPipeline, SampleModesAndErrors) {
  const std::string ck = (run() / "checkpoint.bin").string();
  const auto u = scratch() / "s_uncond";
  ASSERT_EQ(cli("sample --ckpt " + ck + " --n 8 --steps 5 --mode uncond --out " + u.string()).code, 0);
  EXPECT_EQ(json::parse(slurp(u / "manifest.json"))["labels_present"], false);
  EXPECT_EQ(cli("sample --ckpt " + ck + " --n 8 --mode sideways --out " + (scratch() / "s_bad").string()).code, 1);
  std::string bytes = slurp(ck);
  bytes[bytes.size() / 2] ^= 0x10;
  std::ofstream(scratch() / "tampered.bin", std::ios::binary) << bytes;
  const auto r = cli("sample --ckpt " + (scratch() / "tampered.bin").string() + " --n 4 --out " +
                     (scratch() / "s_bad2").string());
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliPipeline, EvalSelfComparison) {
  const auto rep_path = scratch() / "self.json";
  const auto r = cli("eval --real " + data().string() + " --synth " + data().string() + " --out " + rep_path.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(slurp(rep_path));
  for (const char* m : {"mmd", "corr_mae", "acf_mse", "dtw", "tvd", "trans_dist"})
    EXPECT_EQ(rep["metrics"][m]["value"].get<double>(), 0.0) << m;
  EXPECT_NEAR(rep["metrics"]["c2st_logistic"]["value"].get<double>(), 0.5, 0.05);
  EXPECT_NEAR(rep["metrics"]["c2st_gru"]["value"].get<double>(), 0.5, 0.05);
  EXPECT_EQ(rep["metrics"]["c2st_logistic"]["per_seed"].size(), 5u);
  EXPECT_TRUE(rep["skipped"].contains("tstr"));
  EXPECT_TRUE(fs::exists(rep_path.string() + ".run_config.json"));
}

TEST_F(CliPipeline, EvalMetricListAndMismatch) {
  const auto rep_path = scratch() / "subset.json";
  ASSERT_EQ(cli("eval --real " + data().string() + " --synth " + data().string() + " --metrics tvd,dtw --out " +
                rep_path.string()).code,
            0);
  EXPECT_EQ(json::parse(slurp(rep_path))["metrics"].size(), 2u);
  EXPECT_EQ(cli("eval --real " + data().string() + " --synth " + data().string() + " --metrics tvd,nope --out " +
                rep_path.string()).code,
            1);
  const auto other = scratch() / "toy_len24";
  ASSERT_EQ(cli("gen-toy --out " + other.string() + " --n 20").code, 0);
  EXPECT_EQ(cli("eval --real " + data().string() + " --synth " + other.string() + " --out " + rep_path.string()).code,
            2);
}

TEST(CliGradCheck, SuitePasses) {
  const auto r = cli("grad-check --double");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("grad-check passed"), std::string::npos) << r.out;
}
