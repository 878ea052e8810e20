#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "pmk/cli.hpp"

namespace pmk {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string out, err;
};

Result pmk_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "pmk_cli_test"; }
  static void SetUpTestSuite() {
    fs::remove_all(root());
    const auto r = pmk_run({"synth", "--out", (root() / "data").string(), "--samples_per_class", "4", "--num_classes",
                            "3", "--height", "16", "--width", "16", "--t_min", "16", "--t_max", "20", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static std::string manifest() { return (root() / "data" / "manifest.json").string(); }
  static std::vector<std::string> small(std::vector<std::string> args) {
    for (const char* a : {"--height", "16", "--width", "16", "--c_dim", "4", "--epochs", "2", "--batch_size", "4",
                          "--lr", "0.001", "--deterministic"})
      args.emplace_back(a);
    return args;
  }
};

TEST_F(CliTest, TrainTwiceGivesIdenticalMetrics) {
  const auto a = root() / "run_a", b = root() / "run_b";
  ASSERT_EQ(pmk_run(small({"train", "--data", manifest(), "--out", a.string(), "--seed", "1"})).code, 0);
  ASSERT_EQ(pmk_run(small({"train", "--data", manifest(), "--out", b.string(), "--seed", "1"})).code, 0);
  EXPECT_EQ(io::read_text(a / "metrics.json"), io::read_text(b / "metrics.json"));
  for (const char* f : {"config.json", "metrics.csv", "timings.json", "gate_report.csv", "checkpoints/best.bin"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  // effective config records the flag overrides
  const auto cfg = io::load_config(a / "config.json");
  EXPECT_EQ(cfg.seed, 1u);
  EXPECT_EQ(cfg.c_dim, 4u);
}

TEST_F(CliTest, ConfigFileThenFlagOverride) {
  auto c = io::RunConfig{};
  c.epochs = 1;
  c.seed = 9;
  io::write_text_atomic(root() / "c.json", c.to_json().dump());
  const auto out = root() / "run_cfg";
  ASSERT_EQ(pmk_run(small({"train", "--config", (root() / "c.json").string(), "--data", manifest(), "--out",
                           out.string()}))
                .code,
            0);
  const auto eff = io::load_config(out / "config.json");
  EXPECT_EQ(eff.seed, 9u);
  EXPECT_EQ(eff.epochs, 2u);  // flag wins over the file
  EXPECT_EQ(eff.height, 16u);
}

TEST_F(CliTest, EncodeTrainEvalComposeLikeInProcess) {
  const auto enc = root() / "enc";
  ASSERT_EQ(pmk_run(small({"encode", "--in", manifest(), "--out", enc.string()})).code, 0);
  const auto a = root() / "direct", b = root() / "viafiles";
  ASSERT_EQ(pmk_run(small({"train", "--data", manifest(), "--out", a.string()})).code, 0);
  ASSERT_EQ(pmk_run(small({"train", "--data", (enc / "manifest.json").string(), "--out", b.string()})).code, 0);
  EXPECT_EQ(io::read_text(a / "metrics.json"), io::read_text(b / "metrics.json"));

  const auto ev = pmk_run({"eval", "--run", a.string(), "--data", (enc / "manifest.json").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto rep = json::parse(ev.out);
  const auto metrics = json::parse(io::read_text(a / "metrics.json"));
  EXPECT_DOUBLE_EQ(rep["value"].get<double>(), metrics["summary"]["best_metric"].get<double>());

  // encoding mismatch against the run's config
  const auto enc2 = root() / "enc_max";
  ASSERT_EQ(pmk_run(small({"encode", "--in", manifest(), "--out", enc2.string(), "--norm", "max"})).code, 0);
  const auto bad = pmk_run({"eval", "--run", a.string(), "--data", (enc2 / "manifest.json").string()});
  EXPECT_EQ(bad.code, cli::kSchema) << bad.err;
}

TEST_F(CliTest, SweepWritesNineCellGrid) {
  const auto out = root() / "sweep";
  auto args = small({"sweep", "--data", manifest(), "--out", out.string(), "--beta", "0,2,4", "--gamma", "0,2,4"});
  args.back() = "--deterministic";
  args[std::find(args.begin(), args.end(), "--epochs") - args.begin() + 1] = "1";
  const auto r = pmk_run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream grid(io::read_text(out / "sweep.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(grid, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "beta\\gamma,0,2,4");
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_EQ(std::count(lines[i].begin(), lines[i].end(), ','), 3) << lines[i];
    EXPECT_EQ(lines[i].substr(0, lines[i].find(',')), std::to_string(2 * (i - 1)));
  }
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(out)) runs += e.is_directory();
  EXPECT_EQ(runs, 9u);
  const auto cfg = io::load_config(out / "b4_g2" / "config.json");
  EXPECT_EQ(cfg.beta, 4);
  EXPECT_EQ(cfg.gamma, 2);
}

TEST_F(CliTest, BenchReportsMedianOfRepetitions) {
  const auto r = pmk_run({"bench", "--op", "aggregate", "--shape", "2x19x16x16", "--frames", "32", "--reps", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  const auto& res = j["results"][0];
  auto secs = res["seconds"].get<std::vector<double>>();
  ASSERT_EQ(secs.size(), 5u);
  std::sort(secs.begin(), secs.end());
  EXPECT_DOUBLE_EQ(res["median_seconds"].get<double>(), secs[2]);
  EXPECT_DOUBLE_EQ(j["elements_per_pass"].get<double>(), 2.0 * 32 * 19 * 16 * 16);
  EXPECT_NEAR(res["elements_per_s"].get<double>() * secs[2], 2.0 * 32 * 19 * 16 * 16, 1e-3);
  EXPECT_EQ(pmk_run({"bench", "--reps", "2"}).code, cli::kSchema);
  EXPECT_EQ(pmk_run({"bench", "--op", "conv"}).code, cli::kUsage);
}

TEST_F(CliTest, DistinctExitCodes) {
  const auto usage = pmk_run({"train", "--data", manifest(), "--out", "x", "--no-such-flag"});
  EXPECT_EQ(usage.code, cli::kUsage);
  EXPECT_EQ(usage.err.rfind("error: kind=usage msg=", 0), 0u) << usage.err;
  EXPECT_EQ(std::count(usage.err.begin(), usage.err.end(), '\n'), 1);
  EXPECT_EQ(pmk_run({"train", "--data", manifest(), "--out", "x", "--norm", "l2"}).code, cli::kSchema);
  EXPECT_EQ(pmk_run({"train", "--data", (root() / "absent.json").string(), "--out", "x"}).code, cli::kIo);
  EXPECT_EQ(pmk_run({}).code, cli::kUsage);
  // spatial size mismatch between data and config
  EXPECT_EQ(pmk_run({"train", "--data", manifest(), "--out", (root() / "x").string()}).code, cli::kSchema);
}

TEST_F(CliTest, ClipCommandsRunEndToEnd) {
  const auto u = root() / "untrimmed";
  ASSERT_EQ(pmk_run({"synth-untrimmed", "--out", u.string(), "--samples_per_class", "5", "--num_classes", "2",
                     "--height", "16", "--width", "16"})
                .code,
            0);
  const auto m = (u / "manifest.json").string();
  auto flags = [](std::vector<std::string> a) {
    for (const char* f : {"--height", "16", "--width", "16", "--c_dim", "4", "--epochs", "1", "--model", "baseline"})
      a.emplace_back(f);
    return a;
  };
  ASSERT_EQ(pmk_run(flags({"clips-oracle", "--data", m, "--out", (root() / "oracle").string()})).code, 0);
  ASSERT_EQ(pmk_run(flags({"clips-train", "--data", m, "--oracle", (root() / "oracle").string(), "--out",
                           (root() / "ranker").string()}))
                .code,
            0);
  const auto sel = pmk_run({"clips-select", "--data", m, "--oracle", (root() / "oracle").string(), "--ranker",
                            (root() / "ranker").string(), "--k", "24", "--consensus", "avg"});
  ASSERT_EQ(sel.code, 0) << sel.err;
  const auto s = json::parse(sel.out);
  // keeping every clip reproduces dense predictions
  EXPECT_DOUBLE_EQ(s["accuracy_selected"].get<double>(), s["accuracy_dense"].get<double>());
  const auto csv = io::read_text(root() / "ranker" / "select_val.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 24);  // one val video per class
}

}  // namespace
}  // namespace pmk
