#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "pmk/synthdata.hpp"
#include "pmk/train.hpp"

namespace pmk {
namespace {

using train::Dataset;

TEST(Metrics, AveragePrecisionHandExample) {
  const std::vector<double> s{0.9, 0.5, 0.1};
  const std::vector<int> pos{1, 0, 1};
  EXPECT_DOUBLE_EQ(train::average_precision(s, pos), 5.0 / 6.0);
}

TEST(Metrics, PerfectPredictor) {
  std::vector<int> y{0, 1, 2, 2, 1, 0};
  EXPECT_DOUBLE_EQ(train::mean_class_accuracy(y, y, 3), 1.0);
  std::vector<double> scores;
  std::vector<std::vector<int>> multi;
  for (int c : y) {
    for (int k = 0; k < 3; ++k) scores.push_back(k == c ? 0.9 : 0.1);
    multi.push_back({c});
  }
  EXPECT_DOUBLE_EQ(train::mean_average_precision(scores, multi, 3), 1.0);
}

TEST(Metrics, UniformRandomPredictorNearChance) {
  Rng rng(1);
  std::uniform_int_distribution<int> u(0, 7);
  std::vector<int> y, p;
  for (int i = 0; i < 1000; ++i) {
    y.push_back(i % 8);
    p.push_back(u(rng));
  }
  EXPECT_NEAR(train::mean_class_accuracy(p, y, 8), 0.125, 3 * std::sqrt(0.125 * 0.875 / 1000));
}

TEST(Metrics, MacroAverageSkipsAbsentClasses) {
  const auto before = train::absent_class_warning_count().load();
  std::vector<int> y{0, 0, 0, 1}, p{0, 0, 1, 0};
  // class 0: 2/3, class 1: 0/1, class 2 absent
  EXPECT_DOUBLE_EQ(train::mean_class_accuracy(p, y, 3), (2.0 / 3.0 + 0.0) / 2.0);
  EXPECT_EQ(train::absent_class_warning_count().load(), before + 1);
}

Dataset tiny_set(const std::string& split, std::size_t per_class, std::uint64_t seed) {
  synth::SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = per_class;
  spec.height = spec.width = 16;
  spec.t_min = 16;
  spec.t_max = 24;
  spec.seed = seed;
  Dataset d;
  d.num_classes = 3;
  for (std::size_t i = 0; i < synth::num_samples(spec); ++i) {
    const auto s = synth::make_sample(spec, i);
    if (s.split != split) continue;
    d.reps.push_back(encode(s.seq, 3, NormTag::tan));
    d.labels.push_back(s.label);
  }
  return d;
}

io::RunConfig tiny_config() {
  io::RunConfig c;
  c.height = c.width = 16;
  c.c_dim = 8;
  c.epochs = 3;
  c.batch_size = 6;
  c.lr = 1e-3;
  c.seed = 4;
  return c;
}

TEST(Fit, DeterministicUnderFixedSeed) {
  const auto tr = tiny_set("train", 5, 1), va = tiny_set("val", 5, 1);
  auto cfg = tiny_config();
  auto run = [&] {
    auto net = train::build_model(cfg, 19, 3, cfg.seed);
    return train::metrics_json(train::fit(*net, tr, va, cfg), cfg.hash(), false).dump();
  };
  EXPECT_EQ(run(), run());
}

TEST(Fit, LearnsEasyTask) {
  const auto tr = tiny_set("train", 10, 2), va = tiny_set("val", 10, 2);
  auto cfg = tiny_config();
  cfg.model = "baseline";
  cfg.augment = false;
  cfg.epochs = 8;
  auto net = train::build_model(cfg, 19, 3, cfg.seed);
  const auto r = train::fit(*net, tr, va, cfg);
  EXPECT_LT(r.history.back().train_loss, 0.5 * r.history.front().train_loss);
  EXPECT_GT(r.best_metric, 1.0 / 3.0);
  // best state was restored
  EXPECT_DOUBLE_EQ(train::evaluate_metric(train::predict(*net, train::pointers(va), false), va), r.best_metric);
}

TEST(Fit, GateStatsReportedForJmrn) {
  const auto tr = tiny_set("train", 5, 3), va = tiny_set("val", 5, 3);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  auto net = train::build_model(cfg, 19, 3, cfg.seed);
  const auto r = train::fit(*net, tr, va, cfg);
  ASSERT_EQ(r.history.front().gates.mean.size(), 19u);
  for (double m : r.history.front().gates.mean) {
    EXPECT_GT(m, 0.0);
    EXPECT_LT(m, 1.0);
  }
  const auto csv = train::metrics_csv(r);
  EXPECT_NE(csv.find("gate_mean_18"), std::string::npos);
}

TEST(Fit, DivergenceIsReported) {
  auto tr = tiny_set("train", 5, 5);
  const auto va = tiny_set("val", 5, 5);
  tr.reps[0].values[3] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = tiny_config();
  cfg.augment = false;
  auto net = train::build_model(cfg, 19, 3, cfg.seed);
  try {
    train::fit(*net, tr, va, cfg);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Fit, RejectsRawWithAugmentation) {
  auto tr = tiny_set("train", 5, 6);
  for (auto& r : tr.reps) r.tag = NormTag::raw;
  auto cfg = tiny_config();
  auto net = train::build_model(cfg, 19, 3, cfg.seed);
  EXPECT_THROW(train::fit(*net, tr, tr, cfg), ValueError);
}

}  // namespace
}  // namespace pmk
