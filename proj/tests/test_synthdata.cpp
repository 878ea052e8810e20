#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "pmk/encoding.hpp"
#include "pmk/synthdata.hpp"

namespace pmk {
namespace {

namespace fs = std::filesystem;
using synth::SynthSpec;

SynthSpec small_spec() {
  SynthSpec s;
  s.samples_per_class = 5;
  s.height = s.width = 32;
  s.t_min = 20;
  s.t_max = 30;
  s.seed = 11;
  return s;
}

std::size_t argmax(const float* m, std::size_t n) { return static_cast<std::size_t>(std::max_element(m, m + n) - m); }

TEST(Synth, DeltaLimitArgmaxIsGroundTruth) {
  auto spec = small_spec();
  spec.sigma = 0.25;
  spec.dropout = 0;
  spec.noise_std = 0;
  spec.distractor = true;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto s = synth::make_sample(spec, i);
    for (std::size_t t = 0; t < s.seq.frames; ++t)
      for (std::size_t j = 0; j < kNumCocoJoints; ++j) {
        const auto [x, y] = s.positions[t * kNumCocoJoints + j];
        ASSERT_EQ(argmax(s.seq.map(t, j), 32 * 32), static_cast<std::size_t>(y * 32 + x));
      }
  }
}

TEST(Synth, FullDropoutGivesZeros) {
  auto spec = small_spec();
  spec.dropout = 1.0;
  for (std::size_t i : {0, 13}) {
    const auto s = synth::make_sample(spec, i);
    EXPECT_TRUE(std::all_of(s.seq.values.begin(), s.seq.values.end(), [](float v) { return v == 0.0f; }));
  }
}

TEST(Synth, GaussianPeakAndMass) {
  auto spec = small_spec();
  spec.height = spec.width = 64;
  spec.dropout = 0;
  spec.noise_std = 0;
  const double sigma = spec.sigma, mass = 2 * std::numbers::pi * sigma * sigma;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto s = synth::make_sample(spec, i);
    for (std::size_t t = 0; t < s.seq.frames; t += 5)
      for (std::size_t j = 0; j < kNumCocoJoints; ++j) {
        const auto [x, y] = s.positions[t * kNumCocoJoints + j];
        const float* m = s.seq.map(t, j);
        EXPECT_EQ(m[y * 64 + x], 1.0f);
        EXPECT_EQ(*std::max_element(m, m + 64 * 64), 1.0f);
        if (std::min({x, y, 63 - x, 63 - y}) < 3 * sigma) continue;
        double sum = 0;
        for (std::size_t p = 0; p < 64 * 64; ++p) sum += m[p];
        EXPECT_NEAR(sum, mass, 0.01 * mass);
        ++checked;
      }
  }
  EXPECT_GT(checked, 100u);
}

TEST(Synth, TrajectoriesStayInsideMargin) {
  auto spec = small_spec();
  spec.distractor = true;
  for (std::size_t i = 0; i < synth::num_samples(spec); ++i) {
    const auto s = synth::make_sample(spec, i);
    for (const auto& [x, y] : s.positions) {
      ASSERT_GE(x, spec.margin);
      ASSERT_GE(y, spec.margin);
      ASSERT_LE(x, 31 - spec.margin);
      ASSERT_LE(y, 31 - spec.margin);
    }
  }
}

TEST(Synth, FixedSeedFilesHashIdentically) {
  auto spec = small_spec();
  spec.samples_per_class = 2;
  const auto a = fs::temp_directory_path() / "pmk_synth_a", b = fs::temp_directory_path() / "pmk_synth_b";
  fs::remove_all(a);
  fs::remove_all(b);
  synth::generate(spec, a, 1);
  synth::generate(spec, b, 3);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto other = b / e.path().filename();
    ASSERT_TRUE(fs::exists(other));
    EXPECT_EQ(io::sha256_hex(io::read_file(e.path())), io::sha256_hex(io::read_file(other))) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 16u + 2u);
  const auto m = io::load_manifest(a / "manifest.json");
  EXPECT_EQ(m.records.size(), 16u);
  spec.seed = 12;
  EXPECT_NE(synth::make_sample(spec, 0).seq.values, synth::make_sample(small_spec(), 0).seq.values);
}

TEST(Synth, StratifiedSplit) {
  auto spec = small_spec();
  spec.samples_per_class = 10;
  std::vector<int> val(8, 0);
  for (std::size_t i = 0; i < synth::num_samples(spec); ++i) {
    const auto s = synth::make_sample(spec, i);
    EXPECT_EQ(s.label, static_cast<int>(i % 8));
    val[static_cast<std::size_t>(s.label)] += s.split == "val";
  }
  for (int v : val) EXPECT_EQ(v, 2);
}

TEST(Untrimmed, WindowAnnotations) {
  auto spec = small_spec();
  for (std::size_t i = 0; i < 8; ++i) {
    const auto s = synth::make_untrimmed(spec, i, 0.5);
    EXPECT_EQ(s.seq.frames, 384u);
    const auto clips = s.annotations["action_clips"].get<std::vector<std::size_t>>();
    EXPECT_GE(clips.size(), 12u);
    EXPECT_LE(clips.size(), 13u);
    const auto win = s.annotations["window"].get<std::vector<std::size_t>>();
    EXPECT_EQ(win[1] - win[0], 192u);
    for (std::size_t k = 0; k < 24; ++k) {
      bool overlap = false;
      for (std::size_t f = 16 * k; f < 16 * k + 16; ++f) overlap = overlap || (f >= win[0] && f < win[1]);
      EXPECT_EQ(overlap, std::find(clips.begin(), clips.end(), k) != clips.end());
    }
  }
  EXPECT_EQ(synth::make_untrimmed(spec, 3, 1.0).annotations["action_clips"].size(), 24u);
  EXPECT_THROW(synth::make_untrimmed(spec, 0, 0.0), ValueError);
  EXPECT_THROW(synth::make_untrimmed(spec, 0, 1.5), ValueError);
}

TEST(Synth, NearestCentroidBeatsChance) {
  auto spec = small_spec();
  spec.samples_per_class = 25;
  std::vector<std::vector<double>> centroid(8);
  std::vector<int> count(8, 0);
  std::vector<std::pair<int, std::vector<float>>> val;
  for (std::size_t i = 0; i < synth::num_samples(spec); ++i) {
    const auto s = synth::make_sample(spec, i);
    const auto p = encode(s.seq, 3, NormTag::tan);
    if (s.split == "val") {
      val.emplace_back(s.label, p.values);
      continue;
    }
    auto& c = centroid[static_cast<std::size_t>(s.label)];
    c.resize(p.values.size());
    for (std::size_t k = 0; k < c.size(); ++k) c[k] += p.values[k];
    ++count[static_cast<std::size_t>(s.label)];
  }
  std::size_t correct = 0;
  for (const auto& [label, v] : val) {
    double best = 1e300;
    int arg = -1;
    for (int c = 0; c < 8; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < v.size(); ++k) {
        const double diff = v[k] - centroid[c][k] / count[c];
        d += diff * diff;
      }
      if (d < best) best = d, arg = c;
    }
    correct += arg == label;
  }
  const double acc = static_cast<double>(correct) / val.size();
  // chance plus three binomial standard deviations
  EXPECT_GT(acc, 0.125 + 3 * std::sqrt(0.125 * 0.875 / val.size())) << acc;
}

TEST(Synth, DistractorsIndependentOfLabel) {
  auto spec = small_spec();
  spec.distractor = true;
  spec.samples_per_class = 12;
  std::vector<int> labels;
  std::vector<std::vector<double>> params;
  for (std::size_t i = 0; i < synth::num_samples(spec); ++i) {
    const auto s = synth::make_sample(spec, i);
    labels.push_back(s.label);
    params.push_back(s.distractor_params);
  }
  const std::size_t n = labels.size(), d = params[0].size();
  // standardise, then sum of between-class sums of squares over parameters
  for (std::size_t k = 0; k < d; ++k) {
    double m = 0, v = 0;
    for (auto& p : params) m += p[k];
    m /= n;
    for (auto& p : params) v += (p[k] - m) * (p[k] - m);
    const double sd = std::sqrt(v / n);
    for (auto& p : params) p[k] = (p[k] - m) / sd;
  }
  auto stat = [&](const std::vector<int>& lab) {
    double total = 0;
    for (std::size_t k = 0; k < d; ++k) {
      std::vector<double> sum(8, 0.0);
      std::vector<int> cnt(8, 0);
      for (std::size_t i = 0; i < n; ++i) sum[lab[i]] += params[i][k], ++cnt[lab[i]];
      for (int c = 0; c < 8; ++c) total += sum[c] * sum[c] / cnt[c];
    }
    return total;
  };
  const double observed = stat(labels);
  Rng rng(5);
  auto perm = labels;
  std::size_t ge = 0;
  const std::size_t rounds = 2000;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::shuffle(perm.begin(), perm.end(), rng);
    ge += stat(perm) >= observed;
  }
  EXPECT_GT(static_cast<double>(ge + 1) / (rounds + 1), 0.05);
}

TEST(Synth, SpecValidationAndSchema) {
  auto spec = small_spec();
  EXPECT_EQ(SynthSpec::from_json(spec.to_json()).to_json(), spec.to_json());
  EXPECT_THROW(SynthSpec::from_json({{"num_clases", 3}}), io::IoError);
  EXPECT_THROW(SynthSpec::from_json({{"version", 2}}), io::IoError);
  spec.num_classes = 9;
  EXPECT_THROW(spec.validate(), ValueError);
  spec = small_spec();
  spec.t_min = 50;
  EXPECT_THROW(synth::make_sample(spec, 0), ValueError);
}

}  // namespace
}  // namespace pmk
