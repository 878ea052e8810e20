#include <gtest/gtest.h>

#include <random>

#include "pmk/augmentation.hpp"
#include "pmk/encoding.hpp"
#include "pmk/joints.hpp"

namespace pmk {
namespace {

const JointGroups kGroups = JointGroups::coco19();

PoseRepresentation random_rep(std::size_t h, std::size_t w, Rng& rng, NormTag tag = NormTag::tan) {
  PoseRepresentation p{3, kNumChannelsWithBackground, h, w, std::vector<float>(3 * 19 * h * w), tag, 10};
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : p.values) v = u(rng);
  return p;
}

// Places a small square blob for every joint at a joint-specific interior location.
PoseRepresentation blob_rep(std::size_t size, Rng& rng) {
  PoseRepresentation p{3, kNumChannelsWithBackground, size, size, std::vector<float>(3 * 19 * size * size), NormTag::tan, 10};
  std::uniform_int_distribution<std::size_t> pos(8, size - 10);
  for (std::size_t j = 0; j < 19; ++j) {
    const std::size_t y = pos(rng), x = pos(rng);
    for (std::size_t c = 0; c < 3; ++c) {
      p.slice(c, j)[y * size + x] = 1.0f;
      p.slice(c, j)[y * size + x + 1] = 0.5f;
      p.slice(c, j)[(y + 1) * size + x] = 0.25f;
    }
  }
  return p;
}

std::pair<int, int> peak(const float* s, std::size_t w, std::size_t h) {
  const auto it = std::max_element(s, s + w * h);
  const auto i = static_cast<std::size_t>(it - s);
  return {static_cast<int>(i % w), static_cast<int>(i / w)};
}

TEST(JointGroups, PartitionAndInvolution) {
  const auto& g = kGroups;
  EXPECT_EQ(g.num_joints, 19u);
  std::size_t total = 0;
  for (const auto& grp : g.groups) total += grp.members.size();
  EXPECT_EQ(total, 19u);
  for (std::size_t j = 0; j < 19; ++j) EXPECT_EQ(g.mirror[g.mirror[j]], j);
  EXPECT_EQ(g.mirror[kLWrist], kRWrist);
  EXPECT_EQ(g.mirror[kNose], kNose);
  EXPECT_EQ(g.mirror[kNeck], kNeck);
  EXPECT_EQ(g.mirror[kBackground], kBackground);
  EXPECT_EQ(g.groups[g.group_of[kLEye]].name, "Head");
  EXPECT_FALSE(g.groups[g.group_of[kNeck]].jittered);
  EXPECT_FALSE(g.groups[g.group_of[kBackground]].jittered);
}

TEST(Paa, ZeroJitterIsIdentity) {
  Rng rng(1);
  const auto p = random_rep(16, 16, rng);
  EXPECT_EQ(paa(p, kGroups, {0, 0, 0.0}, rng).values, p.values);
}

TEST(Paa, ForcedGlobalShift) {
  Rng rng(2);
  const auto p = random_rep(12, 12, rng);
  JitterOffsets off;
  off.global = {2, 0};
  off.group.resize(kGroups.groups.size());
  const auto out = apply_offsets(p, kGroups, off, {2, 0, 0.0});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 19; ++j)
      for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t x = 0; x < 12; ++x) {
          const float expect = x < 2 ? 0.0f : p.slice(c, j)[y * 12 + x - 2];
          ASSERT_EQ(out.slice(c, j)[y * 12 + x], expect);
        }
}

TEST(Paa, GroupMembersShareOffsets) {
  Rng rng(3);
  const auto p = blob_rep(40, rng);
  bool wrist_differs = false;
  for (int trial = 0; trial < 20; ++trial) {
    const auto off = sample_offsets(kGroups, {3, 3, 0.0}, rng);
    const auto out = apply_offsets(p, kGroups, off, {3, 3, 0.0});
    auto moved = [&](std::size_t j) {
      auto [x0, y0] = peak(p.slice(0, j), 40, 40);
      auto [x1, y1] = peak(out.slice(0, j), 40, 40);
      return std::pair{x1 - x0, y1 - y0};
    };
    EXPECT_EQ(moved(kLEye), moved(kNose));
    EXPECT_EQ(moved(kREar), moved(kNose));
    EXPECT_EQ(moved(kNeck), moved(kLHip));
    EXPECT_EQ(moved(kNeck), moved(kBackground));
    EXPECT_EQ(moved(kNeck), (std::pair{off.global.dx, off.global.dy}));
    wrist_differs = wrist_differs || moved(kLWrist) != moved(kNose);
  }
  EXPECT_TRUE(wrist_differs);
}

TEST(Paa, RejectsRawAndOversizedJitter) {
  Rng rng(4);
  auto raw = random_rep(16, 16, rng, NormTag::raw);
  EXPECT_THROW(paa(raw, kGroups, {1, 1, 0.0}, rng), ValueError);
  auto p = random_rep(16, 16, rng);
  EXPECT_THROW(paa(p, kGroups, {5, 0, 0.0}, rng), ValueError);
  JitterOffsets off;
  off.global = {3, 0};
  off.group.resize(kGroups.groups.size());
  EXPECT_THROW(apply_offsets(p, kGroups, off, {2, 2, 0.0}), ValueError);
}

TEST(Paa, CommutesWithAggregation) {
  Rng rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = 3 + trial % 9, sz = 16;
    HeatmapSequence seq(t, 19, sz, sz);
    for (auto& v : seq.values) v = u(rng);
    const AugmentationParams prm{4, 3, 0.0};
    const auto off = sample_offsets(kGroups, prm, rng);
    const auto k = build_kernel(t, 3);

    // Jitter every frame, then aggregate.
    HeatmapSequence shifted = seq;
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t j = 0; j < 19; ++j) {
        const auto& go = off.group[kGroups.group_of[j]];
        shift_plane(seq.map(f, j), shifted.map(f, j), sz, sz, off.global.dx + go.dx, off.global.dy + go.dy);
      }
    const auto a = normalize_tan(aggregate(shifted, k), k);
    const auto b = apply_offsets(normalize_tan(aggregate(seq, k), k), kGroups, off, prm);
    for (std::size_t i = 0; i < a.values.size(); ++i) ASSERT_NEAR(a.values[i], b.values[i], 1e-6);
  }
}

TEST(Paa, PreservesIntraGroupGeometryAndNeverAddsMass) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = blob_rep(40, rng);
    const auto out = paa(p, kGroups, {4, 3, 0.0}, rng);
    for (const auto& grp : kGroups.groups) {
      for (std::size_t a = 0; a + 1 < grp.members.size(); ++a) {
        const std::size_t ja = grp.members[a], jb = grp.members[a + 1];
        auto [xa, ya] = peak(p.slice(0, ja), 40, 40);
        auto [xb, yb] = peak(p.slice(0, jb), 40, 40);
        auto [xa2, ya2] = peak(out.slice(0, ja), 40, 40);
        auto [xb2, yb2] = peak(out.slice(0, jb), 40, 40);
        ASSERT_EQ(xb - xa, xb2 - xa2);
        ASSERT_EQ(yb - ya, yb2 - ya2);
      }
    }
    const auto q = random_rep(16, 16, rng);
    const auto qo = paa(q, kGroups, {4, 4, 0.0}, rng);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 19; ++j) {
        double before = 0, after = 0;
        for (std::size_t i = 0; i < 256; ++i) {
          before += q.slice(c, j)[i];
          after += qo.slice(c, j)[i];
        }
        ASSERT_LE(after, before + 1e-6);
      }
  }
}

TEST(Paa, SameSeedSameOutput) {
  Rng seed_rng(7);
  const auto p = random_rep(20, 20, seed_rng);
  Rng a(42), b(42);
  EXPECT_EQ(augment(p, kGroups, {3, 2, 0.5}, a).values, augment(p, kGroups, {3, 2, 0.5}, b).values);
}

TEST(Hflip, InvolutionAndCoordinateSwap) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_rep(6, 9, rng);
    ASSERT_EQ(hflip(hflip(p, kGroups), kGroups).values, p.values);
  }
  PoseRepresentation p{3, 19, 8, 10, std::vector<float>(3 * 19 * 80), NormTag::tan, 10};
  p.slice(1, kLWrist)[3 * 10 + 2] = 1.0f;
  const auto f = hflip(p, kGroups);
  EXPECT_EQ(f.slice(1, kRWrist)[3 * 10 + (10 - 1 - 2)], 1.0f);
  EXPECT_EQ(*std::max_element(f.slice(1, kLWrist), f.slice(1, kLWrist) + 80), 0.0f);
}

TEST(Hflip, SymmetricInputIsFixedPoint) {
  Rng rng(9);
  auto p = random_rep(5, 8, rng);
  // Make it symmetric: slice(mirror[j]) = mirrored slice(j).
  const auto f = hflip(p, kGroups);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = 0.5f * (p.values[i] + f.values[i]);
  const auto g = hflip(p, kGroups);
  for (std::size_t i = 0; i < p.values.size(); ++i) EXPECT_FLOAT_EQ(g.values[i], p.values[i]);
}

}  // namespace
}  // namespace pmk
