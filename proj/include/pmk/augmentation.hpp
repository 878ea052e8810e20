#pragma once

// Pose-aware augmentation on aggregated representations: one global
// translation for every joint plus one translation per jittered joint group,
// and a horizontal flip that also exchanges left/right joints.

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "pmk/encoding.hpp"
#include "pmk/error.hpp"
#include "pmk/joints.hpp"
#include "pmk/rng.hpp"

namespace pmk {

struct AugmentationParams {
  int beta = 0;    // max global jitter, pixels
  int gamma = 0;   // max per-group jitter, pixels
  double flip_prob = 0.5;
};

struct PixelOffset {
  int dx = 0;  // along width, positive = right
  int dy = 0;  // along height, positive = down
};

struct JitterOffsets {
  PixelOffset global;
  std::vector<PixelOffset> group;  // indexed like JointGroups::groups
};

// dst(y, x) = src(y - dy, x - dx), zero where the source falls outside.
inline void shift_plane(const float* src, float* dst, std::size_t h, std::size_t w, int dx, int dy) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (long y = 0; y < H; ++y) {
    float* d = dst + y * W;
    const long sy = y - dy;
    if (sy < 0 || sy >= H) {
      std::fill(d, d + W, 0.0f);
      continue;
    }
    const float* s = src + sy * W;
    for (long x = 0; x < W; ++x) {
      const long sx = x - dx;
      d[x] = (sx < 0 || sx >= W) ? 0.0f : s[sx];
    }
  }
}

namespace detail {

inline void check_augmentable(const PoseRepresentation& p, const JointGroups& groups, const AugmentationParams& params) {
  if (p.tag == NormTag::raw) throw ValueError("paa: representation must be normalized (tan or max) first");
  if (groups.num_joints != p.joints) {
    throw ValueError("paa: joint groups cover " + std::to_string(groups.num_joints) + " joints, representation has " +
                     std::to_string(p.joints));
  }
  const int limit = static_cast<int>(std::min(p.height, p.width) / 4);
  if (params.beta < 0 || params.gamma < 0 || params.beta > limit || params.gamma > limit) {
    throw ValueError("paa: beta=" + std::to_string(params.beta) + ", gamma=" + std::to_string(params.gamma) +
                     " must lie in [0, " + std::to_string(limit) + "]");
  }
}

}  // namespace detail

// Uniform integer offsets: global in [-beta, beta]^2, and for each jittered
// group in [-gamma, gamma]^2. Non-jittered groups get zero.
[[nodiscard]] inline JitterOffsets sample_offsets(const JointGroups& groups, const AugmentationParams& params, Rng& rng) {
  std::uniform_int_distribution<int> g(-params.beta, params.beta);
  std::uniform_int_distribution<int> l(-params.gamma, params.gamma);
  JitterOffsets off;
  off.global.dx = g(rng);
  off.global.dy = g(rng);
  off.group.resize(groups.groups.size());
  for (std::size_t i = 0; i < groups.groups.size(); ++i) {
    if (!groups.groups[i].jittered) continue;
    off.group[i].dx = l(rng);
    off.group[i].dy = l(rng);
  }
  return off;
}

// Translates every (c, j) slice by global + group offset. The same offsets
// apply to every channel.
[[nodiscard]] inline PoseRepresentation apply_offsets(const PoseRepresentation& p, const JointGroups& groups,
                                                      const JitterOffsets& off, const AugmentationParams& bounds) {
  detail::check_augmentable(p, groups, bounds);
  auto exceeds = [](const PixelOffset& o, int m) { return std::abs(o.dx) > m || std::abs(o.dy) > m; };
  if (exceeds(off.global, bounds.beta)) throw ValueError("paa: global offset exceeds beta");
  if (off.group.size() != groups.groups.size()) throw ValueError("paa: one offset per joint group expected");
  for (std::size_t i = 0; i < off.group.size(); ++i) {
    if (exceeds(off.group[i], groups.groups[i].jittered ? bounds.gamma : 0)) {
      throw ValueError("paa: offset of group '" + groups.groups[i].name + "' exceeds its bound");
    }
  }
  PoseRepresentation out = p;
  for (std::size_t j = 0; j < p.joints; ++j) {
    const PixelOffset& go = off.group[groups.group_of[j]];
    const int dx = off.global.dx + go.dx, dy = off.global.dy + go.dy;
    if (dx == 0 && dy == 0) continue;
    for (std::size_t c = 0; c < p.channels; ++c) shift_plane(p.slice(c, j), out.slice(c, j), p.height, p.width, dx, dy);
  }
  return out;
}

[[nodiscard]] inline PoseRepresentation paa(const PoseRepresentation& p, const JointGroups& groups,
                                            const AugmentationParams& params, Rng& rng) {
  detail::check_augmentable(p, groups, params);
  return apply_offsets(p, groups, sample_offsets(groups, params, rng), params);
}

// Mirrors every slice along the width axis and moves joint j into channel
// mirror[j].
[[nodiscard]] inline PoseRepresentation hflip(const PoseRepresentation& p, const JointGroups& groups) {
  if (groups.num_joints != p.joints) throw ValueError("hflip: joint groups do not match representation");
  PoseRepresentation out = p;
  const std::size_t w = p.width;
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t j = 0; j < p.joints; ++j) {
      const float* s = p.slice(c, j);
      float* d = out.slice(c, groups.mirror[j]);
      for (std::size_t y = 0; y < p.height; ++y) {
        for (std::size_t x = 0; x < w; ++x) d[y * w + x] = s[y * w + (w - 1 - x)];
      }
    }
  }
  return out;
}

// Training-time augmentation: PAA followed by a flip with probability flip_prob.
[[nodiscard]] inline PoseRepresentation augment(const PoseRepresentation& p, const JointGroups& groups,
                                                const AugmentationParams& params, Rng& rng) {
  PoseRepresentation out = (params.beta == 0 && params.gamma == 0) ? p : paa(p, groups, params, rng);
  std::bernoulli_distribution flip(params.flip_prob);
  if (flip(rng)) out = hflip(out, groups);
  return out;
}

}  // namespace pmk
