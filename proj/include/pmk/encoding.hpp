#pragma once

// Pose-evolution encoding: temporal aggregation of per-joint heatmaps into a
// C x J x H x W representation, and its two normalizations.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pmk/error.hpp"
#include "pmk/parallel.hpp"

namespace pmk {

// Per-frame, per-joint confidence maps, stored T x J x H x W.
struct HeatmapSequence {
  std::size_t frames = 0, joints = 0, height = 0, width = 0;
  std::vector<float> values;

  HeatmapSequence() = default;
  HeatmapSequence(std::size_t t, std::size_t j, std::size_t h, std::size_t w)
      : frames(t), joints(j), height(h), width(w), values(t * j * h * w, 0.0f) {
    validate_extents();
  }

  [[nodiscard]] std::size_t plane() const noexcept { return height * width; }
  [[nodiscard]] std::size_t frame_size() const noexcept { return joints * plane(); }
  [[nodiscard]] float* map(std::size_t t, std::size_t j) { return values.data() + (t * joints + j) * plane(); }
  [[nodiscard]] const float* map(std::size_t t, std::size_t j) const {
    return values.data() + (t * joints + j) * plane();
  }

  void validate_extents() const {
    if (frames < 2) throw ValueError("heatmap sequence needs at least 2 frames, got " + std::to_string(frames));
    if (joints < 1) throw ValueError("heatmap sequence needs at least 1 joint");
    if (height < 1 || width < 1) throw ValueError("heatmap sequence has empty spatial extent");
  }
};

// Number of values clamped into [0,1] by ingest_heatmaps() so far.
inline std::atomic<std::size_t>& clamp_warning_count() {
  static std::atomic<std::size_t> count{0};
  return count;
}

// Builds a sequence from detector output, clamping overshoot into [0,1].
inline HeatmapSequence ingest_heatmaps(std::size_t t, std::size_t j, std::size_t h, std::size_t w,
                                       std::vector<float> values) {
  HeatmapSequence seq;
  seq.frames = t;
  seq.joints = j;
  seq.height = h;
  seq.width = w;
  seq.validate_extents();
  if (values.size() != t * j * h * w) {
    throw ValueError("heatmap payload has " + std::to_string(values.size()) + " values, expected " +
                     std::to_string(t * j * h * w));
  }
  std::size_t clamped = 0;
  for (auto& v : values) {
    if (!(v >= 0.0f)) {  // also catches NaN
      v = 0.0f;
      ++clamped;
    } else if (v > 1.0f) {
      v = 1.0f;
      ++clamped;
    }
  }
  clamp_warning_count() += clamped;
  seq.values = std::move(values);
  return seq;
}

// Channel-time weights o[t][c]: triangular bumps over normalized time whose
// peaks are equally spaced, so each row sums to one.
struct AggregationKernel {
  std::size_t frames = 0, channels = 0;
  std::vector<float> weights;  // frames x channels

  [[nodiscard]] float at(std::size_t t, std::size_t c) const { return weights[t * channels + c]; }

  // Sum over time of channel c, accumulated in the same order as aggregate().
  [[nodiscard]] float channel_sum(std::size_t c) const {
    float s = 0.0f;
    for (std::size_t t = 0; t < frames; ++t) s += weights[t * channels + c];
    return s;
  }
};

[[nodiscard]] inline AggregationKernel build_kernel(std::size_t frames, std::size_t channels) {
  if (frames < 2) throw ValueError("build_kernel: need at least 2 frames, got " + std::to_string(frames));
  if (channels < 2) throw ValueError("build_kernel: need at least 2 channels, got " + std::to_string(channels));
  if (channels > frames) {
    throw ValueError("build_kernel: " + std::to_string(channels) + " channels exceed " + std::to_string(frames) +
                     " frames");
  }
  AggregationKernel k{frames, channels, std::vector<float>(frames * channels)};
  const double cm1 = static_cast<double>(channels - 1);
  for (std::size_t t = 0; t < frames; ++t) {
    const double tn = static_cast<double>(t) / static_cast<double>(frames - 1);
    for (std::size_t c = 0; c < channels; ++c) {
      const double peak = static_cast<double>(c) / cm1;
      k.weights[t * channels + c] = static_cast<float>(std::max(0.0, 1.0 - cm1 * std::abs(tn - peak)));
    }
  }
  return k;
}

enum class NormTag { raw, tan, max_over_channel };

[[nodiscard]] inline const char* to_string(NormTag tag) {
  switch (tag) {
    case NormTag::raw: return "raw";
    case NormTag::tan: return "tan";
    case NormTag::max_over_channel: return "max";
  }
  return "?";
}

[[nodiscard]] inline NormTag parse_norm_tag(const std::string& s) {
  if (s == "raw") return NormTag::raw;
  if (s == "tan" || s == "TAN") return NormTag::tan;
  if (s == "max" || s == "max_over_channel") return NormTag::max_over_channel;
  throw ValueError("unknown normalization '" + s + "' (expected tan|max|raw)");
}

// Aggregated motion tensor, stored C x J x H x W.
struct PoseRepresentation {
  std::size_t channels = 0, joints = 0, height = 0, width = 0;
  std::vector<float> values;
  NormTag tag = NormTag::raw;
  std::size_t source_frames = 0;

  [[nodiscard]] std::size_t plane() const noexcept { return height * width; }
  [[nodiscard]] float* slice(std::size_t c, std::size_t j) { return values.data() + (c * joints + j) * plane(); }
  [[nodiscard]] const float* slice(std::size_t c, std::size_t j) const {
    return values.data() + (c * joints + j) * plane();
  }
};

// P[c, j, y, x] = sum_t seq[t, j, y, x] * o[t, c]. Parallel over spatial
// blocks of (j, y, x); each block owns its slice of the output.
[[nodiscard]] inline PoseRepresentation aggregate(const HeatmapSequence& seq, const AggregationKernel& kernel,
                                                  int workers = 1) {
  if (kernel.frames != seq.frames) {
    throw ValueError("aggregate: kernel built for " + std::to_string(kernel.frames) + " frames, sequence has " +
                     std::to_string(seq.frames));
  }
  const std::size_t cc = kernel.channels, e = seq.frame_size();
  PoseRepresentation rep{cc, seq.joints, seq.height, seq.width, std::vector<float>(cc * e, 0.0f), NormTag::raw,
                         seq.frames};
  constexpr std::size_t kBlock = 4096;
  const std::size_t nblocks = (e + kBlock - 1) / kBlock;
  parallel_for(
      0, nblocks,
      [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
          const std::size_t lo = b * kBlock, hi = std::min(e, lo + kBlock), len = hi - lo;
          for (std::size_t t = 0; t < seq.frames; ++t) {
            const float* __restrict src = seq.values.data() + t * e + lo;
            for (std::size_t c = 0; c < cc; ++c) {
              const float w = kernel.weights[t * cc + c];
              if (w == 0.0f) continue;
              float* __restrict dst = rep.values.data() + c * e + lo;
              for (std::size_t i = 0; i < len; ++i) dst[i] += w * src[i];
            }
          }
        }
      },
      workers);
  return rep;
}

// Number of multiply-accumulates aggregate() performs for a sequence.
[[nodiscard]] inline std::size_t aggregate_accumulates(const AggregationKernel& kernel, std::size_t frame_size) {
  std::size_t nnz = 0;
  for (float w : kernel.weights) nnz += (w != 0.0f);
  return nnz * frame_size;
}

// Time-aware normalization: divide channel c by the value a joint that stays
// at one location for the whole video would accumulate there.
[[nodiscard]] inline PoseRepresentation normalize_tan(const PoseRepresentation& p, const AggregationKernel& kernel) {
  if (p.tag != NormTag::raw) throw ValueError("normalize_tan: representation is already normalized");
  if (kernel.frames != p.source_frames || kernel.channels != p.channels) {
    throw ValueError("normalize_tan: kernel (" + std::to_string(kernel.frames) + " frames, " +
                     std::to_string(kernel.channels) + " channels) does not match representation (" +
                     std::to_string(p.source_frames) + " frames, " + std::to_string(p.channels) + " channels)");
  }
  constexpr float kFloor = 1e-8f;
  PoseRepresentation out = p;
  out.tag = NormTag::tan;
  const std::size_t e = p.joints * p.plane();
  for (std::size_t c = 0; c < p.channels; ++c) {
    const float div = std::max(kernel.channel_sum(c), kFloor);
    float* v = out.values.data() + c * e;
    for (std::size_t i = 0; i < e; ++i) v[i] = std::clamp(v[i] / div, 0.0f, 1.0f);
  }
  return out;
}

// Max-over-channel normalization: every nonzero (c, j) slice is scaled so its
// spatial maximum is 1.
[[nodiscard]] inline PoseRepresentation normalize_max(const PoseRepresentation& p) {
  if (p.tag != NormTag::raw) throw ValueError("normalize_max: representation is already normalized");
  PoseRepresentation out = p;
  out.tag = NormTag::max_over_channel;
  const std::size_t pl = p.plane();
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t j = 0; j < p.joints; ++j) {
      float* s = out.slice(c, j);
      const float mx = *std::max_element(s, s + pl);
      if (mx <= 0.0f) continue;
      for (std::size_t i = 0; i < pl; ++i) s[i] /= mx;
    }
  }
  return out;
}

// aggregate + the requested normalization, with a kernel built for seq.frames.
[[nodiscard]] inline PoseRepresentation encode(const HeatmapSequence& seq, std::size_t channels, NormTag norm,
                                               int workers = 1) {
  const AggregationKernel k = build_kernel(seq.frames, channels);
  PoseRepresentation raw = aggregate(seq, k, workers);
  switch (norm) {
    case NormTag::raw: return raw;
    case NormTag::tan: return normalize_tan(raw, k);
    case NormTag::max_over_channel: return normalize_max(raw);
  }
  return raw;
}

// Re-lays a representation as J x C x H x W, the per-joint input order of the
// networks.
inline void to_joint_major(const PoseRepresentation& p, float* dst) {
  const std::size_t pl = p.plane();
  for (std::size_t j = 0; j < p.joints; ++j) {
    for (std::size_t c = 0; c < p.channels; ++c) {
      std::copy_n(p.slice(c, j), pl, dst + (j * p.channels + c) * pl);
    }
  }
}

}  // namespace pmk
