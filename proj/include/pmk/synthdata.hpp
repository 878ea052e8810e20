#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "encoding.hpp"
#include "error.hpp"
#include "io.hpp"
#include "joints.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace pmk::synth {

using io::json;
namespace fs = std::filesystem;

inline constexpr std::size_t kMaxClasses = 8;
inline constexpr std::array<const char*, kMaxClasses> kClassNames = {"wave",  "reach-up", "jump", "walk",
                                                                     "squat", "clap",     "kick", "idle-sway"};
inline constexpr std::size_t kUntrimmedFrames = 384;
inline constexpr std::size_t kClipFrames = 16;
inline constexpr int kSpecVersion = 1;

struct SynthSpec {
  std::size_t num_classes = 8;
  std::size_t samples_per_class = 20;
  std::size_t t_min = 40, t_max = 80;
  std::size_t height = 64, width = 64;
  double sigma = 1.5;
  double dropout = 0.05;
  double noise_std = 0.01;
  bool distractor = false;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  int margin = 2;

  void validate() const {
    auto bad = [](const std::string& m) { throw ValueError("synth spec: " + m); };
    if (num_classes < 2 || num_classes > kMaxClasses) bad("num_classes must be in [2, 8]");
    if (samples_per_class < 1) bad("samples_per_class must be >= 1");
    if (t_min < 2 || t_min > t_max) bad("need 2 <= t_min <= t_max");
    if (height < 16 || width < 16) bad("height and width must be >= 16");
    if (!(sigma > 0)) bad("sigma must be > 0");
    if (dropout < 0 || dropout > 1) bad("dropout must be in [0,1]");
    if (noise_std < 0) bad("noise_std must be >= 0");
    if (val_fraction < 0 || val_fraction >= 1) bad("val_fraction must be in [0,1)");
    if (margin < 0 || 2 * margin + 8 > static_cast<int>(std::min(height, width))) bad("margin too large for extent");
  }

  [[nodiscard]] json to_json() const {
    return {{"version", kSpecVersion}, {"num_classes", num_classes}, {"samples_per_class", samples_per_class},
            {"t_min", t_min},         {"t_max", t_max},             {"height", height},
            {"width", width},         {"sigma", sigma},             {"dropout", dropout},
            {"noise_std", noise_std}, {"distractor", distractor},   {"seed", seed},
            {"val_fraction", val_fraction}, {"margin", margin}};
  }

  static SynthSpec from_json(const json& j) {
    if (!j.is_object()) throw io::IoError(io::IoErrorKind::schema, "synth spec must be an object");
    SynthSpec s;
    const auto known = s.to_json();
    for (const auto& [k, v] : j.items())
      if (!known.contains(k)) throw io::IoError(io::IoErrorKind::schema, "unknown synth spec key '" + k + "'");
    if (j.value("version", kSpecVersion) != kSpecVersion)
      throw io::IoError(io::IoErrorKind::schema, "unsupported synth spec version");
    try {
      auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
      };
      get("num_classes", s.num_classes);
      get("samples_per_class", s.samples_per_class);
      get("t_min", s.t_min);
      get("t_max", s.t_max);
      get("height", s.height);
      get("width", s.width);
      get("sigma", s.sigma);
      get("dropout", s.dropout);
      get("noise_std", s.noise_std);
      get("distractor", s.distractor);
      get("seed", s.seed);
      get("val_fraction", s.val_fraction);
      get("margin", s.margin);
    } catch (const json::exception& e) {
      throw io::IoError(io::IoErrorKind::schema, e.what());
    }
    s.validate();
    return s;
  }
};

using Point = std::array<double, 2>;
using Pose = std::array<Point, kNumCocoJoints>;

// Standing figure facing the camera, in body units with the hip centre at the
// origin and y pointing down. The person's left side is on the image right.
inline constexpr Pose kRestPose = {{{0.0, -0.86},    {0.0, -0.70},   {-0.17, -0.70}, {-0.22, -0.46}, {-0.24, -0.24},
                                    {0.17, -0.70},   {0.22, -0.46},  {0.24, -0.24},  {-0.09, 0.0},   {-0.10, 0.26},
                                    {-0.10, 0.52},   {0.09, 0.0},    {0.10, 0.26},   {0.10, 0.52},   {-0.035, -0.90},
                                    {0.035, -0.90},  {-0.07, -0.87}, {0.07, -0.87}}};

// Per-sample motion parameters. `cls` < 0 selects the idle filler used around
// the action window of untrimmed videos.
struct MotionParams {
  int cls = 0;
  double amp = 0, period = 1, phase = 0;
  double side = 1;  // +1: the person's left limb, -1: right limb; walk direction
  double drift = 0, drift_period = 1;
  double width_scale = 1, height_scale = 1;
};

inline MotionParams sample_motion(int cls, Rng& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  MotionParams m;
  m.cls = cls;
  m.phase = u(0, 2 * std::numbers::pi);
  m.side = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  m.width_scale = u(0.85, 1.15);
  m.height_scale = u(0.9, 1.1);
  switch (cls) {
    case 0: m.amp = u(0.08, 0.16), m.period = u(8, 14); break;     // wave
    case 1: m.amp = u(0.8, 1.0), m.period = u(18, 30); break;      // reach-up
    case 2: m.amp = u(0.12, 0.2), m.period = u(12, 20); break;     // jump
    case 3:                                                         // walk
      m.amp = u(0.08, 0.14), m.period = u(12, 18);
      m.drift = u(0.2, 0.35), m.drift_period = u(60, 100);
      break;
    case 4: m.amp = u(0.18, 0.28), m.period = u(20, 32); break;    // squat
    case 5: m.amp = u(0.8, 1.0), m.period = u(8, 14); break;       // clap
    case 6: m.amp = u(0.8, 1.2), m.period = u(14, 22); break;      // kick
    case 7: m.amp = u(0.04, 0.08), m.period = u(25, 40); break;    // idle-sway
    default: m.amp = u(0.01, 0.04), m.period = u(30, 50); break;   // idle filler
  }
  return m;
}

// Body-unit pose at frame t (hip-relative, whole-body offset folded in).
inline Pose pose_at(const MotionParams& m, double t) {
  Pose p = kRestPose;
  for (auto& q : p) q = {q[0] * m.width_scale, q[1] * m.height_scale};
  const double th = 2 * std::numbers::pi * t / m.period + m.phase;
  const double s = m.side;
  // limb indices for the chosen side: +1 maps to the person's left
  const std::size_t sh = s > 0 ? kLShoulder : kRShoulder, el = s > 0 ? kLElbow : kRElbow,
                    wr = s > 0 ? kLWrist : kRWrist, kn = s > 0 ? kLKnee : kRKnee, an = s > 0 ? kLAnkle : kRAnkle;
  auto lerp = [](Point a, Point b, double u) { return Point{a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u}; };
  double dx = 0, dy = 0;
  switch (m.cls) {
    case 0:
      p[el] = {p[sh][0] + s * 0.09 + 0.35 * m.amp * std::sin(th), p[sh][1] - 0.12};
      p[wr] = {p[sh][0] + s * 0.13 + m.amp * std::sin(th), p[sh][1] - 0.32};
      break;
    case 1: {
      const double u = m.amp * 0.5 * (1 - std::cos(th));
      for (std::size_t side : {0u, 1u}) {
        const std::size_t e = side ? kLElbow : kRElbow, w = side ? kLWrist : kRWrist;
        const double sx = side ? 1.0 : -1.0;
        p[e] = lerp(p[e], {sx * 0.2, -0.92}, u);
        p[w] = lerp(p[w], {sx * 0.18, -1.14}, u);
      }
      break;
    }
    case 2: {
      const double up = std::max(0.0, std::sin(th)), down = std::max(0.0, -std::sin(th));
      dy = -m.amp * up;
      for (std::size_t j : {kNose, kNeck, kRShoulder, kRElbow, kRWrist, kLShoulder, kLElbow, kLWrist, kRHip, kLHip,
                            kREye, kLEye, kREar, kLEar})
        p[j][1] += 0.07 * down;
      p[kRWrist][1] -= 0.2 * up;
      p[kLWrist][1] -= 0.2 * up;
      break;
    }
    case 3: {
      const double w = std::sin(th);
      p[kRAnkle][0] += m.amp * w, p[kLAnkle][0] -= m.amp * w;
      p[kRKnee][0] += 0.5 * m.amp * w, p[kLKnee][0] -= 0.5 * m.amp * w;
      p[kRAnkle][1] -= 0.05 * std::max(0.0, w), p[kLAnkle][1] -= 0.05 * std::max(0.0, -w);
      p[kRWrist][0] -= 0.6 * m.amp * w, p[kLWrist][0] += 0.6 * m.amp * w;
      const double ph = std::fmod(t / m.drift_period + m.phase / (2 * std::numbers::pi), 1.0);
      dx = s * m.drift * (ph < 0.5 ? 4 * ph - 1 : 3 - 4 * ph);
      break;
    }
    case 4: {
      const double u = 0.5 * (1 - std::cos(th)), d = m.amp * u;
      for (std::size_t j : {kNose, kNeck, kRShoulder, kRElbow, kRWrist, kLShoulder, kLElbow, kLWrist, kRHip, kLHip,
                            kREye, kLEye, kREar, kLEar})
        p[j][1] += d;
      p[kRKnee] = {p[kRKnee][0] - 0.08 * u, p[kRKnee][1] + 0.4 * d};
      p[kLKnee] = {p[kLKnee][0] + 0.08 * u, p[kLKnee][1] + 0.4 * d};
      p[kRWrist][1] -= 0.3 * u;
      p[kLWrist][1] -= 0.3 * u;
      break;
    }
    case 5: {
      const double u = 0.5 * (1 + std::cos(th)) * m.amp;
      p[kRWrist] = {-(0.03 + 0.2 * u), -0.5};
      p[kLWrist] = {0.03 + 0.2 * u, -0.5};
      p[kRElbow] = {-(0.2 + 0.06 * u), -0.52};
      p[kLElbow] = {0.2 + 0.06 * u, -0.52};
      break;
    }
    case 6: {
      const double v = m.amp * std::pow(std::max(0.0, std::sin(th)), 2);
      p[an] = {p[an][0] + s * 0.3 * v, p[an][1] - 0.3 * v};
      p[kn] = {p[kn][0] + s * 0.15 * v, p[kn][1] - 0.15 * v};
      break;
    }
    default:  // idle-sway and idle filler
      dx = m.amp * std::sin(th);
      for (std::size_t j : {kNose, kREye, kLEye, kREar, kLEar}) p[j][0] += 0.3 * m.amp * std::sin(th);
      break;
  }
  for (auto& q : p) q = {q[0] + dx, q[1] + dy};
  return p;
}

struct SynthSample {
  std::size_t index = 0;
  int label = 0;
  std::string split;
  HeatmapSequence seq;
  std::vector<std::array<int, 2>> positions;  // frames x 18 rendered (x, y) centres
  std::vector<double> distractor_params;      // empty unless the distractor variant is on
  json annotations;                           // untrimmed only
};

namespace detail {

// Places a hip-relative pixel trajectory so every joint stays in
// [margin, extent-1-margin]; the free translation range is sampled uniformly.
inline void place(std::vector<std::array<double, 2>>& pts, const SynthSpec& spec, Rng& rng) {
  double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
  for (const auto& q : pts) {
    x0 = std::min(x0, q[0]), x1 = std::max(x1, q[0]);
    y0 = std::min(y0, q[1]), y1 = std::max(y1, q[1]);
  }
  const double lo = spec.margin, hx = static_cast<double>(spec.width) - 1 - spec.margin,
               hy = static_cast<double>(spec.height) - 1 - spec.margin;
  // centre the bounding box, then shift by up to 6% of the extent where it still fits
  auto pick = [&](double a, double b, double l, double h, double extent) {
    const double from = l - a, to = h - b, mid = 0.5 * (from + to), r = 0.06 * extent;
    if (from > to) return mid;
    return std::uniform_real_distribution<double>(std::max(from, mid - r), std::min(to, mid + r) + 1e-9)(rng);
  };
  const double cx = pick(x0, x1, lo, hx, static_cast<double>(spec.width)),
               cy = pick(y0, y1, lo, hy, static_cast<double>(spec.height));
  for (auto& q : pts) q = {std::clamp(q[0] + cx, lo, hx), std::clamp(q[1] + cy, lo, hy)};
}

// Smooth random path for distractor joints, independent of the class.
inline std::vector<double> distractor_path(const SynthSpec& spec, std::size_t frames, Rng& rng,
                                           std::vector<std::array<double, 2>>& out) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height), m = spec.margin;
  std::vector<double> prm = {u(m, w - 1 - m), u(m, h - 1 - m), u(0.05, 0.2) * w, u(0.05, 0.2) * h,
                             u(10, 40),       u(10, 40),       u(0, 2 * std::numbers::pi), u(0, 2 * std::numbers::pi)};
  out.resize(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const double td = static_cast<double>(t);
    out[t] = {std::clamp(prm[0] + prm[2] * std::sin(2 * std::numbers::pi * td / prm[4] + prm[6]), m, w - 1 - m),
              std::clamp(prm[1] + prm[3] * std::sin(2 * std::numbers::pi * td / prm[5] + prm[7]), m, h - 1 - m)};
  }
  return prm;
}

inline void render(SynthSample& s, const SynthSpec& spec, const std::vector<std::array<double, 2>>& pts, Rng& rng) {
  const std::size_t T = s.seq.frames, H = spec.height, W = spec.width, J = kNumCocoJoints;
  const int r = static_cast<int>(std::ceil(4 * spec.sigma));
  const double inv = 1.0 / (2 * spec.sigma * spec.sigma);
  std::vector<float> lut(static_cast<std::size_t>(r + 1) * (r + 1));
  for (int a = 0; a <= r; ++a)
    for (int b = 0; b <= r; ++b) lut[static_cast<std::size_t>(a * (r + 1) + b)] = static_cast<float>(std::exp(-(a * a + b * b) * inv));
  s.positions.resize(T * J);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_std));
  std::bernoulli_distribution drop(spec.dropout);
  std::vector<float> bg(H * W);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(bg.begin(), bg.end(), 0.0f);
    for (std::size_t j = 0; j < J; ++j) {
      const auto& q = pts[t * J + j];
      const int xc = static_cast<int>(std::lround(q[0])), yc = static_cast<int>(std::lround(q[1]));
      s.positions[t * J + j] = {xc, yc};
      float* map = s.seq.map(t, j);
      for (int y = std::max(0, yc - r); y <= std::min<int>(static_cast<int>(H) - 1, yc + r); ++y)
        for (int x = std::max(0, xc - r); x <= std::min<int>(static_cast<int>(W) - 1, xc + r); ++x) {
          const float v = lut[static_cast<std::size_t>(std::abs(y - yc) * (r + 1) + std::abs(x - xc))];
          const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
          map[i] = v;
          bg[i] = std::max(bg[i], v);
        }
    }
    float* back = s.seq.map(t, kBackground);
    for (std::size_t i = 0; i < H * W; ++i) back[i] = 1.0f - bg[i];
    for (std::size_t j = 0; j <= J; ++j) {
      float* map = s.seq.map(t, j);
      if (spec.noise_std > 0)
        for (std::size_t i = 0; i < H * W; ++i) map[i] = std::clamp(map[i] + noise(rng), 0.0f, 1.0f);
      if (spec.dropout > 0 && drop(rng)) std::fill_n(map, H * W, 0.0f);
    }
  }
}

inline std::vector<std::array<double, 2>> body_track(const SynthSpec& spec, std::size_t frames, Rng& rng,
                                                     const std::function<const MotionParams&(std::size_t)>& motion,
                                                     const std::function<double(std::size_t)>& local_time) {
  const double base = std::min(spec.height, spec.width) * 0.6 / 1.45;
  const double scale = base * std::uniform_real_distribution<double>(0.85, 1.1)(rng);
  std::vector<std::array<double, 2>> pts(frames * kNumCocoJoints);
  std::normal_distribution<double> jitter(0.0, 0.25);
  for (std::size_t t = 0; t < frames; ++t) {
    const Pose p = pose_at(motion(t), local_time(t));
    for (std::size_t j = 0; j < kNumCocoJoints; ++j)
      pts[t * kNumCocoJoints + j] = {scale * p[j][0] + jitter(rng), scale * p[j][1] + jitter(rng)};
  }
  place(pts, spec, rng);
  return pts;
}

inline void add_distractors(SynthSample& s, const SynthSpec& spec, std::vector<std::array<double, 2>>& pts,
                            std::uint64_t stream, std::size_t index) {
  if (!spec.distractor) return;
  Rng drng = substream(spec.seed, {stream, index, 7});
  std::vector<std::array<double, 2>> a, b;
  s.distractor_params = distractor_path(spec, s.seq.frames, drng, a);
  const auto pb = distractor_path(spec, s.seq.frames, drng, b);
  s.distractor_params.insert(s.distractor_params.end(), pb.begin(), pb.end());
  for (std::size_t t = 0; t < s.seq.frames; ++t) {
    pts[t * kNumCocoJoints + kLEar] = a[t];
    pts[t * kNumCocoJoints + kREar] = b[t];
  }
}

inline std::string split_for(const SynthSpec& spec, std::size_t within_class) {
  const auto n_val = static_cast<std::size_t>(std::lround(spec.val_fraction * static_cast<double>(spec.samples_per_class)));
  return within_class >= spec.samples_per_class - n_val ? "val" : "train";
}

}  // namespace detail

inline std::size_t num_samples(const SynthSpec& spec) { return spec.num_classes * spec.samples_per_class; }

// Sample `index` of the trimmed corpus; classes interleave so every prefix is balanced.
inline SynthSample make_sample(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  if (index >= num_samples(spec)) throw ValueError("sample index out of range");
  Rng rng = substream(spec.seed, {1, index});
  SynthSample s;
  s.index = index;
  s.label = static_cast<int>(index % spec.num_classes);
  s.split = detail::split_for(spec, index / spec.num_classes);
  const std::size_t T = std::uniform_int_distribution<std::size_t>(spec.t_min, spec.t_max)(rng);
  const MotionParams m = sample_motion(s.label, rng);
  auto pts = detail::body_track(spec, T, rng, [&](std::size_t) -> const MotionParams& { return m; },
                                [](std::size_t t) { return static_cast<double>(t); });
  s.seq = HeatmapSequence(T, kNumChannelsWithBackground, spec.height, spec.width);
  detail::add_distractors(s, spec, pts, 1, index);
  detail::render(s, spec, pts, rng);
  return s;
}

inline std::vector<std::size_t> action_clips(std::size_t start, std::size_t end) {
  std::vector<std::size_t> k;
  for (std::size_t c = 0; c < kUntrimmedFrames / kClipFrames; ++c)
    if (c * kClipFrames < end && (c + 1) * kClipFrames > start) k.push_back(c);
  return k;
}

// Untrimmed video: the class motion occupies one contiguous window and idle
// micro-motion fills the rest.
inline SynthSample make_untrimmed(const SynthSpec& spec, std::size_t index, double window_fraction) {
  spec.validate();
  if (!(window_fraction > 0) || window_fraction > 1) throw ValueError("window fraction must be in (0,1]");
  if (index >= num_samples(spec)) throw ValueError("sample index out of range");
  Rng rng = substream(spec.seed, {2, index});
  SynthSample s;
  s.index = index;
  s.label = static_cast<int>(index % spec.num_classes);
  s.split = detail::split_for(spec, index / spec.num_classes);
  const std::size_t T = kUntrimmedFrames;
  const auto len = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(window_fraction * T)), 1, T);
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, T - len)(rng);
  const MotionParams act = sample_motion(s.label, rng);
  const MotionParams idle = sample_motion(-1, rng);
  auto pts = detail::body_track(
      spec, T, rng, [&](std::size_t t) -> const MotionParams& { return t >= start && t < start + len ? act : idle; },
      [&](std::size_t t) { return static_cast<double>(t >= start && t < start + len ? t - start : t); });
  s.seq = HeatmapSequence(T, kNumChannelsWithBackground, spec.height, spec.width);
  detail::add_distractors(s, spec, pts, 2, index);
  detail::render(s, spec, pts, rng);
  s.annotations = {{"window", {start, start + len}}, {"clip_frames", kClipFrames}, {"action_clips", action_clips(start, start + len)}};
  return s;
}

inline io::ManifestRecord record_for(const SynthSample& s, const std::string& prefix) {
  char name[64];
  std::snprintf(name, sizeof name, "%s_%05zu", prefix.c_str(), s.index);
  return {name, std::string(name) + ".pmkt", s.label, {}, s.split, s.seq.frames, s.annotations};
}

namespace detail {
template <typename Make>
std::vector<io::ManifestRecord> write_corpus(const SynthSpec& spec, const fs::path& out, std::size_t workers,
                                             const std::string& prefix, Make make) {
  fs::create_directories(out);
  std::vector<io::ManifestRecord> recs(num_samples(spec));
  parallel_for(
      0, recs.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          const auto s = make(i);
          recs[i] = record_for(s, prefix);
          io::write_sequence(out / recs[i].path, s.seq, {{"class", s.label}, {"class_name", kClassNames[s.label]}});
        }
      },
      workers);
  io::save_manifest(out / "manifest.json", recs);
  io::write_text_atomic(out / "synth_spec.json", spec.to_json().dump(1));
  return recs;
}
}  // namespace detail

inline std::vector<io::ManifestRecord> generate(const SynthSpec& spec, const fs::path& out, std::size_t workers = 1) {
  spec.validate();
  return detail::write_corpus(spec, out, workers, "seq", [&](std::size_t i) { return make_sample(spec, i); });
}

inline std::vector<io::ManifestRecord> generate_untrimmed(const SynthSpec& spec, double window_fraction,
                                                          const fs::path& out, std::size_t workers = 1) {
  spec.validate();
  return detail::write_corpus(spec, out, workers, "video",
                              [&](std::size_t i) { return make_untrimmed(spec, i, window_fraction); });
}

}  // namespace pmk::synth
