#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "encoding.hpp"
#include "error.hpp"
#include "gate.hpp"
#include "io.hpp"
#include "models.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "train.hpp"

namespace pmk::clips {

inline constexpr std::size_t kClipFrames = 16;
inline constexpr std::size_t kMaxClips = 24;

struct ClipWindow {
  std::size_t index = 0;                // window position in the video
  std::size_t begin = 0, end = 0;       // nominal frame range [begin, end); end may exceed T when looped
};

// Non-overlapping 16-frame windows; a trailing partial window is completed by
// looping from the start. More than 24 windows are subsampled uniformly.
inline std::vector<ClipWindow> clip_windows(std::size_t frames) {
  if (frames < kClipFrames) throw ValueError("split_clips: need at least 16 frames, got " + std::to_string(frames));
  const std::size_t n = (frames + kClipFrames - 1) / kClipFrames;
  std::vector<ClipWindow> all;
  for (std::size_t k = 0; k < n; ++k) all.push_back({k, k * kClipFrames, (k + 1) * kClipFrames});
  if (n <= kMaxClips) return all;
  std::vector<ClipWindow> out;
  for (std::size_t i = 0; i < kMaxClips; ++i) out.push_back(all[i * n / kMaxClips]);
  return out;
}

inline std::vector<HeatmapSequence> split_clips(const HeatmapSequence& seq) {
  std::vector<HeatmapSequence> out;
  const std::size_t fs = seq.frame_size();
  for (const auto& w : clip_windows(seq.frames)) {
    HeatmapSequence c(kClipFrames, seq.joints, seq.height, seq.width);
    for (std::size_t t = 0; t < kClipFrames; ++t) {
      const std::size_t src = (w.begin + t) % seq.frames;
      std::copy_n(seq.values.data() + src * fs, fs, c.values.data() + t * fs);
    }
    out.push_back(std::move(c));
  }
  return out;
}

struct ClipVideo {
  std::string id;
  int label = 0;
  std::vector<ClipWindow> windows;
  std::vector<PoseRepresentation> clips;
  std::vector<int> action;  // 1 if the clip intersects the annotated action window; empty if unknown
};

inline ClipVideo encode_video(const HeatmapSequence& seq, std::string id, int label, std::size_t channels, NormTag norm,
                              const std::vector<std::size_t>* action_clips = nullptr) {
  ClipVideo v;
  v.id = std::move(id);
  v.label = label;
  v.windows = clip_windows(seq.frames);
  for (const auto& c : split_clips(seq)) v.clips.push_back(encode(c, channels, norm));
  if (action_clips)
    for (const auto& w : v.windows)
      v.action.push_back(std::find(action_clips->begin(), action_clips->end(), w.index) != action_clips->end());
  return v;
}

// ---- oracle ----

struct OracleSet {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> members;  // per video, sorted by descending true-class probability
  std::vector<std::vector<int>> hard;             // per video, per clip 0/1
};

// probs[v] is [N_v, K] row-major normalized logits of the clip classifier.
inline OracleSet build_oracle(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels,
                              std::size_t num_classes, std::size_t k) {
  if (probs.size() != labels.size()) throw ValueError("build_oracle: one label per video required");
  if (k < 1) throw ValueError("build_oracle: K must be >= 1");
  OracleSet o;
  o.k = k;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    if (probs[v].empty() || probs[v].size() % num_classes != 0)
      throw ValueError("build_oracle: missing logits for video " + std::to_string(v));
    const std::size_t n = probs[v].size() / num_classes;
    const auto y = static_cast<std::size_t>(labels[v]);
    if (y >= num_classes) throw ValueError("build_oracle: label out of range");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return probs[v][a * num_classes + y] > probs[v][b * num_classes + y];
    });
    order.resize(std::min(k, n));
    std::vector<int> hard(n, 0);
    for (auto i : order) hard[i] = 1;
    o.members.push_back(std::move(order));
    o.hard.push_back(std::move(hard));
  }
  return o;
}

// ---- ranking ----

// Mann-Whitney AUC; ties count one half.
inline double auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc: size mismatch");
  double wins = 0;
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    ++np;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
    }
  }
  for (int p : positive) nn += !p;
  if (np == 0 || nn == 0) throw ValueError("auc: need both positive and negative samples");
  return wins / (static_cast<double>(np) * static_cast<double>(nn));
}

inline std::unique_ptr<Network<float>> build_ranker(const io::RunConfig& cfg, std::size_t joints, std::uint64_t seed) {
  return train::build_model(cfg, joints, 1, seed);
}

inline std::vector<double> score_clips(Network<float>& ranker, const std::vector<PoseRepresentation>& clips,
                                       std::size_t batch = 32) {
  std::vector<double> out;
  for (std::size_t lo = 0; lo < clips.size(); lo += batch) {
    std::vector<const PoseRepresentation*> ptrs;
    for (std::size_t i = lo; i < std::min(clips.size(), lo + batch); ++i) ptrs.push_back(&clips[i]);
    Graph<float> g;
    auto res = ranker.forward(g, make_batch<float>(ptrs), nn::Mode::eval, nullptr);
    for (float v : res.logits.value().data()) out.push_back(v);
  }
  return out;
}

struct RankerEpoch {
  std::size_t epoch = 0;
  double loss = 0, pair_accuracy = 0, val_pair_accuracy = 0, lr = 0;
};

struct RankerResult {
  std::vector<RankerEpoch> history;
  std::size_t skipped_videos = 0;
  double best = -1;
};

// All (oracle, non-oracle) clip pairs of each usable video.
inline std::vector<std::array<std::size_t, 3>> pair_pool(const std::vector<ClipVideo>& videos,
                                                         const std::vector<std::vector<int>>& hard,
                                                         std::size_t* skipped = nullptr) {
  std::vector<std::array<std::size_t, 3>> pool;
  std::size_t skip = 0;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < hard[v].size(); ++i) (hard[v][i] ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty()) {
      ++skip;
      continue;
    }
    for (auto p : pos)
      for (auto n : neg) pool.push_back({v, p, n});
  }
  if (skipped) *skipped = skip;
  return pool;
}

inline double pair_accuracy(Network<float>& ranker, const std::vector<ClipVideo>& videos,
                            const std::vector<std::vector<int>>& hard) {
  const auto pool = pair_pool(videos, hard);
  if (pool.empty()) return 0;
  std::vector<std::vector<double>> scores;
  for (const auto& v : videos) scores.push_back(score_clips(ranker, v.clips));
  std::size_t ok = 0;
  for (const auto& [v, p, n] : pool) ok += scores[v][p] > scores[v][n];
  return static_cast<double>(ok) / static_cast<double>(pool.size());
}

// Pairwise saliency ranker: each batch holds `batch_size/2` (oracle, non-oracle)
// pairs from the same video; loss -log sigmoid(s(o) - s(n)) (or margin ranking).
inline RankerResult train_ranker(Network<float>& ranker, const std::vector<ClipVideo>& videos,
                                 const std::vector<std::vector<int>>& hard, const io::RunConfig& cfg,
                                 std::size_t pairs_per_video = 6, const std::vector<ClipVideo>* val_videos = nullptr,
                                 const std::vector<std::vector<int>>* val_hard = nullptr) {
  if (hard.size() != videos.size()) throw ValueError("train_ranker: hard labels must cover every video");
  RankerResult res;
  const auto pool = pair_pool(videos, hard, &res.skipped_videos);
  if (pool.empty()) throw ValueError("train_ranker: empty pair pool");
  // group pool by video so every video contributes equally
  std::vector<std::vector<std::size_t>> by_video(videos.size());
  for (std::size_t i = 0; i < pool.size(); ++i) by_video[pool[i][0]].push_back(i);

  const auto groups = JointGroups::coco19();
  const AugmentationParams aug{cfg.beta, cfg.gamma, cfg.flip_prob};
  const bool jitter = cfg.augment && (cfg.beta > 0 || cfg.gamma > 0 || cfg.flip_prob > 0);
  Adam<float> opt(ranker.parameters(), AdamConfig{cfg.lr});
  PlateauScheduler sched(static_cast<int>(cfg.patience), cfg.decay);
  const std::size_t pairs_per_batch = std::max<std::size_t>(1, cfg.batch_size / 2);
  std::vector<Tensor<float>> best_state;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = substream(cfg.seed, {20, epoch});
    std::vector<std::size_t> chosen;
    for (const auto& ids : by_video) {
      if (ids.empty()) continue;
      for (std::size_t k = 0; k < pairs_per_video; ++k)
        chosen.push_back(ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng)]);
    }
    std::shuffle(chosen.begin(), chosen.end(), rng);
    double loss_sum = 0;
    std::size_t ok = 0, seen = 0;
    for (std::size_t lo = 0; lo < chosen.size(); lo += pairs_per_batch) {
      const std::size_t hi = std::min(chosen.size(), lo + pairs_per_batch);
      const std::size_t b = hi - lo;
      std::vector<PoseRepresentation> inputs;
      inputs.reserve(2 * b);
      for (int side = 1; side <= 2; ++side)
        for (std::size_t i = lo; i < hi; ++i) {
          const auto& [v, p, n] = pool[chosen[i]];
          const auto& clip = videos[v].clips[side == 1 ? p : n];
          if (jitter) {
            Rng r = substream(cfg.seed, {21, epoch, i, static_cast<std::uint64_t>(side)});
            inputs.push_back(augment(clip, groups, aug, r));
          } else {
            inputs.push_back(clip);
          }
        }
      std::vector<const PoseRepresentation*> ptrs;
      for (const auto& r : inputs) ptrs.push_back(&r);
      Graph<float> g;
      Rng noise = substream(cfg.seed, {22, epoch, lo});
      auto out = ranker.forward(g, make_batch<float>(ptrs), nn::Mode::train, &noise);
      auto s = nn::reshape(out.logits, Shape{2 * b});
      auto pos = nn::slice_rows(s, 0, b), neg = nn::slice_rows(s, b, 2 * b);
      Var<float> loss = cfg.rank_loss == "margin" ? nn::margin_ranking_loss(pos, neg, static_cast<float>(cfg.margin))
                                                  : nn::pairwise_logistic_loss(pos, neg);
      if (out.gate_weights && cfg.lambda_reg > 0)
        loss = nn::add(loss, nn::mul_scalar(gate::batch_shaping_loss(*out.gate_weights, {cfg.prior_a, cfg.prior_b}),
                                            static_cast<float>(cfg.lambda_reg)));
      loss_sum += loss.value()[0] * static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) ok += pos.value()[i] > neg.value()[i];
      seen += b;
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    RankerEpoch rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(seen);
    rec.pair_accuracy = static_cast<double>(ok) / static_cast<double>(seen);
    rec.lr = opt.lr();
    const double metric = (val_videos && val_hard) ? pair_accuracy(ranker, *val_videos, *val_hard) : rec.pair_accuracy;
    rec.val_pair_accuracy = metric;
    if (metric > res.best) {
      res.best = metric;
      best_state = train::detail::snapshot(ranker);
    }
    opt.set_lr(sched.step(metric, opt.lr()));
    res.history.push_back(rec);
  }
  if (!best_state.empty()) train::detail::restore(ranker, best_state);
  return res;
}

// ---- selection ----

enum class Consensus { max, avg };

inline Consensus parse_consensus(const std::string& s) {
  if (s == "max") return Consensus::max;
  if (s == "avg") return Consensus::avg;
  throw ValueError("consensus must be max|avg, got '" + s + "'");
}

// Indices of the k highest scores; equal scores keep the lower clip index first.
inline std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  if (k < 1) throw ValueError("K_select must be >= 1");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

// probs is [N, K]; returns the argmax of the consensus over the selected rows.
inline int consensus_predict(const std::vector<double>& probs, std::size_t num_classes,
                             const std::vector<std::size_t>& selected, Consensus mode) {
  if (selected.empty()) throw ValueError("consensus over an empty selection");
  std::vector<double> agg(num_classes, mode == Consensus::max ? -1.0 : 0.0);
  for (auto i : selected)
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double p = probs[i * num_classes + c];
      agg[c] = mode == Consensus::max ? std::max(agg[c], p) : agg[c] + p / static_cast<double>(selected.size());
    }
  return static_cast<int>(std::max_element(agg.begin(), agg.end()) - agg.begin());
}

struct Selection {
  std::vector<std::size_t> selected;
  int prediction = -1;
};

inline Selection select_and_classify(std::span<const double> saliency, const std::vector<double>& probs,
                                     std::size_t num_classes, std::size_t k_select, Consensus mode) {
  Selection s;
  s.selected = top_k(saliency, k_select);
  s.prediction = consensus_predict(probs, num_classes, s.selected, mode);
  return s;
}

inline std::vector<double> clip_probabilities(Network<float>& classifier, const ClipVideo& v) {
  std::vector<const PoseRepresentation*> ptrs;
  for (const auto& c : v.clips) ptrs.push_back(&c);
  return train::predict(classifier, ptrs, false).scores;
}

}  // namespace pmk::clips
