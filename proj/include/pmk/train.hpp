#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "encoding.hpp"
#include "gate.hpp"
#include "io.hpp"
#include "joints.hpp"
#include "models.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace pmk::train {

using io::json;

struct Dataset {
  std::vector<PoseRepresentation> reps;
  std::vector<int> labels;               // single-label targets
  std::vector<std::vector<int>> multi;   // multi-label targets (empty when single-label)
  std::size_t num_classes = 0;

  [[nodiscard]] std::size_t size() const { return reps.size(); }
  [[nodiscard]] bool multi_label() const { return !multi.empty(); }
};

// ---- metrics ----

inline std::atomic<std::size_t>& absent_class_warning_count() {
  static std::atomic<std::size_t> n{0};
  return n;
}

// Mean per-class accuracy. Classes with no samples are excluded from the mean.
inline double mean_class_accuracy(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes) {
  if (pred.size() != truth.size()) throw ShapeError("mean_class_accuracy: size mismatch");
  std::vector<std::size_t> hit(num_classes, 0), total(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto y = static_cast<std::size_t>(truth[i]);
    if (y >= num_classes) throw ValueError("mean_class_accuracy: label out of range");
    ++total[y];
    hit[y] += pred[i] == truth[i];
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (total[c] == 0) {
      ++absent_class_warning_count();
      continue;
    }
    sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  if (present == 0) throw ValueError("mean_class_accuracy: no samples");
  return sum / static_cast<double>(present);
}

// All-point interpolated average precision: mean of precision@k over the
// ranks k that hold a positive. Ties keep input order.
inline double average_precision(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ShapeError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k)
    if (positive[order[k]]) sum += static_cast<double>(++hits) / static_cast<double>(k + 1);
  if (hits == 0) throw ValueError("average_precision: no positives");
  return sum / static_cast<double>(hits);
}

// scores is [N, K] row-major; classes without positives are skipped.
inline double mean_average_precision(const std::vector<double>& scores, const std::vector<std::vector<int>>& targets,
                                     std::size_t num_classes) {
  const std::size_t n = targets.size();
  double sum = 0;
  std::size_t used = 0;
  std::vector<double> col(n);
  std::vector<int> pos(n);
  for (std::size_t c = 0; c < num_classes; ++c) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * num_classes + c];
      pos[i] = std::find(targets[i].begin(), targets[i].end(), static_cast<int>(c)) != targets[i].end();
      any = any || pos[i];
    }
    if (!any) {
      ++absent_class_warning_count();
      continue;
    }
    sum += average_precision(col, pos);
    ++used;
  }
  if (used == 0) throw ValueError("mean_average_precision: no class has positives");
  return sum / static_cast<double>(used);
}

// ---- model construction ----

inline std::unique_ptr<Network<float>> build_model(const io::RunConfig& cfg, std::size_t joints,
                                                   std::size_t num_outputs, std::uint64_t seed) {
  if (cfg.model == "jmrn") {
    JmrnConfig m;
    m.joints = joints;
    m.channels = cfg.channels;
    m.c_dim = cfg.c_dim;
    m.tau = cfg.tau;
    m.prior = {cfg.prior_a, cfg.prior_b};
    m.lambda_reg = cfg.lambda_reg;
    m.num_classes = num_outputs;
    return std::make_unique<Jmrn<float>>(m, seed);
  }
  BaselineConfig b;
  b.joints = joints;
  b.channels = cfg.channels;
  b.num_classes = num_outputs;
  return std::make_unique<StackedBaseline<float>>(b, seed);
}

// ---- evaluation ----

struct Predictions {
  std::vector<double> scores;  // [N, K] softmax or sigmoid outputs
  std::vector<double> gates;   // [N, J] eval gate weights (jmrn only)
  std::size_t classes = 0, joints = 0;

  [[nodiscard]] std::vector<int> argmax() const {
    std::vector<int> out;
    for (std::size_t i = 0; i * classes < scores.size(); ++i) {
      const auto* row = scores.data() + i * classes;
      out.push_back(static_cast<int>(std::max_element(row, row + classes) - row));
    }
    return out;
  }
};

inline Predictions predict(Network<float>& net, const std::vector<const PoseRepresentation*>& reps, bool multi_label,
                           std::size_t batch = 32) {
  Predictions p;
  p.classes = net.num_outputs();
  for (std::size_t lo = 0; lo < reps.size(); lo += batch) {
    const std::size_t hi = std::min(reps.size(), lo + batch);
    std::vector<const PoseRepresentation*> chunk(reps.begin() + static_cast<std::ptrdiff_t>(lo),
                                                 reps.begin() + static_cast<std::ptrdiff_t>(hi));
    Graph<float> g;
    auto out = net.forward(g, make_batch<float>(chunk), nn::Mode::eval, nullptr);
    const auto& z = out.logits.value();
    if (multi_label) {
      for (float v : z.data()) p.scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    } else {
      const auto s = nn::softmax_rows(z);
      p.scores.insert(p.scores.end(), s.data().begin(), s.data().end());
    }
    if (out.gate_weights) {
      p.joints = out.gate_weights->shape()[1];
      const auto& w = out.gate_weights->value();
      p.gates.insert(p.gates.end(), w.data().begin(), w.data().end());
    }
  }
  return p;
}

inline std::vector<const PoseRepresentation*> pointers(const Dataset& d) {
  std::vector<const PoseRepresentation*> out;
  for (const auto& r : d.reps) out.push_back(&r);
  return out;
}

inline double evaluate_metric(const Predictions& p, const Dataset& d) {
  if (d.multi_label()) return mean_average_precision(p.scores, d.multi, p.classes);
  return mean_class_accuracy(p.argmax(), d.labels, p.classes);
}

struct GateStats {
  std::vector<double> mean, stddev;
};

inline GateStats gate_stats(const Predictions& p) {
  GateStats s;
  if (p.joints == 0) return s;
  const std::size_t n = p.gates.size() / p.joints;
  s.mean.assign(p.joints, 0.0);
  s.stddev.assign(p.joints, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p.joints; ++j) s.mean[j] += p.gates[i * p.joints + j] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p.joints; ++j) {
      const double d = p.gates[i * p.joints + j] - s.mean[j];
      s.stddev[j] += d * d / static_cast<double>(n);
    }
  for (auto& v : s.stddev) v = std::sqrt(v);
  return s;
}

// ---- training ----

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, train_accuracy = 0, val_metric = 0, lr = 0, seconds = 0;
  GateStats gates;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_metric = -1;
  std::size_t best_epoch = 0;
  std::size_t skipped_samples = 0;
};

struct TrainHooks {
  std::function<void(const EpochRecord&, bool improved)> on_epoch;
};

namespace detail {
template <typename T>
std::vector<Tensor<T>> snapshot(Network<T>& net) {
  std::vector<Tensor<T>> out;
  nn::StateVisitor<T> v{[&](const std::string&, Parameter<T>& p) { out.push_back(p.value); },
                        [&](const std::string&, Tensor<T>& t) { out.push_back(t); }};
  net.visit(v);
  return out;
}
template <typename T>
void restore(Network<T>& net, const std::vector<Tensor<T>>& state) {
  std::size_t i = 0;
  nn::StateVisitor<T> v{[&](const std::string&, Parameter<T>& p) { p.value = state[i++]; },
                        [&](const std::string&, Tensor<T>& t) { t = state[i++]; }};
  net.visit(v);
}
}  // namespace detail

// One forward/backward on a batch; returns (loss, correct count).
inline std::pair<double, std::size_t> train_step(Network<float>& net, Adam<float>& opt, const Dataset& data,
                                                 const std::vector<std::size_t>& idx,
                                                 const std::vector<PoseRepresentation>& inputs,
                                                 const io::RunConfig& cfg, Rng& noise) {
  std::vector<const PoseRepresentation*> ptrs;
  for (const auto& r : inputs) ptrs.push_back(&r);
  Graph<float> g;
  auto out = net.forward(g, make_batch<float>(ptrs), nn::Mode::train, &noise);
  Var<float> loss;
  const std::size_t k = net.num_outputs();
  if (data.multi_label()) {
    Tensor<float> targets(Shape{idx.size(), k});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c : data.multi[idx[i]]) targets.at(i, static_cast<std::size_t>(c)) = 1.0f;
    loss = nn::binary_cross_entropy(out.logits, targets);
  } else {
    std::vector<int> y;
    for (auto i : idx) y.push_back(data.labels[i]);
    loss = nn::softmax_cross_entropy<float>(out.logits, y);
  }
  if (out.gate_weights && cfg.lambda_reg > 0)
    loss = nn::add(loss, nn::mul_scalar(gate::batch_shaping_loss(*out.gate_weights, {cfg.prior_a, cfg.prior_b}),
                                        static_cast<float>(cfg.lambda_reg)));
  const double lv = loss.value()[0];
  opt.zero_grad();
  g.backward(loss);
  opt.step();
  std::size_t correct = 0;
  if (!data.multi_label()) {
    const auto& z = out.logits.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = z.ptr() + i * k;
      correct += static_cast<int>(std::max_element(row, row + k) - row) == data.labels[idx[i]];
    }
  }
  return {lv, correct};
}

inline void check_dataset(const Dataset& d, const char* what) {
  if (d.reps.empty()) throw ValueError(std::string(what) + " set is empty");
  if (!d.multi_label() && d.labels.size() != d.reps.size()) throw ValueError(std::string(what) + ": label count mismatch");
  if (d.multi_label() && d.multi.size() != d.reps.size()) throw ValueError(std::string(what) + ": label count mismatch");
}

// Trains `net` in place; the best validation state is restored at the end.
inline TrainResult fit(Network<float>& net, const Dataset& train, const Dataset& val, const io::RunConfig& cfg,
                       const TrainHooks& hooks = {}) {
  check_dataset(train, "train");
  check_dataset(val, "val");
  const bool jitter = cfg.augment && (cfg.beta > 0 || cfg.gamma > 0 || cfg.flip_prob > 0);
  if (jitter && train.reps.front().tag == NormTag::raw)
    throw ValueError("augmentation needs normalized representations; got norm=raw");
  const auto groups = JointGroups::coco19();
  const AugmentationParams aug{cfg.beta, cfg.gamma, cfg.flip_prob};

  Adam<float> opt(net.parameters(), AdamConfig{cfg.lr});
  PlateauScheduler sched(static_cast<int>(cfg.patience), cfg.decay);
  TrainResult res;
  std::vector<Tensor<float>> best_state;
  const auto val_ptrs = pointers(val);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = substream(cfg.seed, {10, epoch});
    std::shuffle(order.begin(), order.end(), shuffle);

    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      if (hi - lo < 2) {
        res.skipped_samples += hi - lo;
        continue;
      }
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<PoseRepresentation> inputs;
      for (auto i : idx) {
        if (jitter) {
          Rng r = substream(cfg.seed, {11, epoch, i});
          inputs.push_back(augment(train.reps[i], groups, aug, r));
        } else {
          inputs.push_back(train.reps[i]);
        }
      }
      Rng noise = substream(cfg.seed, {12, epoch, lo});
      std::pair<double, std::size_t> step;
      try {
        step = train_step(net, opt, train, idx, inputs, cfg, noise);
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch << " batch " << lo / cfg.batch_size << " (lr " << opt.lr()
           << "): " << e.what();
        throw NumericError(os.str());
      }
      loss_sum += step.first * static_cast<double>(idx.size());
      correct += step.second;
      seen += idx.size();
    }
    if (seen == 0) throw ValueError("no training batch with at least 2 samples");

    const auto pred = predict(net, val_ptrs, val.multi_label(), std::max<std::size_t>(cfg.batch_size, 2));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.val_metric = evaluate_metric(pred, val);
    rec.lr = opt.lr();
    rec.gates = gate_stats(pred);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool improved = rec.val_metric > res.best_metric;
    if (improved) {
      res.best_metric = rec.val_metric;
      res.best_epoch = epoch;
      best_state = detail::snapshot(net);
    }
    opt.set_lr(sched.step(rec.val_metric, opt.lr()));
    res.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, improved);
  }
  if (!best_state.empty()) detail::restore(net, best_state);
  return res;
}

// ---- reports ----

inline std::string metrics_csv(const TrainResult& r) {
  std::ostringstream os;
  os.precision(10);
  const std::size_t nj = r.history.empty() ? 0 : r.history.front().gates.mean.size();
  os << "epoch,train_loss,train_accuracy,val_metric,lr,seconds";
  for (std::size_t j = 0; j < nj; ++j) os << ",gate_mean_" << j << ",gate_std_" << j;
  os << "\n";
  for (const auto& e : r.history) {
    os << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_metric << ',' << e.lr << ','
       << e.seconds;
    for (std::size_t j = 0; j < nj; ++j) os << ',' << e.gates.mean[j] << ',' << e.gates.stddev[j];
    os << "\n";
  }
  return os.str();
}

// Deterministic part of the report: everything except wall-clock timings.
inline json metrics_json(const TrainResult& r, const std::string& config_hash, bool multi_label) {
  json epochs = json::array();
  for (const auto& e : r.history)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_metric", e.val_metric},
                      {"lr", e.lr},
                      {"gate_mean", e.gates.mean},
                      {"gate_std", e.gates.stddev}});
  return {{"config_hash", config_hash},
          {"metric", multi_label ? "mAP" : "mean_class_accuracy"},
          {"epochs", epochs},
          {"summary", {{"best_metric", r.best_metric}, {"best_epoch", r.best_epoch}, {"skipped_samples", r.skipped_samples}}}};
}

inline json timings_json(const TrainResult& r) {
  json t = json::array();
  for (const auto& e : r.history) t.push_back(e.seconds);
  return t;
}

inline std::string gate_report_csv(const GateStats& s) {
  std::ostringstream os;
  os.precision(10);
  os << "joint,name,mean_gate,std_gate\n";
  for (std::size_t j = 0; j < s.mean.size(); ++j)
    os << j << ',' << (j < kJointNames.size() ? std::string(kJointNames[j]) : "j" + std::to_string(j)) << ','
       << s.mean[j] << ',' << s.stddev[j] << "\n";
  return os.str();
}

}  // namespace pmk::train
