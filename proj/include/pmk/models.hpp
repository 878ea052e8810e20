#pragma once

// Joint-Motion Re-weighting Network and the stacked-joint baseline CNN.
//
// Both networks take a joint-major batch [N, J*C, H, W]: channels j*C .. j*C+C-1
// hold joint j's C temporal channels.

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pmk/autodiff.hpp"
#include "pmk/encoding.hpp"
#include "pmk/gate.hpp"
#include "pmk/layers.hpp"
#include "pmk/ops.hpp"
#include "pmk/rng.hpp"

namespace pmk {

struct JmrnConfig {
  std::size_t joints = 19;
  std::size_t channels = 3;
  std::size_t c_dim = 32;
  std::array<std::size_t, 4> extractor_widths{32, 64, 128, 256};
  std::size_t head_width = 256;
  double tau = 2.0 / 3.0;
  gate::BetaPrior prior{};
  double lambda_reg = 0.1;
  std::size_t num_classes = 8;
};

struct BaselineConfig {
  std::size_t joints = 19;
  std::size_t channels = 3;
  std::array<std::size_t, 6> widths{64, 64, 128, 128, 256, 256};
  std::array<std::size_t, 6> strides{1, 2, 1, 2, 1, 2};
  std::size_t num_classes = 8;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  std::optional<Var<T>> gate_logits;   // [N, J]
  std::optional<Var<T>> gate_weights;  // [N, J]
};

// Common interface for the trainable classifiers.
template <typename T>
class Network {
 public:
  virtual ~Network() = default;

  // input is [N, J*C, H, W]. rng supplies gate noise in train mode (may be
  // null in eval mode).
  virtual ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& input, nn::Mode mode, Rng* rng) = 0;
  virtual void visit(nn::StateVisitor<T>& v) = 0;
  [[nodiscard]] virtual std::string kind() const = 0;
  [[nodiscard]] virtual std::size_t num_outputs() const = 0;
  [[nodiscard]] virtual std::size_t joints() const = 0;
  [[nodiscard]] virtual std::size_t channels() const = 0;

  [[nodiscard]] std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    nn::StateVisitor<T> v{[&](const std::string&, Parameter<T>& p) { out.push_back(&p); },
                          [](const std::string&, Tensor<T>&) {}};
    visit(v);
    return out;
  }
};

template <typename T>
class Jmrn final : public Network<T> {
 public:
  explicit Jmrn(const JmrnConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    if (!(cfg.tau > 0.0)) throw ValueError("jmrn: tau must be positive");
    if (!(cfg.prior.a > 0.0) || !(cfg.prior.b > 0.0)) throw ValueError("jmrn: beta prior parameters must be positive");
    if (cfg.extractor_widths.back() != 256) throw ValueError("jmrn: extractor must end with 256 channels");
    if (cfg.joints == 0 || cfg.channels == 0 || cfg.num_classes == 0 || cfg.c_dim == 0) {
      throw ValueError("jmrn: joints, channels, c_dim and num_classes must be positive");
    }
    Rng rng(seed);
    for (std::size_t j = 0; j < cfg.joints; ++j) joint_bn_.emplace_back(cfg.channels);
    std::size_t cin = cfg.channels;
    for (std::size_t i = 0; i < extractor_.size(); ++i) {
      extractor_[i] = nn::ConvBlock<T>(cin, cfg.extractor_widths[i], 2, rng);
      cin = cfg.extractor_widths[i];
    }
    compress_ = nn::Conv2d<T>(kMotionWidth, cfg.c_dim, 1, 1, rng);
    gate_conv_ = nn::Conv2d<T>(cfg.joints * kMotionWidth, kMotionWidth, 1, 1, rng);
    gate_fc_ = nn::Linear<T>(kMotionWidth, cfg.joints, rng);
    // Start every gate at sigmoid(0) = 0.5. With a random head the J logits
    // drift apart in the first few Adam steps (fan-in J*256) and saturate
    // before the classifier has learned anything.
    std::fill(gate_fc_.weight.value.data().begin(), gate_fc_.weight.value.data().end(), T{0});
    reduce_ = nn::ConvBlock<T>(cfg.joints * cfg.c_dim, cfg.head_width, 1, rng, 1);
    head_[0] = nn::ConvBlock<T>(cfg.head_width, cfg.head_width, 2, rng);
    head_[1] = nn::ConvBlock<T>(cfg.head_width, cfg.head_width, 2, rng);
    fc_ = nn::Linear<T>(cfg.head_width, cfg.num_classes, rng);
  }

  static constexpr std::size_t kMotionWidth = 256;

  [[nodiscard]] const JmrnConfig& config() const noexcept { return cfg_; }

  // Joint j's motion features from its [N, C, H, W] slice: the joint's own
  // input batch-norm followed by the shared extractor tower.
  std::pair<Var<T>, Var<T>> motion_extract(Graph<T>& g, Var<T> slice, std::size_t joint, nn::Mode mode) {
    if (joint >= cfg_.joints) {
      throw ValueError("motion_extract: joint index " + std::to_string(joint) + " out of range [0," +
                       std::to_string(cfg_.joints) + ")");
    }
    Var<T> r = tower(g, joint_bn_[joint](g, slice, mode), mode);
    return {r, compress_(g, r)};
  }

  // Overrides the gate weights with a fixed [N, J] tensor (ablations, tests).
  void force_gate(std::optional<Tensor<T>> weights) { forced_gate_ = std::move(weights); }

  ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& input, nn::Mode mode, Rng* rng) override {
    check_input(input);
    const std::size_t n = input.dim(0), nj = cfg_.joints, c = cfg_.channels;
    Var<T> x = g.constant(input);

    std::vector<Var<T>> normed;
    normed.reserve(nj);
    for (std::size_t j = 0; j < nj; ++j) {
      normed.push_back(joint_bn_[j](g, nn::slice_channels(x, j * c, (j + 1) * c), mode));
    }
    Var<T> stacked = nn::concat_channels<T>(normed);
    Var<T> r = tower(g, nn::reshape(stacked, Shape{n * nj, c, input.dim(2), input.dim(3)}), mode);
    const std::size_t h = r.shape()[2], w = r.shape()[3];

    // Joint selector over the concatenation of all r_j.
    Var<T> all_r = nn::reshape(r, Shape{n, nj * kMotionWidth, h, w});
    Var<T> pi = gate_fc_(g, nn::gap(gate_conv_(g, all_r)));
    Var<T> weights;
    if (forced_gate_) {
      if (forced_gate_->shape() != Shape{n, nj}) throw ShapeError("jmrn: forced gate must be [N,J]");
      weights = g.constant(*forced_gate_);
    } else if (mode == nn::Mode::train) {
      if (rng == nullptr) throw ValueError("jmrn: train mode needs an rng for gate noise");
      weights = gate::bin_concrete(pi, gate::logistic_noise<T>(pi.shape(), *rng), cfg_.tau);
    } else {
      weights = gate::tempered_sigmoid(pi, cfg_.tau);
    }

    Var<T> comp = compress_(g, r);
    Var<T> gated = nn::scale_rows(comp, nn::reshape(weights, Shape{n * nj}));
    Var<T> logits = head_logits(g, nn::reshape(gated, Shape{n, nj * cfg_.c_dim, h, w}), mode);
    return {logits, pi, weights};
  }

  // Inter-joint reasoning on the stacked gated features [N, J*c_dim, h, w]:
  // 1x1 reduction, two strided conv blocks, GAP, FC.
  Var<T> head_logits(Graph<T>& g, Var<T> stacked, nn::Mode mode) {
    Var<T> z = reduce_(g, stacked, mode);
    for (auto& blk : head_) z = blk(g, z, mode);
    return fc_(g, nn::gap(z));
  }

  void visit(nn::StateVisitor<T>& v) override {
    for (std::size_t j = 0; j < joint_bn_.size(); ++j) joint_bn_[j].visit("joint_bn." + std::to_string(j) + ".", v);
    for (std::size_t i = 0; i < extractor_.size(); ++i) extractor_[i].visit("extractor." + std::to_string(i) + ".", v);
    compress_.visit("compress.", v);
    gate_conv_.visit("gate.conv.", v);
    gate_fc_.visit("gate.fc.", v);
    reduce_.visit("reduce.", v);
    for (std::size_t i = 0; i < head_.size(); ++i) head_[i].visit("head." + std::to_string(i) + ".", v);
    fc_.visit("fc.", v);
  }

  [[nodiscard]] std::string kind() const override { return "jmrn"; }
  [[nodiscard]] std::size_t num_outputs() const override { return cfg_.num_classes; }
  [[nodiscard]] std::size_t joints() const override { return cfg_.joints; }
  [[nodiscard]] std::size_t channels() const override { return cfg_.channels; }

  // Direct access for tests that permute joints.
  std::vector<nn::BatchNorm2d<T>>& joint_bn() { return joint_bn_; }
  nn::Conv2d<T>& gate_conv() { return gate_conv_; }
  nn::Linear<T>& gate_fc() { return gate_fc_; }
  nn::ConvBlock<T>& reduce() { return reduce_; }
  std::array<nn::ConvBlock<T>, 4>& extractor() { return extractor_; }

 private:
  Var<T> tower(Graph<T>& g, Var<T> x, nn::Mode mode) {
    for (auto& blk : extractor_) x = blk(g, x, mode);
    return x;
  }

  void check_input(const Tensor<T>& input) const {
    if (input.rank() != 4) throw ShapeError("jmrn: expected [N, J*C, H, W] input, got " + shape_str(input.shape()));
    if (input.dim(1) != cfg_.joints * cfg_.channels) {
      throw ShapeError("jmrn: input has " + std::to_string(input.dim(1)) + " channels (dim 1), expected J*C = " +
                       std::to_string(cfg_.joints * cfg_.channels));
    }
  }

  JmrnConfig cfg_;
  std::vector<nn::BatchNorm2d<T>> joint_bn_;
  std::array<nn::ConvBlock<T>, 4> extractor_;
  nn::Conv2d<T> compress_;
  nn::Conv2d<T> gate_conv_;
  nn::Linear<T> gate_fc_;
  nn::ConvBlock<T> reduce_;
  std::array<nn::ConvBlock<T>, 2> head_;
  nn::Linear<T> fc_;
  std::optional<Tensor<T>> forced_gate_;
};

// All J*C channels stacked into one image: six conv/BN/ReLU blocks, GAP, FC.
template <typename T>
class StackedBaseline final : public Network<T> {
 public:
  explicit StackedBaseline(const BaselineConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.joints == 0 || cfg.channels == 0 || cfg.num_classes == 0) {
      throw ValueError("baseline: joints, channels and num_classes must be positive");
    }
    Rng rng(seed);
    std::size_t cin = cfg.joints * cfg.channels;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i] = nn::ConvBlock<T>(cin, cfg.widths[i], cfg.strides[i], rng);
      cin = cfg.widths[i];
    }
    fc_ = nn::Linear<T>(cin, cfg.num_classes, rng);
  }

  [[nodiscard]] const BaselineConfig& config() const noexcept { return cfg_; }

  ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& input, nn::Mode mode, Rng*) override {
    if (input.rank() != 4 || input.dim(1) != cfg_.joints * cfg_.channels) {
      throw ShapeError("baseline: expected [N, " + std::to_string(cfg_.joints * cfg_.channels) + ", H, W] input, got " +
                       shape_str(input.shape()));
    }
    Var<T> x = g.constant(input);
    for (auto& blk : blocks_) x = blk(g, x, mode);
    return {fc_(g, nn::gap(x)), std::nullopt, std::nullopt};
  }

  void visit(nn::StateVisitor<T>& v) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("block." + std::to_string(i) + ".", v);
    fc_.visit("fc.", v);
  }

  [[nodiscard]] std::string kind() const override { return "baseline"; }
  [[nodiscard]] std::size_t num_outputs() const override { return cfg_.num_classes; }
  [[nodiscard]] std::size_t joints() const override { return cfg_.joints; }
  [[nodiscard]] std::size_t channels() const override { return cfg_.channels; }

  nn::ConvBlock<T>& block(std::size_t i) { return blocks_.at(i); }

 private:
  BaselineConfig cfg_;
  std::array<nn::ConvBlock<T>, 6> blocks_;
  nn::Linear<T> fc_;
};

// Packs representations into a joint-major [N, J*C, H, W] batch.
template <typename T>
[[nodiscard]] Tensor<T> make_batch(const std::vector<const PoseRepresentation*>& reps) {
  if (reps.empty()) throw ValueError("make_batch: empty batch");
  const auto& r0 = *reps.front();
  const std::size_t per = r0.values.size();
  Tensor<T> out(Shape{reps.size(), r0.joints * r0.channels, r0.height, r0.width});
  std::vector<float> tmp(per);
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto& r = *reps[i];
    if (r.joints != r0.joints || r.channels != r0.channels || r.height != r0.height || r.width != r0.width) {
      throw ShapeError("make_batch: representations in a batch must share extents");
    }
    to_joint_major(r, tmp.data());
    std::copy(tmp.begin(), tmp.end(), out.ptr() + i * per);
  }
  return out;
}

}  // namespace pmk
