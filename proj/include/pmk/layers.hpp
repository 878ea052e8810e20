#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pmk/autodiff.hpp"
#include "pmk/ops.hpp"
#include "pmk/rng.hpp"

namespace pmk::nn {

// Forward-pass regime: batch statistics + sampled gates, or running statistics
// + deterministic gates.
enum class Mode { train, eval };

// Callbacks used to enumerate the state of a module tree by dotted name.
template <typename T>
struct StateVisitor {
  std::function<void(const std::string&, Parameter<T>&)> param;
  std::function<void(const std::string&, Tensor<T>&)> buffer;
};

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Parameter<T> weight, bias;
  std::size_t stride = 1, padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, Rng& rng)
      : weight("weight", kaiming_uniform<T>(Shape{cout, cin, k, k}, cin * k * k, rng)),
        bias("bias", Tensor<T>(Shape{cout})),
        stride(stride_),
        padding(k / 2) {}

  Var<T> operator()(Graph<T>& g, Var<T> x) {
    return conv2d(x, g.param(weight), std::optional<Var<T>>(g.param(bias)), stride, padding);
  }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + "weight", weight);
    v.param(prefix + "bias", bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Parameter<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1), eps = T(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t c)
      : gamma("gamma", Tensor<T>(Shape{c}, T{1})),
        beta("beta", Tensor<T>(Shape{c})),
        running_mean(Shape{c}),
        running_var(Shape{c}, T{1}) {}

  Var<T> operator()(Graph<T>& g, Var<T> x, Mode mode) {
    return batchnorm2d(x, g.param(gamma), g.param(beta), running_mean, running_var, mode == Mode::train, momentum, eps);
  }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + "gamma", gamma);
    v.param(prefix + "beta", beta);
    v.buffer(prefix + "running_mean", running_mean);
    v.buffer(prefix + "running_var", running_var);
  }
};

template <typename T>
struct Linear {
  Parameter<T> weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight("weight", kaiming_uniform<T>(Shape{out, in}, in, rng)), bias("bias", Tensor<T>(Shape{out})) {}

  Var<T> operator()(Graph<T>& g, Var<T> x) { return linear(x, g.param(weight), g.param(bias)); }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + "weight", weight);
    v.param(prefix + "bias", bias);
  }
};

// conv(3x3) -> BN -> ReLU.
template <typename T>
struct ConvBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  ConvBlock() = default;
  ConvBlock(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng, std::size_t k = 3)
      : conv(cin, cout, k, stride, rng), bn(cout) {}

  Var<T> operator()(Graph<T>& g, Var<T> x, Mode mode) { return relu(bn(g, conv(g, x), mode)); }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    conv.visit(prefix + "conv.", v);
    bn.visit(prefix + "bn.", v);
  }
};

}  // namespace pmk::nn
