#pragma once

// Differentiable joint gating: BinConcrete relaxation of per-joint Bernoulli
// gates and the batch-shaping regularizer that pulls the within-batch
// distribution of gate values towards a Beta prior.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "pmk/autodiff.hpp"
#include "pmk/error.hpp"
#include "pmk/ops.hpp"
#include "pmk/rng.hpp"

namespace pmk::gate {

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

}  // namespace detail

// Regularized incomplete beta function I_x(a, b), i.e. the Beta(a, b) CDF.
[[nodiscard]] inline double beta_cdf(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw ValueError("beta_cdf: shape parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - detail::log_beta(a, b));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

[[nodiscard]] inline double beta_pdf(double x, double a, double b) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return std::exp((a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - detail::log_beta(a, b));
}

// Inverse CDF by bisection; the CDF is monotone so this always converges.
[[nodiscard]] inline double beta_quantile(double p, double a, double b) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValueError("beta_quantile: probability outside [0,1]");
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-17; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (beta_cdf(mid, a, b) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

struct BetaPrior {
  double a = 0.6;
  double b = 0.4;
};

// Count of gate values clamped into [1e-6, 1-1e-6] by batch_shaping_loss.
inline std::atomic<std::size_t>& clamp_warning_count() {
  static std::atomic<std::size_t> count{0};
  return count;
}

// Cramer-von Mises distance between each joint's empirical gate distribution
// over the batch and the Beta prior, averaged over joints. w is [N, J].
//   L_j = 1/N * sum_i (F(x_(i)) - (2i - 1) / (2N))^2,  x_(i) sorted ascending.
// The gradient reaches each sample through the sorting permutation.
template <typename T>
Var<T> batch_shaping_loss(Var<T> w, BetaPrior prior) {
  const auto& wv = w.value();
  if (wv.rank() != 2) throw ShapeError("batch_shaping_loss: expected [N,J] gate weights, got " + shape_str(wv.shape()));
  const std::size_t n = wv.dim(0), nj = wv.dim(1);
  if (n < 2) throw ValueError("batch_shaping_loss: needs a batch of at least 2 samples");
  if (!(prior.a > 0.0) || !(prior.b > 0.0)) throw ValueError("batch_shaping_loss: prior parameters must be positive");
  constexpr double kLo = 1e-6, kHi = 1.0 - 1e-6;

  Tensor<T> dloss(wv.shape());  // d L / d w, filled during the forward pass
  double total = 0.0;
  std::size_t clamped = 0;
  std::vector<std::size_t> order(n);
  const double inv_n = 1.0 / static_cast<double>(n), inv_j = 1.0 / static_cast<double>(nj);
  for (std::size_t j = 0; j < nj; ++j) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return wv[x * nj + j] < wv[y * nj + j]; });
    double lj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t s = order[i];
      double x = static_cast<double>(wv[s * nj + j]);
      bool inside = true;
      if (!(x >= kLo && x <= kHi)) {
        x = std::clamp(std::isnan(x) ? 0.5 : x, kLo, kHi);
        ++clamped;
        inside = false;
      }
      const double q = (2.0 * static_cast<double>(i + 1) - 1.0) * 0.5 * inv_n;
      const double diff = beta_cdf(x, prior.a, prior.b) - q;
      lj += diff * diff;
      if (inside) dloss[s * nj + j] = static_cast<T>(2.0 * diff * beta_pdf(x, prior.a, prior.b) * inv_n * inv_j);
    }
    total += lj * inv_n;
  }
  clamp_warning_count() += clamped;
  const T loss = static_cast<T>(total * inv_j);
  return w.graph->record(Tensor<T>(Shape{}, std::vector<T>{loss}), {w.id},
                         [wid = w.id, dloss = std::move(dloss)](Graph<T>& g, std::size_t self) {
                           const T dy = g.grad(self)[0];
                           Tensor<T>& dw = g.grad(wid);
                           for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += dy * dloss[i];
                         });
}

// Logistic noise log(u) - log(1 - u), u ~ U(0,1), one value per entry.
template <typename T>
[[nodiscard]] Tensor<T> logistic_noise(const Shape& shape, Rng& rng) {
  Tensor<T> noise(shape);
  for (auto& v : noise.data()) {
    const double u = uniform_open(rng);
    v = static_cast<T>(std::log(u) - std::log1p(-u));
  }
  return noise;
}

// BinConcrete sample sigmoid((logits + noise) / tau) with externally supplied
// logistic noise.
template <typename T>
Var<T> bin_concrete(Var<T> logits, const Tensor<T>& noise, double tau) {
  if (!(tau > 0.0)) throw ValueError("bin_concrete: temperature must be positive");
  Var<T> noisy = nn::add(logits, logits.graph->constant(noise));
  return nn::sigmoid(nn::mul_scalar(noisy, static_cast<T>(1.0 / tau)));
}

// Deterministic gate: sigmoid(logits / tau).
template <typename T>
Var<T> tempered_sigmoid(Var<T> logits, double tau) {
  if (!(tau > 0.0)) throw ValueError("tempered_sigmoid: temperature must be positive");
  return nn::sigmoid(nn::mul_scalar(logits, static_cast<T>(1.0 / tau)));
}

}  // namespace pmk::gate
