#pragma once

// Differentiable operations on Graph nodes. Every function records one node
// whose backward closure routes gradients to the parents that need them.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmk/autodiff.hpp"
#include "pmk/tensor.hpp"

namespace pmk::nn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void expect_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

inline void expect_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
T softplus(T z) {
  return std::max(z, T{0}) + std::log1p(std::exp(-std::abs(z)));
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
  [[nodiscard]] std::size_t patch() const { return cin * k * k; }
  [[nodiscard]] std::size_t plane() const { return ho * wo; }
};

// Unfolds cn images starting at x into a (cin*k*k) x (cn*ho*wo) row-major matrix.
template <typename T>
void im2col(const T* x, std::size_t cn, const ConvGeom& g, T* col) {
  const std::size_t ncols = cn * g.plane();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t i = 0; i < cn; ++i) {
          const T* src = x + (i * g.cin + ci) * g.h * g.w;
          T* dst = row + i * g.plane();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* d = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(d, d + g.wo, T{0});
              continue;
            }
            const T* s = src + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : s[ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into cn images at dx.
template <typename T>
void col2im(const T* col, std::size_t cn, const ConvGeom& g, T* dx) {
  const std::size_t ncols = cn * g.plane();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t i = 0; i < cn; ++i) {
          T* dst = dx + (i * g.cin + ci) * g.h * g.w;
          const T* src = row + i * g.plane();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* d = dst + static_cast<std::size_t>(iy) * g.w;
            const T* s = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) d[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

// Images per GEMM so that each multiply has a reasonably wide right-hand side
// while the unfolded buffer stays below ~16 MB of floats.
inline std::size_t conv_chunk(const ConvGeom& g) {
  const std::size_t want = (2048 + g.plane() - 1) / g.plane();
  const std::size_t cap = std::max<std::size_t>(1, (std::size_t{1} << 22) / std::max<std::size_t>(1, g.patch() * g.plane()));
  return std::max<std::size_t>(1, std::min({g.n, want, cap}));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::expect_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    for (std::size_t p : {a, b}) {
      if (Tensor<T>* dx = g.parent_grad(p)) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
      }
    }
  });
}

// Elementwise product of two equally shaped nodes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::expect_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    if (Tensor<T>* da = g.parent_grad(a)) {
      const auto& bv = g.value(b);
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * bv[i];
    }
    if (Tensor<T>* db = g.parent_grad(b)) {
      const auto& av = g.value(a);
      for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph->record(std::move(out), {a.id}, [a = a.id, s](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(a);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += s * dy[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(a);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v < T{0} ? T{0} : v;  // NaN passes through
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    const Tensor<T>& x = g.value(a);
    Tensor<T>& dx = g.grad(a);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (x[i] > T{0}) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = detail::stable_sigmoid(v);
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    const Tensor<T>& y = g.value(self);
    Tensor<T>& dx = g.grad(a);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i] * (T{1} - y[i]);
  });
}

// Sum of all elements, as a scalar node.
template <typename T>
Var<T> sum(Var<T> a) {
  T s{};
  for (T v : a.value().data()) s += v;
  return a.graph->record(Tensor<T>(Shape{}, std::vector<T>{s}), {a.id}, [a = a.id](Graph<T>& g, std::size_t self) {
    const T dy = g.grad(self)[0];
    for (auto& v : g.grad(a).data()) v += dy;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return mul_scalar(sum(a), T{1} / static_cast<T>(a.value().size()));
}

// y[r, ...] = x[r, ...] * w[r]; w holds one value per leading-axis row of x.
template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const std::size_t rows = xv.dim(0);
  if (wv.size() != rows) {
    throw ShapeError("scale_rows: " + std::to_string(wv.size()) + " weights for " + std::to_string(rows) + " rows");
  }
  const std::size_t inner = xv.size() / rows;
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] *= wv[r];
  }
  return x.graph->record(std::move(out), {x.id, w.id}, [x = x.id, w = w.id, rows, inner](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    if (Tensor<T>* dx = g.parent_grad(x)) {
      const auto& wv = g.value(w);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < inner; ++i) (*dx)[r * inner + i] += dy[r * inner + i] * wv[r];
      }
    }
    if (Tensor<T>* dw = g.parent_grad(w)) {
      const auto& xv = g.value(x);
      for (std::size_t r = 0; r < rows; ++r) {
        T acc{};
        for (std::size_t i = 0; i < inner; ++i) acc += dy[r * inner + i] * xv[r * inner + i];
        (*dw)[r] += acc;
      }
    }
  });
}

// Rows [begin, end) of the leading axis.
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (begin > end || end > xv.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + shape_str(xv.shape()));
  }
  const std::size_t inner = xv.size() / xv.dim(0);
  Shape s = xv.shape();
  s[0] = end - begin;
  std::vector<T> data(xv.ptr() + begin * inner, xv.ptr() + end * inner);
  return x.graph->record(Tensor<T>(std::move(s), std::move(data)), {x.id}, [x = x.id, begin, inner](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * inner + i] += dy[i];
  });
}

// Channels [begin, end) of a [N,C,H,W] tensor.
template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  detail::expect_rank(xv.shape(), 4, "slice_channels");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (begin >= end || end > c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     std::to_string(c) + " channels");
  }
  const std::size_t cs = end - begin;
  Tensor<T> out(Shape{n, cs, xv.dim(2), xv.dim(3)});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.ptr() + (i * c + begin) * hw, cs * hw, out.ptr() + i * cs * hw);
  return x.graph->record(std::move(out), {x.id}, [x = x.id, n, c, hw, begin, cs](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < cs * hw; ++k) dx[(i * c + begin) * hw + k] += dy[i * cs * hw + k];
    }
  });
}

// Global average pooling: [N,C,H,W] -> [N,C].
template <typename T>
Var<T> gap(Var<T> x) {
  const auto& xv = x.value();
  detail::expect_rank(xv.shape(), 4, "gap");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (hw == 0) throw ShapeError("gap: empty spatial extent in " + shape_str(xv.shape()));
  Tensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T s{};
    for (std::size_t k = 0; k < hw; ++k) s += xv[i * hw + k];
    out[i] = s / static_cast<T>(hw);
  }
  return x.graph->record(std::move(out), {x.id}, [x = x.id, hw](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(x);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] += dy[i] * inv;
    }
  });
}

// y = x W^T + b with x [N,in], W [out,in], b [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  detail::expect_rank(xv.shape(), 2, "linear input");
  detail::expect_rank(wv.shape(), 2, "linear weight");
  const std::size_t n = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  if (wv.dim(1) != in) {
    throw ShapeError("linear: input features " + std::to_string(in) + " != weight in_features " + std::to_string(wv.dim(1)));
  }
  if (bias.value().size() != outf) throw ShapeError("linear: bias size mismatch");
  Tensor<T> out(Shape{n, outf});
  detail::MapMat<T> y(out.ptr(), n, outf);
  y.noalias() = detail::CMapMat<T>(xv.ptr(), n, in) * detail::CMapMat<T>(wv.ptr(), outf, in).transpose();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < outf; ++o) out[i * outf + o] += bv[o];
  }
  return x.graph->record(std::move(out), {x.id, weight.id, bias.id},
                         [x = x.id, w = weight.id, b = bias.id, n, in, outf](Graph<T>& g, std::size_t self) {
                           const Tensor<T>& dyt = g.grad(self);
                           detail::CMapMat<T> dy(dyt.ptr(), n, outf);
                           if (Tensor<T>* dx = g.parent_grad(x)) {
                             detail::MapMat<T>(dx->ptr(), n, in).noalias() +=
                                 dy * detail::CMapMat<T>(g.value(w).ptr(), outf, in);
                           }
                           if (Tensor<T>* dw = g.parent_grad(w)) {
                             detail::MapMat<T>(dw->ptr(), outf, in).noalias() +=
                                 dy.transpose() * detail::CMapMat<T>(g.value(x).ptr(), n, in);
                           }
                           if (Tensor<T>* db = g.parent_grad(b)) {
                             for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t o = 0; o < outf; ++o) (*db)[o] += dyt[i * outf + o];
                             }
                           }
                         });
}

// Cross-correlation of x [N,Cin,H,W] with weight [Cout,Cin,k,k] (k in {1,3}),
// lowered to im2col + GEMM over chunks of images.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, std::size_t stride, std::size_t padding) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  detail::expect_rank(xv.shape(), 4, "conv2d input");
  detail::expect_rank(wv.shape(), 4, "conv2d weight");
  const std::size_t k = wv.dim(2);
  if (k != 1 && k != 3) throw ShapeError("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
  if (wv.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(wv.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (wv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(xv.dim(1)) + " but weight expects " +
                     std::to_string(wv.dim(1)));
  }
  const std::size_t h = xv.dim(2), w = xv.dim(3);
  if (h + 2 * padding < k) throw ShapeError("conv2d: height " + std::to_string(h) + " too small for kernel");
  if (w + 2 * padding < k) throw ShapeError("conv2d: width " + std::to_string(w) + " too small for kernel");
  detail::ConvGeom geo{xv.dim(0), xv.dim(1), h, w, wv.dim(0), k, stride, padding,
                       (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1};
  if (bias && bias->value().size() != geo.cout) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias->value().size()) + " values for " +
                     std::to_string(geo.cout) + " output channels");
  }

  Tensor<T> out(Shape{geo.n, geo.cout, geo.ho, geo.wo});
  const std::size_t chunk = detail::conv_chunk(geo);
  const std::size_t kk = geo.patch(), pl = geo.plane();
  std::vector<T> col(kk * chunk * pl), y(geo.cout * chunk * pl);
  detail::CMapMat<T> wm(wv.ptr(), geo.cout, kk);
  for (std::size_t n0 = 0; n0 < geo.n; n0 += chunk) {
    const std::size_t cn = std::min(chunk, geo.n - n0);
    const std::size_t ncols = cn * pl;
    detail::im2col(xv.ptr() + n0 * geo.cin * h * w, cn, geo, col.data());
    detail::MapMat<T>(y.data(), geo.cout, ncols).noalias() = wm * detail::CMapMat<T>(col.data(), kk, ncols);
    for (std::size_t i = 0; i < cn; ++i) {
      for (std::size_t co = 0; co < geo.cout; ++co) {
        const T b = bias ? bias->value()[co] : T{0};
        T* dst = out.ptr() + ((n0 + i) * geo.cout + co) * pl;
        const T* src = y.data() + co * ncols + i * pl;
        for (std::size_t p = 0; p < pl; ++p) dst[p] = src[p] + b;
      }
    }
  }

  std::vector<std::size_t> parents{x.id, weight.id};
  if (bias) parents.push_back(bias->id);
  const std::optional<std::size_t> bid = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return x.graph->record(std::move(out), std::move(parents),
                         [x = x.id, wid = weight.id, bid, geo, chunk](Graph<T>& g, std::size_t self) {
                           const Tensor<T>& dout = g.grad(self);
                           const auto& xv = g.value(x);
                           const auto& wv = g.value(wid);
                           Tensor<T>* dx = g.parent_grad(x);
                           Tensor<T>* dw = g.parent_grad(wid);
                           Tensor<T>* db = bid ? g.parent_grad(*bid) : nullptr;
                           const std::size_t kk = geo.patch(), pl = geo.plane();
                           std::vector<T> col(kk * chunk * pl), dy(geo.cout * chunk * pl);
                           detail::CMapMat<T> wm(wv.ptr(), geo.cout, kk);
                           for (std::size_t n0 = 0; n0 < geo.n; n0 += chunk) {
                             const std::size_t cn = std::min(chunk, geo.n - n0);
                             const std::size_t ncols = cn * pl;
                             for (std::size_t i = 0; i < cn; ++i) {
                               for (std::size_t co = 0; co < geo.cout; ++co) {
                                 const T* src = dout.ptr() + ((n0 + i) * geo.cout + co) * pl;
                                 std::copy(src, src + pl, dy.data() + co * ncols + i * pl);
                               }
                             }
                             detail::CMapMat<T> dym(dy.data(), geo.cout, ncols);
                             if (db) {
                               // plain loop: Eigen's vectorised sum() depends on pointer alignment
                               for (std::size_t co = 0; co < geo.cout; ++co) {
                                 T acc{};
                                 for (std::size_t k = 0; k < ncols; ++k) acc += dy[co * ncols + k];
                                 (*db)[co] += acc;
                               }
                             }
                             if (dw) {
                               detail::im2col(xv.ptr() + n0 * geo.cin * geo.h * geo.w, cn, geo, col.data());
                               detail::MapMat<T>(dw->ptr(), geo.cout, kk).noalias() +=
                                   dym * detail::CMapMat<T>(col.data(), kk, ncols).transpose();
                             }
                             if (dx) {
                               detail::MapMat<T>(col.data(), kk, ncols).noalias() = wm.transpose() * dym;
                               detail::col2im(col.data(), cn, geo, dx->ptr() + n0 * geo.cin * geo.h * geo.w);
                             }
                           }
                         });
}

// Batch normalization over (N,H,W) per channel. In training mode the running
// statistics are updated in place with the unbiased batch variance.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                   bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xv = x.value();
  detail::expect_rank(xv.shape(), 4, "batchnorm2d");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batchnorm2d: parameters sized for a different channel count than " + std::to_string(c));
  }
  const std::size_t m = n * hw;
  if (training && m < 2) {
    throw ValueError("batchnorm2d: training mode needs N*H*W >= 2, got " + std::to_string(m));
  }
  Tensor<T> xhat(xv.shape());
  std::vector<T> invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T s{};
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.ptr() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      mu = s / static_cast<T>(m);
      T ss{};
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.ptr() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) ss += (p[k] - mu) * (p[k] - mu);
      }
      var = ss / static_cast<T>(m);
      running_mean[ch] = (T{1} - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (T{1} - momentum) * running_var[ch] + momentum * var * static_cast<T>(m) / static_cast<T>(m - 1);
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    invstd[ch] = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = xv.ptr() + (i * c + ch) * hw;
      T* q = xhat.ptr() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) q[k] = (p[k] - mu) * invstd[ch];
    }
  }
  Tensor<T> out = xhat;
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* q = out.ptr() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) q[k] = q[k] * gv[ch] + bv[ch];
    }
  }
  return x.graph->record(
      std::move(out), {x.id, gamma.id, beta.id},
      [x = x.id, gid = gamma.id, bid = beta.id, xhat = std::move(xhat), invstd = std::move(invstd), training, n, c, hw](
          Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const auto& gv = g.value(gid);
        Tensor<T>* dx = g.parent_grad(x);
        Tensor<T>* dg = g.parent_grad(gid);
        Tensor<T>* dbeta = g.parent_grad(bid);
        const T m = static_cast<T>(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sdy{}, sdyx{};
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              sdy += dy[off + k];
              sdyx += dy[off + k] * xhat[off + k];
            }
          }
          if (dg) (*dg)[ch] += sdyx;
          if (dbeta) (*dbeta)[ch] += sdy;
          if (!dx) continue;
          const T scale = gv[ch] * invstd[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              if (training) {
                (*dx)[off + k] += scale * (dy[off + k] - sdy / m - xhat[off + k] * sdyx / m);
              } else {
                (*dx)[off + k] += scale * dy[off + k];
              }
            }
          }
        }
      });
}

// Concatenates [N,Ci,H,W] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::expect_rank(s0, 4, "concat_channels");
  std::size_t ctot = 0;
  std::vector<std::size_t> ids, chans;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    detail::expect_rank(s, 4, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    ctot += s[1];
    ids.push_back(p.id);
    chans.push_back(s[1]);
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out(Shape{n, ctot, s0[2], s0[3]});
  std::size_t c0 = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].value();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(v.ptr() + i * chans[pi] * hw, chans[pi] * hw, out.ptr() + (i * ctot + c0) * hw);
    }
    c0 += chans[pi];
  }
  Graph<T>* graph = parts[0].graph;
  return graph->record(std::move(out), ids, [ids, chans, n, hw, ctot](Graph<T>& g, std::size_t self) {
    const Tensor<T>& dy = g.grad(self);
    std::size_t c0 = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      if (Tensor<T>* dx = g.parent_grad(ids[pi])) {
        for (std::size_t i = 0; i < n; ++i) {
          const T* src = dy.ptr() + (i * ctot + c0) * hw;
          T* dst = dx->ptr() + i * chans[pi] * hw;
          for (std::size_t k = 0; k < chans[pi] * hw; ++k) dst[k] += src[k];
        }
      }
      c0 += chans[pi];
    }
  });
}

// Row-wise softmax of a [N,K] tensor (not differentiable; for reporting).
template <typename T>
[[nodiscard]] Tensor<T> softmax_rows(const Tensor<T>& logits) {
  detail::expect_rank(logits.shape(), 2, "softmax_rows");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.ptr() + i * k;
    const T mx = *std::max_element(z, z + k);
    T s{};
    for (std::size_t j = 0; j < k; ++j) s += (out[i * k + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& z = logits.value();
  detail::expect_rank(z.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count != batch size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
    }
  }
  Tensor<T> probs = softmax_rows(z);
  T loss{};
  for (std::size_t i = 0; i < n; ++i) {
    const T* zi = z.ptr() + i * k;
    const T mx = *std::max_element(zi, zi + k);
    T s{};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zi[j] - mx);
    loss += mx + std::log(s) - zi[labels[i]];
  }
  loss /= static_cast<T>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph->record(Tensor<T>(Shape{}, std::vector<T>{loss}), {logits.id},
                              [lid = logits.id, probs = std::move(probs), ys = std::move(ys), n, k](Graph<T>& g, std::size_t self) {
                                const T dy = g.grad(self)[0] / static_cast<T>(n);
                                Tensor<T>& dz = g.grad(lid);
                                for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < k; ++j) {
                                    const T t = static_cast<int>(j) == ys[i] ? T{1} : T{0};
                                    dz[i * k + j] += dy * (probs[i * k + j] - t);
                                  }
                                }
                              });
}

// Mean over all entries of per-class binary cross-entropy on logits.
template <typename T>
Var<T> binary_cross_entropy(Var<T> logits, const Tensor<T>& targets) {
  const auto& z = logits.value();
  detail::expect_same(z.shape(), targets.shape(), "binary_cross_entropy");
  T loss{};
  for (std::size_t i = 0; i < z.size(); ++i) loss += detail::softplus(z[i]) - targets[i] * z[i];
  const T cnt = static_cast<T>(z.size());
  loss /= cnt;
  return logits.graph->record(Tensor<T>(Shape{}, std::vector<T>{loss}), {logits.id},
                              [lid = logits.id, targets, cnt](Graph<T>& g, std::size_t self) {
                                const T dy = g.grad(self)[0] / cnt;
                                const auto& z = g.value(lid);
                                Tensor<T>& dz = g.grad(lid);
                                for (std::size_t i = 0; i < z.size(); ++i) {
                                  dz[i] += dy * (detail::stable_sigmoid(z[i]) - targets[i]);
                                }
                              });
}

// Mean over pairs of -log sigmoid(pos - neg).
template <typename T>
Var<T> pairwise_logistic_loss(Var<T> pos, Var<T> neg) {
  const auto& p = pos.value();
  const auto& q = neg.value();
  if (p.size() != q.size() || p.size() == 0) throw ShapeError("pairwise_logistic_loss: score vectors must match");
  const std::size_t n = p.size();
  T loss{};
  for (std::size_t i = 0; i < n; ++i) loss += detail::softplus(q[i] - p[i]);
  loss /= static_cast<T>(n);
  return pos.graph->record(Tensor<T>(Shape{}, std::vector<T>{loss}), {pos.id, neg.id},
                           [pid = pos.id, nid = neg.id, n](Graph<T>& g, std::size_t self) {
                             const T dy = g.grad(self)[0] / static_cast<T>(n);
                             const auto& p = g.value(pid);
                             const auto& q = g.value(nid);
                             Tensor<T>* dp = g.parent_grad(pid);
                             Tensor<T>* dq = g.parent_grad(nid);
                             for (std::size_t i = 0; i < n; ++i) {
                               const T s = detail::stable_sigmoid(q[i] - p[i]);
                               if (dp) (*dp)[i] -= dy * s;
                               if (dq) (*dq)[i] += dy * s;
                             }
                           });
}

// Mean over pairs of max(0, margin - (pos - neg)).
template <typename T>
Var<T> margin_ranking_loss(Var<T> pos, Var<T> neg, T margin) {
  const auto& p = pos.value();
  const auto& q = neg.value();
  if (p.size() != q.size() || p.size() == 0) throw ShapeError("margin_ranking_loss: score vectors must match");
  const std::size_t n = p.size();
  T loss{};
  for (std::size_t i = 0; i < n; ++i) loss += std::max(T{0}, margin - (p[i] - q[i]));
  loss /= static_cast<T>(n);
  return pos.graph->record(Tensor<T>(Shape{}, std::vector<T>{loss}), {pos.id, neg.id},
                           [pid = pos.id, nid = neg.id, n, margin](Graph<T>& g, std::size_t self) {
                             const T dy = g.grad(self)[0] / static_cast<T>(n);
                             const auto& p = g.value(pid);
                             const auto& q = g.value(nid);
                             Tensor<T>* dp = g.parent_grad(pid);
                             Tensor<T>* dq = g.parent_grad(nid);
                             for (std::size_t i = 0; i < n; ++i) {
                               if (margin - (p[i] - q[i]) <= T{0}) continue;
                               if (dp) (*dp)[i] -= dy;
                               if (dq) (*dq)[i] += dy;
                             }
                           });
}

}  // namespace pmk::nn
