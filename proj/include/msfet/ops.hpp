#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "msfet/error.hpp"
#include "msfet/tensor.hpp"

namespace msfet::ops {

namespace detail {

using msfet::detail::input_grad;
using msfet::detail::make_result;
using msfet::detail::Node;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

/// Elementwise unary op given f(x) and f'(x) evaluated from (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x},
                        [df](Node<T>& self) {
                          T* gx = input_grad(self, 0);
                          if (!gx) return;
                          const auto& xd = self.inputs[0]->data;
                          for (std::size_t i = 0; i < self.data.size(); ++i) {
                            gx[i] += self.grad[i] * df(xd[i], self.data[i]);
                          }
                        });
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t s, std::size_t p, std::size_t Ho,
            std::size_t Wo, T* col) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) -
                              static_cast<std::ptrdiff_t>(p);
          T* r = row + oy * Wo;
          if (iy < 0 || iy >= ih) {
            std::fill(r, r + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) -
                                static_cast<std::ptrdiff_t>(p);
            r[ox] = (ix < 0 || ix >= iw) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W,
                std::size_t k, std::size_t s, std::size_t p, std::size_t Ho,
                std::size_t Wo, T* x) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) -
                              static_cast<std::ptrdiff_t>(p);
          if (iy < 0 || iy >= ih) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* r = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) -
                                static_cast<std::ptrdiff_t>(p);
            if (ix >= 0 && ix < iw) dst[ix] += r[ox];
          }
        }
      }
    }
  }
}

/// Sampling positions and weights for one axis of a 2x bilinear upsample
/// (half-pixel centres, edge clamped).
struct AxisTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

inline AxisTaps upsample_taps(std::size_t n) {
  AxisTaps t;
  const std::size_t m = 2 * n;
  t.i0.resize(m);
  t.i1.resize(m);
  t.w1.resize(m);
  for (std::size_t o = 0; o < m; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > n - 1) lo = n - 1;
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, n - 1);
    t.w1[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b},
                                [](detail::Node<T>& self) {
                                  for (std::size_t k = 0; k < 2; ++k) {
                                    if (T* g = detail::input_grad(self, k)) {
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b},
                                [](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (T* g = detail::input_grad(self, 1)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b},
                                [](detail::Node<T>& self) {
                                  const auto& ad = self.inputs[0]->data;
                                  const auto& bd = self.inputs[1]->data;
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bd[i];
                                  }
                                  if (T* g = detail::input_grad(self, 1)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return detail::make_result<T>("div", a.shape(), std::move(out), {a, b},
                                [](detail::Node<T>& self) {
                                  const auto& bd = self.inputs[1]->data;
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bd[i];
                                  }
                                  if (T* g = detail::input_grad(self, 1)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i] * self.data[i] / bd[i];
                                  }
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; },
                          [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary<T>("mul_scalar", x, [c](T v) { return v * c; },
                          [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; },
                          [](T v, T) { return T(2) * v; });
}

/// Subgradient 0 at 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); },
                          [](T, T y) { return y; });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                          [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  return detail::unary<T>(
      "leaky_relu", x, [slope](T v) { return v >= T(0) ? v : slope * v; },
      [slope](T v, T) { return v >= T(0) ? T(1) : slope; });
}

/// x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  return detail::unary<T>(
      "swish", x,
      [](T v) {
        const double d = v;
        return static_cast<T>(d * sigmoid_value(d));
      },
      [](T v, T) {
        const double d = v, s = sigmoid_value(d);
        return static_cast<T>(s + d * s * (1.0 - s));
      });
}

/// Exact Gaussian-CDF form, evaluated in double.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double r2 = std::numbers::sqrt2;
  return detail::unary<T>(
      "gelu", x,
      [](T v) {
        const double d = v;
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d / r2)));
      },
      [](T v, T) {
        const double d = v;
        const double cdf = 0.5 * (1.0 + std::erf(d / r2));
        const double pdf = std::exp(-0.5 * d * d) * std::numbers::inv_sqrtpi / r2;
        return static_cast<T>(cdf + d * pdf);
      });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return detail::make_result<T>("sum", {1}, {static_cast<T>(acc)}, {x},
                                [](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    const std::size_t n = self.inputs[0]->data.size();
                                    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
                                  }
                                });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return detail::make_result<T>("mean", {1}, {static_cast<T>(acc / static_cast<double>(n))}, {x},
                                [n](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    const std::size_t m = self.inputs[0]->data.size();
                                    for (std::size_t i = 0; i < m; ++i) g[i] += self.grad[0] / n;
                                  }
                                });
}

// ---------------------------------------------------------------- structure

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  detail::require(shape.size() <= 4, "reshape: rank exceeds 4");
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x},
                                [](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

/// Concatenates along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::require(axis < s0.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require(p.rank() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != axis) {
        detail::require(p.dim(i) == s0[i], "concat: shape mismatch " +
                                               shape_str(p.shape()) + " vs " +
                                               shape_str(s0));
      }
    }
    widths.push_back(p.dim(axis) * inner);
    out_shape[axis] += p.dim(axis);
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * widths[k], widths[k],
                  out.begin() + o * row + offset);
    }
    offset += widths[k];
  }
  return detail::make_result<T>(
      "concat", std::move(out_shape), std::move(out), parts,
      [widths, outer, row](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (T* g = detail::input_grad(self, k)) {
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t i = 0; i < widths[k]; ++i) {
                g[o * widths[k] + i] += self.grad[o * row + off + i];
              }
            }
          }
          off += widths[k];
        }
      });
}

/// Slice [start, start+length) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start,
                 std::size_t length) {
  const Shape& s = x.shape();
  detail::require(axis < s.size() && start + length <= s[axis],
                  "narrow: range out of bounds on " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = length * inner;
  const std::size_t off = start * inner;
  std::vector<T> out(outer * out_row);
  auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * in_row + off, out_row, out.begin() + o * out_row);
  }
  return detail::make_result<T>(
      "narrow", std::move(out_shape), std::move(out), {x},
      [outer, in_row, out_row, off](detail::Node<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < out_row; ++i) {
              g[o * in_row + off + i] += self.grad[o * out_row + i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "transpose: needs rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto src = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return detail::make_result<T>("transpose", {c, r}, std::move(out), {x},
                                [r, c](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                                  }
                                });
}

/// Reflection padding of a [C,H,W] map on the bottom and right edges.
/// Pads wider than the input keep reflecting back and forth.
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t pad_bottom,
                      std::size_t pad_right) {
  detail::require(x.rank() == 3, "pad_reflect: needs [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  detail::require(H > 0 && W > 0, "pad_reflect: empty input");
  const std::size_t Ho = H + pad_bottom, Wo = W + pad_right;
  auto src_index = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    const std::size_t period = 2 * (n - 1), k = i % period;
    return k < n ? k : period - k;
  };
  std::vector<std::size_t> map(C * Ho * Wo);
  std::vector<T> out(map.size());
  auto src = x.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        std::size_t o = (c * Ho + y) * Wo + xx;
        map[o] = (c * H + src_index(y, H)) * W + src_index(xx, W);
        out[o] = src[map[o]];
      }
  return detail::make_result<T>("pad_reflect", {C, Ho, Wo}, std::move(out), {x},
                                [map](detail::Node<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
                                  }
                                });
}

/// Top-left [C,h,w] window of a [C,H,W] map.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t h, std::size_t w) {
  return narrow(narrow(x, 1, 0, h), 2, 0, w);
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(n * m);
  {
    detail::CMapMat<T> A(a.data().data(), n, k);
    detail::CMapMat<T> B(b.data().data(), k, m);
    detail::MapMat<T> Y(out.data(), n, m);
    Y.noalias() = A * B;
  }
  return detail::make_result<T>(
      "matmul", {n, m}, std::move(out), {a, b},
      [n, k, m](detail::Node<T>& self) {
        detail::CMapMat<T> G(self.grad.data(), n, m);
        if (T* ga = detail::input_grad(self, 0)) {
          detail::CMapMat<T> B(self.inputs[1]->data.data(), k, m);
          detail::MapMat<T>(ga, n, k).noalias() += G * B.transpose();
        }
        if (T* gb = detail::input_grad(self, 1)) {
          detail::CMapMat<T> A(self.inputs[0]->data.data(), n, k);
          detail::MapMat<T>(gb, k, m).noalias() += A.transpose() * G;
        }
      });
}

/// Row-wise affine map: x [n,in] * weight[out,in]^T + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require(x.rank() == 2 && weight.rank() == 2 && bias.rank() == 1 &&
                      weight.dim(1) == x.dim(1) && bias.dim(0) == weight.dim(0),
                  "linear: x " + shape_str(x.shape()) + ", weight " +
                      shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  std::vector<T> out(n * dout);
  {
    detail::CMapMat<T> X(x.data().data(), n, din);
    detail::CMapMat<T> Wt(weight.data().data(), dout, din);
    detail::MapMat<T> Y(out.data(), n, dout);
    Y.noalias() = X * Wt.transpose();
    auto b = bias.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += b[j];
  }
  return detail::make_result<T>(
      "linear", {n, dout}, std::move(out), {x, weight, bias},
      [n, din, dout](detail::Node<T>& self) {
        detail::CMapMat<T> G(self.grad.data(), n, dout);
        if (T* gx = detail::input_grad(self, 0)) {
          detail::CMapMat<T> Wt(self.inputs[1]->data.data(), dout, din);
          detail::MapMat<T>(gx, n, din).noalias() += G * Wt;
        }
        if (T* gw = detail::input_grad(self, 1)) {
          detail::CMapMat<T> X(self.inputs[0]->data.data(), n, din);
          detail::MapMat<T>(gw, dout, din).noalias() += G.transpose() * X;
        }
        if (T* gb = detail::input_grad(self, 2)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dout; ++j) gb[j] += self.grad[i * dout + j];
        }
      });
}

/// Zero-padded cross-correlation of x [Cin,H,W] with weight [Cout,Cin,k,k]
/// plus bias [Cout]. Pass an undefined bias tensor for no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  detail::require(x.rank() == 3 && weight.rank() == 4,
                  "conv2d: expects x [C,H,W] and weight [Co,Ci,k,k]");
  const std::size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == Cin, "conv2d: input has " + std::to_string(Cin) +
                                            " channels, weight expects " +
                                            std::to_string(weight.dim(1)));
  detail::require(weight.dim(3) == k && k % 2 == 1, "conv2d: kernel must be square and odd");
  detail::require(stride >= 1, "conv2d: stride must be positive");
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bias shape");
  }
  detail::require(H + 2 * padding >= k && W + 2 * padding >= k,
                  "conv2d: input smaller than kernel");
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t K = Cin * k * k, N = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && padding == 0);

  std::vector<T> col;
  const T* colp = x.data().data();
  if (!direct) {
    col.resize(K * N);
    detail::im2col(x.data().data(), Cin, H, W, k, stride, padding, Ho, Wo, col.data());
    colp = col.data();
  }
  std::vector<T> out(Cout * N);
  {
    detail::CMapMat<T> Wm(weight.data().data(), Cout, K);
    detail::CMapMat<T> Cm(colp, K, N);
    detail::MapMat<T> Y(out.data(), Cout, N);
    Y.noalias() = Wm * Cm;
    if (has_bias) {
      auto b = bias.data();
      for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t i = 0; i < N; ++i) out[o * N + i] += b[o];
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      "conv2d", {Cout, Ho, Wo}, std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        detail::CMapMat<T> G(self.grad.data(), Cout, N);
        const auto& xd = self.inputs[0]->data;
        T* gx = detail::input_grad(self, 0);
        T* gw = detail::input_grad(self, 1);
        if (has_bias) {
          if (T* gb = detail::input_grad(self, 2)) {
            for (std::size_t o = 0; o < Cout; ++o) {
              T acc = T(0);
              for (std::size_t i = 0; i < N; ++i) acc += self.grad[o * N + i];
              gb[o] += acc;
            }
          }
        }
        if (gw) {
          std::vector<T> c2;
          const T* cp = xd.data();
          if (!direct) {
            c2.resize(K * N);
            detail::im2col(xd.data(), Cin, H, W, k, stride, padding, Ho, Wo, c2.data());
            cp = c2.data();
          }
          detail::CMapMat<T> Cm(cp, K, N);
          detail::MapMat<T>(gw, Cout, K).noalias() += G * Cm.transpose();
        }
        if (gx) {
          detail::CMapMat<T> Wm(self.inputs[1]->data.data(), Cout, K);
          if (direct) {
            detail::MapMat<T>(gx, K, N).noalias() += Wm.transpose() * G;
          } else {
            std::vector<T> dcol(K * N);
            detail::MapMat<T>(dcol.data(), K, N).noalias() = Wm.transpose() * G;
            detail::col2im_add(dcol.data(), Cin, H, W, k, stride, padding, Ho, Wo, gx);
          }
        }
      });
}

// ---------------------------------------------------------------- normalization

/// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::require(x.rank() >= 1, "softmax: scalar input");
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * m;
    T* dst = out.data() + r * m;
    const double mx = *std::max_element(src, src + m);
    std::vector<double> e(m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      e[j] = std::exp(static_cast<double>(src[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < m; ++j) dst[j] = static_cast<T>(e[j] / total);
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x},
                                [rows, m](detail::Node<T>& self) {
                                  T* g = detail::input_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * m;
                                    const T* gy = self.grad.data() + r * m;
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < m; ++j) dot += static_cast<double>(gy[j]) * y[j];
                                    for (std::size_t j = 0; j < m; ++j) {
                                      g[r * m + j] += static_cast<T>(y[j] * (gy[j] - dot));
                                    }
                                  }
                                });
}

/// Normalizes each row of x [n,D] to zero mean / unit variance, then
/// applies gamma and beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require(x.rank() == 2 && gamma.rank() == 1 && beta.rank() == 1 &&
                      gamma.dim(0) == x.dim(1) && beta.dim(0) == x.dim(1),
                  "layer_norm: x " + shape_str(x.shape()) + ", gamma " +
                      shape_str(gamma.shape()));
  const std::size_t n = x.dim(0), D = x.dim(1);
  std::vector<T> out(n * D), xhat(n * D), inv_std(n);
  auto in = x.data();
  auto ga = gamma.data();
  auto be = beta.data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = in.data() + r * D;
    T mu = T(0);
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(D);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (row[j] - mu) * inv_std[r];
      out[r * D + j] = ga[j] * xhat[r * D + j] + be[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", {n, D}, std::move(out), {x, gamma, beta},
      [n, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        const auto& ga = self.inputs[1]->data;
        if (T* gg = detail::input_grad(self, 1)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < D; ++j) gg[j] += self.grad[r * D + j] * xhat[r * D + j];
        }
        if (T* gb = detail::input_grad(self, 2)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < D; ++j) gb[j] += self.grad[r * D + j];
        }
        if (T* gx = detail::input_grad(self, 0)) {
          const T d = static_cast<T>(D);
          for (std::size_t r = 0; r < n; ++r) {
            T s1 = T(0), s2 = T(0);
            for (std::size_t j = 0; j < D; ++j) {
              T dxh = self.grad[r * D + j] * ga[j];
              s1 += dxh;
              s2 += dxh * xhat[r * D + j];
            }
            for (std::size_t j = 0; j < D; ++j) {
              T dxh = self.grad[r * D + j] * ga[j];
              gx[r * D + j] += inv_std[r] / d * (d * dxh - s1 - xhat[r * D + j] * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- resampling

/// 2x bilinear upsample of [C,H,W] with half-pixel centres
/// (align_corners = false); edges clamp.
template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "bilinear_upsample2x: needs [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  auto ty = detail::upsample_taps(H);
  auto tx = detail::upsample_taps(W);
  std::vector<T> out(C * Ho * Wo);
  auto in = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = in.data() + c * H * W;
    T* dst = out.data() + c * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const T wy = static_cast<T>(ty.w1[oy]);
      const T* r0 = src + ty.i0[oy] * W;
      const T* r1 = src + ty.i1[oy] * W;
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T wx = static_cast<T>(tx.w1[ox]);
        const std::size_t x0 = tx.i0[ox], x1 = tx.i1[ox];
        T top = (T(1) - wx) * r0[x0] + wx * r0[x1];
        T bot = (T(1) - wx) * r1[x0] + wx * r1[x1];
        dst[oy * Wo + ox] = (T(1) - wy) * top + wy * bot;
      }
    }
  }
  return detail::make_result<T>(
      "bilinear_upsample2x", {C, Ho, Wo}, std::move(out), {x},
      [=](detail::Node<T>& self) {
        T* g = detail::input_grad(self, 0);
        if (!g) return;
        for (std::size_t c = 0; c < C; ++c) {
          T* gs = g + c * H * W;
          const T* gd = self.grad.data() + c * Ho * Wo;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const T wy = static_cast<T>(ty.w1[oy]);
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const T wx = static_cast<T>(tx.w1[ox]);
              const T v = gd[oy * Wo + ox];
              gs[ty.i0[oy] * W + tx.i0[ox]] += (T(1) - wy) * (T(1) - wx) * v;
              gs[ty.i0[oy] * W + tx.i1[ox]] += (T(1) - wy) * wx * v;
              gs[ty.i1[oy] * W + tx.i0[ox]] += wy * (T(1) - wx) * v;
              gs[ty.i1[oy] * W + tx.i1[ox]] += wy * wx * v;
            }
          }
        }
      });
}

/// Backward warp: out(x, y) = img(x + flow_x, y + flow_y), bilinear, with
/// sample positions clamped to the image border. `flow` is [2,H,W] data
/// (dx plane first) and receives no gradient.
template <typename T>
Tensor<T> bilinear_warp(const Tensor<T>& img, const Tensor<T>& flow) {
  detail::require(img.rank() == 3 && flow.rank() == 3 && flow.dim(0) == 2 &&
                      flow.dim(1) == img.dim(1) && flow.dim(2) == img.dim(2),
                  "bilinear_warp: img " + shape_str(img.shape()) + ", flow " +
                      shape_str(flow.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t P = H * W;
  struct Tap {
    std::size_t x0, x1, y0, y1;
    T ax, ay;
  };
  std::vector<Tap> taps(P);
  auto fl = flow.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      T sx = static_cast<T>(x) + fl[i];
      T sy = static_cast<T>(y) + fl[P + i];
      sx = std::clamp(sx, T(0), static_cast<T>(W - 1));
      sy = std::clamp(sy, T(0), static_cast<T>(H - 1));
      Tap t;
      t.x0 = std::min(static_cast<std::size_t>(std::floor(sx)), W - 1);
      t.y0 = std::min(static_cast<std::size_t>(std::floor(sy)), H - 1);
      t.x1 = std::min(t.x0 + 1, W - 1);
      t.y1 = std::min(t.y0 + 1, H - 1);
      t.ax = sx - static_cast<T>(t.x0);
      t.ay = sy - static_cast<T>(t.y0);
      taps[i] = t;
    }
  }
  std::vector<T> out(C * P);
  auto in = img.data();
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = in.data() + c * P;
    for (std::size_t i = 0; i < P; ++i) {
      const Tap& t = taps[i];
      T top = (T(1) - t.ax) * src[t.y0 * W + t.x0] + t.ax * src[t.y0 * W + t.x1];
      T bot = (T(1) - t.ax) * src[t.y1 * W + t.x0] + t.ax * src[t.y1 * W + t.x1];
      out[c * P + i] = (T(1) - t.ay) * top + t.ay * bot;
    }
  }
  return detail::make_result<T>(
      "bilinear_warp", img.shape(), std::move(out), {img},
      [C, P, W, taps = std::move(taps)](detail::Node<T>& self) {
        T* g = detail::input_grad(self, 0);
        if (!g) return;
        for (std::size_t c = 0; c < C; ++c) {
          T* gs = g + c * P;
          for (std::size_t i = 0; i < P; ++i) {
            const Tap& t = taps[i];
            const T v = self.grad[c * P + i];
            gs[t.y0 * W + t.x0] += (T(1) - t.ay) * (T(1) - t.ax) * v;
            gs[t.y0 * W + t.x1] += (T(1) - t.ay) * t.ax * v;
            gs[t.y1 * W + t.x0] += t.ay * (T(1) - t.ax) * v;
            gs[t.y1 * W + t.x1] += t.ay * t.ax * v;
          }
        }
      });
}

}  // namespace msfet::ops
