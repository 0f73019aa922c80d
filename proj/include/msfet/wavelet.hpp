#pragma once

#include <array>
#include <string>

#include "msfet/ops.hpp"
#include "msfet/tensor.hpp"

namespace msfet::wavelet {

/// Single-level 2-D Haar decomposition of a [C,H,W] map; each band is
/// [C,H/2,W/2].
template <typename T>
struct SubbandSet {
  Tensor<T> ll, lh, hl, hh;
};

enum class Band { LL = 0, LH = 1, HL = 2, HH = 3 };

/// Orthonormal Haar filters over a 2x2 block (a b / c d), row-major,
/// each scaled by 1/2:
///   LL = [ 1  1;  1  1]   LH = [-1 -1;  1  1]
///   HL = [-1  1; -1  1]   HH = [ 1 -1; -1  1]
inline constexpr std::array<std::array<int, 4>, 4> kHaar{{
    {{1, 1, 1, 1}},
    {{-1, -1, 1, 1}},
    {{-1, 1, -1, 1}},
    {{1, -1, -1, 1}},
}};

namespace detail {

template <typename T>
Tensor<T> analysis_band(const Tensor<T>& x, Band band) {
  const auto& f = kHaar[static_cast<int>(band)];
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t h = H / 2, w = W / 2;
  std::vector<T> out(C * h * w);
  auto in = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = in.data() + c * H * W;
    for (std::size_t i = 0; i < h; ++i) {
      const T* r0 = src + (2 * i) * W;
      const T* r1 = r0 + W;
      for (std::size_t j = 0; j < w; ++j) {
        const double acc = f[0] * double(r0[2 * j]) + f[1] * double(r0[2 * j + 1]) +
                           f[2] * double(r1[2 * j]) + f[3] * double(r1[2 * j + 1]);
        out[(c * h + i) * w + j] = static_cast<T>(0.5 * acc);
      }
    }
  }
  return msfet::detail::make_result<T>(
      "dwt2", {C, h, w}, std::move(out), {x}, [f, C, H, W, h, w](msfet::detail::Node<T>& self) {
        T* g = msfet::detail::input_grad(self, 0);
        if (!g) return;
        for (std::size_t c = 0; c < C; ++c) {
          T* dst = g + c * H * W;
          for (std::size_t i = 0; i < h; ++i) {
            T* r0 = dst + (2 * i) * W;
            T* r1 = r0 + W;
            for (std::size_t j = 0; j < w; ++j) {
              const T v = T(0.5) * self.grad[(c * h + i) * w + j];
              r0[2 * j] += T(f[0]) * v;
              r0[2 * j + 1] += T(f[1]) * v;
              r1[2 * j] += T(f[2]) * v;
              r1[2 * j + 1] += T(f[3]) * v;
            }
          }
        }
      });
}

}  // namespace detail

/// Blockwise Haar analysis. H and W must be even; padding is the caller's job.
/// Block sums are accumulated in double and rounded once.
template <typename T>
SubbandSet<T> dwt2(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("dwt2: expects [C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw ShapeError("dwt2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  return {detail::analysis_band(x, Band::LL), detail::analysis_band(x, Band::LH),
          detail::analysis_band(x, Band::HL), detail::analysis_band(x, Band::HH)};
}

/// Inverse of dwt2 (transposed filters).
template <typename T>
Tensor<T> iwt2(const SubbandSet<T>& s) {
  const Shape& sh = s.ll.shape();
  for (const auto* b : {&s.lh, &s.hl, &s.hh}) {
    if (b->shape() != sh) {
      throw ShapeError("iwt2: subband shapes differ: " + shape_str(sh) + " vs " + shape_str(b->shape()));
    }
  }
  if (sh.size() != 3) throw ShapeError("iwt2: subbands must be [C,h,w]");
  const std::size_t C = sh[0], h = sh[1], w = sh[2];
  const std::size_t H = 2 * h, W = 2 * w;
  std::vector<T> out(C * H * W);
  std::array<const T*, 4> bands{s.ll.data().data(), s.lh.data().data(), s.hl.data().data(),
                                s.hh.data().data()};
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t k = (c * h + i) * w + j;
        double px[4] = {0.0, 0.0, 0.0, 0.0};
        for (int b = 0; b < 4; ++b) {
          const double v = 0.5 * static_cast<double>(bands[b][k]);
          for (int q = 0; q < 4; ++q) px[q] += kHaar[b][q] * v;
        }
        T* r0 = out.data() + (c * H + 2 * i) * W + 2 * j;
        T* r1 = r0 + W;
        r0[0] = static_cast<T>(px[0]);
        r0[1] = static_cast<T>(px[1]);
        r1[0] = static_cast<T>(px[2]);
        r1[1] = static_cast<T>(px[3]);
      }
    }
  }
  return msfet::detail::make_result<T>(
      "iwt2", {C, H, W}, std::move(out), {s.ll, s.lh, s.hl, s.hh},
      [C, H, W, h, w](msfet::detail::Node<T>& self) {
        for (int b = 0; b < 4; ++b) {
          T* g = msfet::detail::input_grad(self, static_cast<std::size_t>(b));
          if (!g) continue;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < h; ++i)
              for (std::size_t j = 0; j < w; ++j) {
                const T* r0 = self.grad.data() + (c * H + 2 * i) * W + 2 * j;
                const T* r1 = r0 + W;
                g[(c * h + i) * w + j] += T(0.5) * (T(kHaar[b][0]) * r0[0] + T(kHaar[b][1]) * r0[1] +
                                                    T(kHaar[b][2]) * r1[0] + T(kHaar[b][3]) * r1[1]);
              }
        }
      });
}

template <typename T>
double energy(const Tensor<T>& x) {
  double e = 0.0;
  for (T v : x.data()) e += static_cast<double>(v) * static_cast<double>(v);
  return e;
}

template <typename T>
double energy(const SubbandSet<T>& s) {
  return energy(s.ll) + energy(s.lh) + energy(s.hl) + energy(s.hh);
}

}  // namespace msfet::wavelet
