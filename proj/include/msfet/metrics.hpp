#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "msfet/error.hpp"
#include "msfet/ops.hpp"
#include "msfet/tensor.hpp"

namespace msfet::metrics {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 11x11 Gaussian (sigma 1.5) as a [1,1,11,11] conv kernel.
template <typename T>
Tensor<T> gaussian_window() {
  const std::size_t n = kSsimWindow;
  std::vector<double> g(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(n / 2);
    g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += g[i];
  }
  std::vector<T> w(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] = static_cast<T>(g[i] * g[j] / (s * s));
  return Tensor<T>::from({1, 1, n, n}, std::move(w));
}

/// Differentiable single-scale SSIM of two [1,H,W] images with dynamic
/// range 1, averaged over valid window positions. Returns a {1} tensor.
template <typename T>
Tensor<T> ssim_tensor(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.rank() != 3 || a.dim(0) != 1) throw ShapeError("ssim: expects [1,H,W], got " + shape_str(a.shape()));
  if (a.dim(1) < kSsimWindow || a.dim(2) < kSsimWindow) {
    throw ShapeError("ssim: image " + shape_str(a.shape()) + " smaller than the 11x11 window");
  }
  const Tensor<T> w = gaussian_window<T>();
  const Tensor<T> none;
  auto blur = [&](const Tensor<T>& x) { return ops::conv2d(x, w, none, 1, 0); };
  const T c1 = static_cast<T>(kSsimK1 * kSsimK1);
  const T c2 = static_cast<T>(kSsimK2 * kSsimK2);
  const Tensor<T> mu_a = blur(a), mu_b = blur(b);
  const Tensor<T> mu_aa = ops::square(mu_a), mu_bb = ops::square(mu_b), mu_ab = ops::mul(mu_a, mu_b);
  const Tensor<T> var_a = ops::sub(blur(ops::square(a)), mu_aa);
  const Tensor<T> var_b = ops::sub(blur(ops::square(b)), mu_bb);
  const Tensor<T> cov = ops::sub(blur(ops::mul(a, b)), mu_ab);
  const Tensor<T> num = ops::mul(ops::add_scalar(ops::mul_scalar(mu_ab, T(2)), c1),
                                 ops::add_scalar(ops::mul_scalar(cov, T(2)), c2));
  const Tensor<T> den = ops::mul(ops::add_scalar(ops::add(mu_aa, mu_bb), c1),
                                 ops::add_scalar(ops::add(var_a, var_b), c2));
  return ops::mean(ops::div(num, den));
}

/// SSIM evaluated in double precision without recording a graph.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  NoGradGuard guard;
  auto to_double = [](const Tensor<T>& x) {
    std::vector<double> v(x.data().begin(), x.data().end());
    return Tensor<double>::from(x.shape(), std::move(v));
  };
  return ssim_tensor(to_double(a), to_double(b)).item();
}

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shapes differ");
  if (a.numel() == 0) throw ShapeError("mse: empty images");
  double s = 0.0;
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

/// 10 log10(peak^2 / MSE); +infinity for identical images.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

struct FrameMetrics {
  std::size_t frame_index = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

/// `frame_index,psnr_db,ssim` rows followed by a `mean,<psnr>,<ssim>` row.
inline std::string metrics_csv(const std::vector<FrameMetrics>& rows) {
  std::string out = "frame_index,psnr_db,ssim\n";
  double ps = 0.0, ss = 0.0;
  for (const auto& r : rows) {
    out += std::to_string(r.frame_index) + "," + format_metric(r.psnr_db) + "," + format_metric(r.ssim) + "\n";
    ps += r.psnr_db;
    ss += r.ssim;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  out += "mean," + format_metric(rows.empty() ? 0.0 : ps / n) + "," + format_metric(rows.empty() ? 0.0 : ss / n) +
         "\n";
  return out;
}

}  // namespace msfet::metrics
