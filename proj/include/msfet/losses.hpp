#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msfet/error.hpp"
#include "msfet/metrics.hpp"
#include "msfet/ops.hpp"
#include "msfet/tensor.hpp"

namespace msfet::losses {

struct LossConfig {
  double lambda_tc = 5.0;
  double alpha = 50.0;
  /// Unroll length L.
  std::size_t seq_len = 40;
  /// First step (1-based) that receives the temporal term.
  std::size_t tc_start = 2;
  std::string distance = "l1ssim";
  /// Collapse the occlusion map to exp(-alpha * sum of squared differences).
  bool scalar_occlusion = false;

  void validate() const {
    if (!(lambda_tc >= 0.0) || !std::isfinite(lambda_tc)) throw ConfigError("loss.lambda_tc must be finite and >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("loss.alpha must be finite and >= 0");
    if (tc_start < 1 || tc_start > seq_len) throw ConfigError("loss.tc_start must satisfy 1 <= L0 <= L");
    if (distance != "l1ssim" && distance != "l1" && distance != "mse") {
      throw ConfigError("loss.distance must be l1ssim|l1|mse, got " + distance);
    }
  }
};

/// Samples the previous frame at x - flow, bringing it onto frame k's grid.
/// `flow` holds the forward displacement (dx, dy) from frame k-1 to k.
template <typename T>
Tensor<T> warp_previous(const Tensor<T>& prev, const Tensor<T>& flow) {
  std::vector<T> back(flow.data().begin(), flow.data().end());
  for (auto& v : back) v = -v;
  return ops::bilinear_warp(prev, Tensor<T>::from(flow.shape(), std::move(back)));
}

/// Per-pixel exp(-alpha (a - b)^2), or the scalar exp(-alpha ||a - b||^2)
/// broadcast to every pixel. Not part of the graph.
template <typename T>
Tensor<T> occlusion_weight(const Tensor<T>& current, const Tensor<T>& prev_warped, double alpha,
                           bool scalar = false) {
  if (current.shape() != prev_warped.shape()) {
    throw ShapeError("occlusion_weight: shapes differ: " + shape_str(current.shape()) + " vs " +
                     shape_str(prev_warped.shape()));
  }
  auto a = current.data(), b = prev_warped.data();
  std::vector<T> m(a.size());
  if (scalar) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      s += d * d;
    }
    std::fill(m.begin(), m.end(), static_cast<T>(std::exp(-alpha * s)));
  } else {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      m[i] = static_cast<T>(std::exp(-alpha * d * d));
    }
  }
  return Tensor<T>::from(current.shape(), std::move(m));
}

/// mean(M * |recon_k - W(recon_prev)|) with M from the ground-truth pair.
template <typename T>
Tensor<T> temporal_consistency_loss(const Tensor<T>& recon_k, const Tensor<T>& recon_prev, const Tensor<T>& flow,
                                    const Tensor<T>& gt_k, const Tensor<T>& gt_prev, double alpha,
                                    bool scalar_occlusion = false) {
  const Shape& s = recon_k.shape();
  if (recon_prev.shape() != s || gt_k.shape() != s || gt_prev.shape() != s) {
    throw ShapeError("temporal_consistency_loss: image shapes differ");
  }
  if (flow.rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != s[1] || flow.dim(2) != s[2]) {
    throw ShapeError("temporal_consistency_loss: flow " + shape_str(flow.shape()) + " does not match image " +
                     shape_str(s));
  }
  const Tensor<T> m = occlusion_weight(gt_k, warp_previous(gt_prev, flow), alpha, scalar_occlusion);
  return ops::mean(ops::mul(m, ops::abs(ops::sub(recon_k, warp_previous(recon_prev, flow)))));
}

template <typename T>
using DistanceFn = std::function<Tensor<T>(const Tensor<T>&, const Tensor<T>&)>;

/// Reconstruction distance by name: `l1ssim` (0.5 L1 + 0.5 (1 - SSIM)),
/// `l1` or `mse`.
template <typename T>
DistanceFn<T> make_distance(const std::string& kind) {
  if (kind == "l1") {
    return [](const Tensor<T>& a, const Tensor<T>& b) { return ops::mean(ops::abs(ops::sub(a, b))); };
  }
  if (kind == "mse") {
    return [](const Tensor<T>& a, const Tensor<T>& b) { return ops::mean(ops::square(ops::sub(a, b))); };
  }
  if (kind == "l1ssim") {
    return [](const Tensor<T>& a, const Tensor<T>& b) {
      const Tensor<T> l1 = ops::mean(ops::abs(ops::sub(a, b)));
      const Tensor<T> dssim = ops::add_scalar(ops::neg(metrics::ssim_tensor(a, b)), T(1));
      return ops::mul_scalar(ops::add(l1, dssim), T(0.5));
    };
  }
  throw ConfigError("unknown reconstruction distance '" + kind + "'");
}

template <typename T>
Tensor<T> reconstruction_distance(const Tensor<T>& recon, const Tensor<T>& gt, const std::string& kind = "l1ssim") {
  if (recon.shape() != gt.shape()) {
    throw ShapeError("reconstruction_distance: shapes differ: " + shape_str(recon.shape()) + " vs " +
                     shape_str(gt.shape()));
  }
  return make_distance<T>(kind)(recon, gt);
}

template <typename T>
struct LossTerms {
  Tensor<T> total;
  double reconstruction = 0.0;
  double temporal = 0.0;
};

/// Sum over k of distance(recon_k, gt_k) plus lambda_tc times the temporal
/// terms for k >= max(L0, 2). `flows[i]` maps frame i to frame i + 1.
template <typename T>
LossTerms<T> total_loss_terms(const std::vector<Tensor<T>>& recon, const std::vector<Tensor<T>>& gt,
                              const std::vector<Tensor<T>>& flows, const LossConfig& cfg,
                              const DistanceFn<T>& distance) {
  const std::size_t L = recon.size();
  if (L == 0) throw ArgumentError("total_loss: empty sequence");
  if (gt.size() != L) {
    throw ArgumentError("total_loss: " + std::to_string(L) + " reconstructions but " + std::to_string(gt.size()) +
                        " ground-truth frames");
  }
  const std::size_t first_tc = std::max<std::size_t>(cfg.tc_start, 2);
  if (L >= first_tc && flows.size() + 1 < L) {
    throw ArgumentError("total_loss: need " + std::to_string(L - 1) + " flows, got " + std::to_string(flows.size()));
  }
  LossTerms<T> out;
  Tensor<T> rec_sum;
  for (std::size_t k = 0; k < L; ++k) {
    Tensor<T> r = distance(recon[k], gt[k]);
    rec_sum = rec_sum.defined() ? ops::add(rec_sum, r) : r;
  }
  out.reconstruction = static_cast<double>(rec_sum.item());
  out.total = rec_sum;
  if (cfg.lambda_tc > 0.0 && L >= first_tc) {
    Tensor<T> tc_sum;
    for (std::size_t k = first_tc; k <= L; ++k) {
      Tensor<T> t = temporal_consistency_loss(recon[k - 1], recon[k - 2], flows[k - 2], gt[k - 1], gt[k - 2],
                                              cfg.alpha, cfg.scalar_occlusion);
      tc_sum = tc_sum.defined() ? ops::add(tc_sum, t) : t;
    }
    out.temporal = static_cast<double>(tc_sum.item());
    out.total = ops::add(out.total, ops::mul_scalar(tc_sum, static_cast<T>(cfg.lambda_tc)));
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& recon, const std::vector<Tensor<T>>& gt,
                     const std::vector<Tensor<T>>& flows, const LossConfig& cfg) {
  return total_loss_terms(recon, gt, flows, cfg, make_distance<T>(cfg.distance)).total;
}

}  // namespace msfet::losses
