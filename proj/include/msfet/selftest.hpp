#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "msfet/event_core.hpp"
#include "msfet/gradcheck.hpp"
#include "msfet/losses.hpp"
#include "msfet/model.hpp"
#include "msfet/ops.hpp"
#include "msfet/wavelet.hpp"

namespace msfet::selftest {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double limit = 0.0;
};

/// A check computes a worst-case error; `fault` asks it to corrupt its own
/// computation so the harness can prove the check bites.
struct Property {
  std::string name;
  double limit;
  std::function<double(bool fault)> measure;
};

namespace detail {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, double lo, double hi, std::mt19937_64& rng, bool grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from(shape, std::move(v), grad);
}

template <typename T>
double roundtrip_error(std::uint64_t seed, bool fault) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<T>({4, 16, 16}, -10.0, 10.0, rng);
    auto sb = wavelet::dwt2(x);
    if (fault) sb.hh.mutable_data()[0] += T(1e-2);
    auto y = wavelet::iwt2(sb);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(y.data()[i]) - static_cast<double>(x.data()[i])));
    }
  }
  return worst;
}

}  // namespace detail

inline std::vector<Property> properties() {
  std::vector<Property> ps;
  ps.push_back({"wavelet_roundtrip_f32", 1e-6, [](bool fault) { return detail::roundtrip_error<float>(11, fault); }});
  ps.push_back({"wavelet_roundtrip_f64", 1e-12, [](bool fault) { return detail::roundtrip_error<double>(12, fault); }});
  ps.push_back({"wavelet_energy", 1e-6, [](bool fault) {
                  std::mt19937_64 rng(13);
                  double worst = 0.0;
                  for (int trial = 0; trial < 20; ++trial) {
                    auto x = detail::random_tensor<double>({4, 16, 16}, -10.0, 10.0, rng);
                    auto sb = wavelet::dwt2(x);
                    double e = wavelet::energy(sb);
                    if (fault) e *= 1.0 + 1e-4;
                    worst = std::max(worst, std::abs(e - wavelet::energy(x)) / wavelet::energy(x));
                  }
                  return worst;
                }});
  ps.push_back({"voxel_conservation", 1e-9, [](bool fault) {
                  std::mt19937_64 rng(14);
                  std::uniform_real_distribution<double> u(0.0, 1.0);
                  double worst = 0.0;
                  for (std::size_t bins : {2, 4, 5, 6, 8, 10}) {
                    for (int trial = 0; trial < 20; ++trial) {
                      events::EventGroup g;
                      g.t_start = 1.0;
                      g.t_end = 1.0 + 0.01 + u(rng);
                      const int n = 1 + static_cast<int>(u(rng) * 200);
                      for (int i = 0; i < n; ++i) {
                        g.events.push_back({g.t_start + (g.t_end - g.t_start) * u(rng),
                                            static_cast<std::uint16_t>(u(rng) * 16),
                                            static_cast<std::uint16_t>(u(rng) * 12),
                                            static_cast<std::int8_t>(u(rng) < 0.5 ? -1 : 1)});
                      }
                      auto v = events::encode_voxel(g, bins, 12, 16);
                      double total = v.total();
                      if (fault) total += 1e-6;
                      worst = std::max(worst, std::abs(total - static_cast<double>(g.polarity_sum())));
                    }
                  }
                  return worst;
                }});
  ps.push_back({"softmax_rows", 1e-6, [](bool fault) {
                  std::mt19937_64 rng(15);
                  auto x = detail::random_tensor<float>({32, 64}, -20.0, 20.0, rng);
                  auto s = ops::softmax(x);
                  double worst = 0.0;
                  for (std::size_t r = 0; r < 32; ++r) {
                    double sum = 0.0;
                    for (std::size_t c = 0; c < 64; ++c) sum += s.data()[r * 64 + c];
                    if (fault && r == 0) sum *= 1.001;
                    worst = std::max(worst, std::abs(sum - 1.0));
                  }
                  return worst;
                }});
  ps.push_back({"warp_identity", 0.0, [](bool fault) {
                  std::mt19937_64 rng(16);
                  auto img = detail::random_tensor<float>({2, 9, 7}, 0.0, 1.0, rng);
                  auto flow = Tensor<float>::full({2, 9, 7}, fault ? 0.25f : 0.0f);
                  auto w = ops::bilinear_warp(img, flow);
                  double worst = 0.0;
                  for (std::size_t i = 0; i < img.numel(); ++i) {
                    worst = std::max(worst, std::abs(double(w.data()[i]) - double(img.data()[i])));
                  }
                  return worst;
                }});
  ps.push_back({"gradcheck_conv2d_f64", 1e-6, [](bool fault) {
                  std::mt19937_64 rng(17);
                  auto x = detail::random_tensor<double>({3, 6, 6}, -1.0, 1.0, rng);
                  auto w = detail::random_tensor<double>({4, 3, 3, 3}, -0.5, 0.5, rng);
                  auto b = detail::random_tensor<double>({4}, -0.5, 0.5, rng);
                  return finite_diff_check<double>(
                      [&](const Tensor<double>& xx) {
                        auto y = ops::sum(ops::square(ops::conv2d(xx, w, b, 2, 1)));
                        if (fault && !grad_enabled()) y = ops::add(y, ops::mul_scalar(ops::sum(xx), 1e-3));
                        return y;
                      },
                      x);
                }});
  ps.push_back({"gradcheck_attention_f64", 1e-6, [](bool fault) {
                  std::mt19937_64 rng(18);
                  auto q = detail::random_tensor<double>({6, 8}, -1.0, 1.0, rng);
                  auto k = detail::random_tensor<double>({6, 8}, -1.0, 1.0, rng);
                  auto v = detail::random_tensor<double>({6, 8}, -1.0, 1.0, rng);
                  return finite_diff_check<double>(
                      [&](const Tensor<double>& qq) {
                        auto y = ops::sum(ops::square(model::multi_head_attention(qq, k, v, 2, std::sqrt(8.0))));
                        if (fault && !grad_enabled()) y = ops::mul_scalar(y, 1.01);
                        return y;
                      },
                      q);
                }});
  ps.push_back({"gradcheck_temporal_loss_f64", 1e-6, [](bool fault) {
                  std::mt19937_64 rng(19);
                  auto prev = detail::random_tensor<double>({1, 8, 8}, 0.0, 1.0, rng);
                  auto cur = detail::random_tensor<double>({1, 8, 8}, 0.0, 1.0, rng);
                  auto gt0 = detail::random_tensor<double>({1, 8, 8}, 0.0, 1.0, rng);
                  auto gt1 = detail::random_tensor<double>({1, 8, 8}, 0.0, 1.0, rng);
                  auto flow = detail::random_tensor<double>({2, 8, 8}, -1.5, 1.5, rng);
                  return finite_diff_check<double>(
                      [&](const Tensor<double>& c) {
                        auto y = losses::temporal_consistency_loss(c, prev, flow, gt1, gt0, 2.0);
                        if (fault && !grad_enabled()) y = ops::mul_scalar(y, 1.01);
                        return y;
                      },
                      cur);
                }});
  ps.push_back({"gradcheck_model_tiny_f64", 1e-3, [](bool fault) {
                  model::ModelConfig cfg;
                  cfg.base_channels = 4;
                  cfg.embed_dim = 16;
                  cfg.heads = 2;
                  auto net = model::MsfetModel<double>::create(cfg, 20);
                  std::mt19937_64 rng(20);
                  auto voxel = detail::random_tensor<double>({5, 16, 16}, -1.0, 1.0, rng);
                  auto target = detail::random_tensor<double>({1, 16, 16}, 0.0, 1.0, rng);
                  return finite_diff_check<double>(
                      [&](const Tensor<double>& x) {
                        model::RecurrentState<double> state;
                        net.forward(x, state);
                        auto y = ops::mean(ops::square(ops::sub(net.forward(x, state), target)));
                        if (fault && !grad_enabled()) y = ops::mul_scalar(y, 1.01);
                        return y;
                      },
                      voxel);
                }});
  return ps;
}

inline std::vector<std::string> property_names() {
  std::vector<std::string> names;
  for (const auto& p : properties()) names.push_back(p.name);
  return names;
}

/// Runs every property; `fault` names one to sabotage (empty for none).
inline std::vector<PropertyResult> run(const std::string& fault = "") {
  const auto props = properties();
  if (!fault.empty() && std::none_of(props.begin(), props.end(), [&](const auto& p) { return p.name == fault; })) {
    throw ArgumentError("unknown fault target '" + fault + "'");
  }
  std::vector<PropertyResult> out;
  for (const auto& p : props) {
    const bool f = p.name == fault;
    PropertyResult r{p.name, false, 0.0, p.limit};
    try {
      r.value = p.measure(f);
      r.passed = r.value <= p.limit;
    } catch (const std::exception&) {
      r.value = std::numeric_limits<double>::infinity();
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace msfet::selftest
