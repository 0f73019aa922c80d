#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "msfet/tensor.hpp"

namespace msfet {

/// Compares reverse-mode gradients of a scalar function against central
/// differences, one coordinate at a time.
///
/// `x` must be a leaf; its values are perturbed in place and restored.
/// Returns max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|).
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                         Tensor<T> x, double h = 1e-3) {
  if (!x.is_leaf()) throw ArgumentError("finite_diff_check: x must be a leaf tensor");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tensor<T> y = f(x);
    if (y.numel() != 1) throw ArgumentError("finite_diff_check: f must return a scalar");
    if (y.requires_grad()) {
      backward(y);
      if (x.has_grad()) {
        for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] = static_cast<double>(x.grad()[i]);
      }
    }
  }
  x.zero_grad();

  double worst = 0.0;
  auto values = x.mutable_data();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = static_cast<T>(static_cast<double>(saved) + h);
    const double fp = static_cast<double>(f(x).item());
    values[i] = static_cast<T>(static_cast<double>(saved) - h);
    const double fm = static_cast<double>(f(x).item());
    values[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  x.set_requires_grad(had_grad);
  return worst;
}

}  // namespace msfet
