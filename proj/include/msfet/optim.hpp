#pragma once

#include <cmath>
#include <vector>

#include "msfet/parameters.hpp"

namespace msfet {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double regardless of the
/// parameter precision.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  const AdamOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }
  long step_count() const { return t_; }

  /// Moment buffers, one per parameter slot, for checkpointing.
  struct State {
    long step = 0;
    std::vector<std::vector<double>> m, v;
  };

  State state() const { return {t_, m_, v_}; }

  void load_state(State s) {
    if (s.m.size() != s.v.size()) throw ArgumentError("adam state: moment lists differ in length");
    t_ = s.step;
    m_ = std::move(s.m);
    v_ = std::move(s.v);
  }

  /// Applies one update to every tensor that has a gradient buffer.
  void step(std::vector<Parameter<T>>& params) {
    if (m_.size() != params.size()) {
      m_.assign(params.size(), {});
      v_.assign(params.size(), {});
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<T>& w = params[p].tensor;
      if (!w.has_grad()) continue;
      auto g = w.grad();
      auto data = w.mutable_data();
      auto& m = m_[p];
      auto& v = v_[p];
      if (m.size() != data.size()) {
        m.assign(data.size(), 0.0);
        v.assign(data.size(), 0.0);
      }
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        data[i] = static_cast<T>(static_cast<double>(data[i]) -
                                 opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

 private:
  AdamOptions opts_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace msfet
