#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "msfet/error.hpp"
#include "msfet/tensor.hpp"

namespace msfet {

/// A learnable tensor and its dot-path name.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered, uniquely named collection of parameters. Lookup is by name;
/// iteration follows registration order.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, Tensor<T>::zeros(std::move(shape), true)});
    return params_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  std::size_t size() const { return params_.size(); }

  std::size_t count_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Per-parameter generator seeded from (seed, name) so one parameter's
/// values do not depend on how many others were registered before it.
inline std::mt19937_64 parameter_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
void fill_uniform(Tensor<T>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

}  // namespace msfet
