#pragma once

// Named parameter storage and the handful of layers the networks use.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "expx/ops.hpp"
#include "expx/tensor.hpp"

namespace expx {

using Rng = std::mt19937_64;

// Uniform in [lo, hi) from the top 53 bits; stable across standard libraries.
inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Ordered, uniquely named parameters. Layers hold handles into the set, so
// in-place updates through the set are seen by the layers.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T> add(std::string name, Shape shape, std::vector<T> values) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor<T> t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }
  Tensor<T> get(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ConfigError("unknown parameter: " + name);
  }

  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.clear_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.second.set_requires_grad(on);
  }

  // Copies values by name, converting precision. Names and shapes must match.
  template <typename U>
  void assign_from(const ParamSet<U>& other) {
    if (other.size() != size())
      throw ConfigError("assign_from: parameter count " + std::to_string(other.size()) +
                        " vs " + std::to_string(size()));
    for (auto& [name, t] : entries_) {
      const Tensor<U>* src = other.find(name);
      if (!src) throw ConfigError("assign_from: missing parameter " + name);
      if (src->shape() != t.shape())
        throw ShapeError("assign_from: " + name + " has shape " + shape_str(src->shape()) +
                         ", expected " + shape_str(t.shape()));
      auto dst = t.mutable_data();
      const auto sv = src->data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(sv[i]);
    }
  }

 private:
  std::vector<Entry> entries_;
};

enum class Init { KaimingUniform, Zero };

template <typename T>
std::vector<T> init_values(std::int64_t count, std::int64_t fan_in, Init init, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(count), T(0));
  if (init == Init::KaimingUniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& x : v) x = static_cast<T>(uniform(rng, -bound, bound));
  }
  return v;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  static Linear make(ParamSet<T>& ps, const std::string& name, std::int64_t in, std::int64_t out,
                     Rng& rng, Init init = Init::KaimingUniform) {
    Linear l;
    l.weight = ps.add(name + ".weight", {out, in}, init_values<T>(out * in, in, init, rng));
    l.bias = ps.add(name + ".bias", {out}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  static Conv2d make(ParamSet<T>& ps, const std::string& name, std::int64_t in, std::int64_t out,
                     std::int64_t k, std::int64_t stride, Rng& rng,
                     Init init = Init::KaimingUniform) {
    if (k % 2 == 0) throw ConfigError(name + ": kernel extent must be odd");
    Conv2d c;
    c.weight = ps.add(name + ".weight", {out, in, k, k},
                      init_values<T>(out * in * k * k, in * k * k, init, rng));
    c.bias = ps.add(name + ".bias", {out}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv2d(x, weight, bias, stride, pad);
  }
};

// Non-local block: x + gamma * V softmax(QᵀK)ᵀ over flattened positions,
// with 1×1 projections and a scalar gate gamma that starts at 0.
template <typename T>
struct SelfAttention {
  Conv2d<T> query, key, value;
  Tensor<T> gamma;

  static SelfAttention make(ParamSet<T>& ps, const std::string& name, std::int64_t channels,
                            std::int64_t qk_channels, Rng& rng) {
    SelfAttention a;
    a.query = Conv2d<T>::make(ps, name + ".query", channels, qk_channels, 1, 1, rng);
    a.key = Conv2d<T>::make(ps, name + ".key", channels, qk_channels, 1, 1, rng);
    a.value = Conv2d<T>::make(ps, name + ".value", channels, channels, 1, 1, rng);
    a.gamma = ps.add(name + ".gamma", {1}, {T(0)});
    return a;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::int64_t cq = query.weight.dim(0);
    auto q = ops::reshape(query(x), {n, cq, hw});
    auto k = ops::reshape(key(x), {n, cq, hw});
    auto v = ops::reshape(value(x), {n, c, hw});
    auto attn = ops::softmax_last(ops::matmul(q, k, /*trans_a=*/true, false));  // [n, hw, hw]
    auto out = ops::reshape(ops::matmul(v, attn, false, /*trans_b=*/true), x.shape());
    return ops::add(x, ops::scale_by(out, gamma));
  }
};

}  // namespace expx
