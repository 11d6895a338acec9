#pragma once

#include <string>
#include <utility>
#include <vector>

#include "care/io.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"

// Named-parameter registry. Registration order is fixed by construction
// order, so optimizer walks, checkpoints, and manifests are deterministic.
// Every parameter's initializer is keyed by (seed, name), never by
// registration order, so adding a parameter elsewhere does not reshuffle
// the init of existing ones.

namespace care {

template <class S>
class ParamSet {
 public:
  explicit ParamSet(uint64_t seed = 1) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  Tensor<S> add(const std::string& name, Tensor<S> t, bool trainable = true) {
    if (find(name) != nullptr)
      throw TensorError("param", "duplicate name: " + name);
    t.set_requires_grad(trainable);
    t.zero_grad();
    items_.emplace_back(name, t);
    return t;
  }

  Tensor<S> randn(const std::string& name, Shape shape, double sigma,
                  bool trainable = true) {
    auto rng = rng_for(seed_, ("init:" + name).c_str());
    return add(name, Tensor<S>::randn(std::move(shape), rng, sigma),
               trainable);
  }

  Tensor<S> zeros(const std::string& name, Shape shape,
                  bool trainable = true) {
    return add(name, Tensor<S>::zeros(std::move(shape)), trainable);
  }

  Tensor<S>* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& items() const {
    return items_;
  }
  size_t size() const { return items_.size(); }

  void zero_grads() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

  std::vector<NamedTensor> snapshot() const {
    std::vector<NamedTensor> out;
    out.reserve(items_.size());
    for (auto& [n, t] : items_) {
      NamedTensor nt;
      nt.name = n;
      nt.shape = t.shape();
      nt.data.assign(t.value().begin(), t.value().end());
      out.push_back(std::move(nt));
    }
    return out;
  }

  // Loads by name; every registered parameter must be present with the
  // right shape. Extra names in `ts` are ignored (checkpoints may carry
  // EMA copies under a prefix).
  void load(const std::vector<NamedTensor>& ts) {
    for (auto& [n, t] : items_) {
      const NamedTensor* src = nullptr;
      for (auto& cand : ts)
        if (cand.name == n) {
          src = &cand;
          break;
        }
      if (!src) throw IoError("checkpoint: missing parameter '" + n + "'");
      if (src->shape != t.shape())
        throw IoError("checkpoint: shape mismatch for '" + n + "'");
      auto& v = t.mutable_value();
      for (size_t i = 0; i < v.size(); ++i) v[i] = S(src->data[i]);
    }
  }

 private:
  uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<S>>> items_;
};

}  // namespace care
