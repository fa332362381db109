#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "medblip/ndiff/param_store.hpp"

namespace medblip::nd {

struct AdamWConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adaptive-moment optimizer with decoupled weight decay:
//   p <- p - lr * wd * p
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// Moments are created lazily, one per learnable entry, in name order.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // grads must name exactly the non-frozen entries of store. A gradient for a
  // frozen entry raises FreezeError; a missing or extra one raises Error.
  void step(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads);

  const AdamWConfig& config() const { return config_; }
  std::uint64_t steps() const { return step_; }
  const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, Tensor<T>> m_;
  std::map<std::string, Tensor<T>> v_;
};

}  // namespace medblip::nd
