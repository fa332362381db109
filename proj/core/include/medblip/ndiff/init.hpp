#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "medblip/ndiff/tensor.hpp"

namespace medblip::nd {

// Generator keyed by (seed, name) so that each tensor's initial values do not
// depend on which other tensors were created before it.
std::mt19937_64 keyed_rng(std::uint64_t seed, std::string_view name);

// Normal(0, stddev) resampled until within two standard deviations.
template <class T>
Tensor<T> truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng);

template <class T>
Tensor<T> truncated_normal(const Shape& shape, double stddev, std::uint64_t seed, std::string_view name) {
  auto rng = keyed_rng(seed, name);
  return truncated_normal<T>(shape, stddev, rng);
}

}  // namespace medblip::nd
