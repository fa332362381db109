#include "medblip/ndiff/init.hpp"

#include <cmath>
#include <vector>

namespace medblip::nd {

std::mt19937_64 keyed_rng(std::uint64_t seed, std::string_view name) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (char c : name) words.push_back(static_cast<unsigned char>(c));
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

template <class T>
Tensor<T> truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> out(shape);
  for (T& v : out.storage()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<T>(z * stddev);
  }
  return out;
}

template Tensor<float> truncated_normal(const Shape&, double, std::mt19937_64&);
template Tensor<double> truncated_normal(const Shape&, double, std::mt19937_64&);

}  // namespace medblip::nd
