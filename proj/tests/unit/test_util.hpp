#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "medblip/ndiff/ops.hpp"

namespace medblip::test {

inline nd::Tensor<double> random_tensor(const nd::Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed * 7919 + 17);
  std::normal_distribution<double> dist(0.0, scale);
  nd::Tensor<double> t(shape);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

// sum(y * R) for a fixed random R, so every output element reaches the loss
// with a distinct weight.
template <class T>
nd::Var<T> probe(const nd::Var<T>& y, std::uint64_t seed) {
  nd::Tensor<T> r = random_tensor(y.shape(), seed + 5000).template cast<T>();
  return nd::sum(nd::mul(y, nd::Var<T>(std::move(r))));
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("medblip-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace medblip::test
