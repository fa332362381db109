#include <benchmark/benchmark.h>

#include <random>

#include "medblip/ndiff/ops.hpp"
#include "medblip/ndiff/param_store.hpp"
#include "medblip/nn/layers.hpp"
#include "medblip/volume/volume.hpp"

namespace nd = medblip::nd;

namespace {

nd::Tensor<float> noise(const nd::Shape& shape, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> n;
  nd::Tensor<float> t(shape);
  for (float& v : t.storage()) v = n(rng);
  return t;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const nd::Var<float> a(noise({n, n}, 1)), b(noise({n, n}, 2));
  for (auto _ : state) benchmark::DoNotOptimize(nd::matmul(a, b).value().data().data());
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

static void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  nd::ParamStore<float> store;
  medblip::nn::init_attention(store, "attn", 64, 1, false);
  const nd::Tensor<float> x = noise({16, len, 64}, 3);
  for (auto _ : state) {
    nd::ParamScope<float> scope(store);
    const nd::Var<float> in(x);
    auto y = medblip::nn::attention(scope, "attn", in, in, {.heads = 4});
    auto g = scope.gradients(nd::sum(y));
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Softmax(benchmark::State& state) {
  const nd::Var<float> x(noise({64, 64, 64}, 4));
  for (auto _ : state) benchmark::DoNotOptimize(nd::softmax(x, 2).value().data().data());
}
BENCHMARK(BM_Softmax);

static void BM_PrepareAndPatchify(benchmark::State& state) {
  const auto dim = static_cast<std::size_t>(state.range(0));
  medblip::volume::Volume raw({dim - dim / 4, dim, dim}, 0.5f);
  const auto grid = medblip::volume::PatchGrid::make(dim, 8, 8);
  for (auto _ : state) {
    auto v = medblip::volume::prepare_volume(raw, static_cast<long>(dim));
    auto p = medblip::volume::patchify<float>(v, grid);
    medblip::volume::standardize_patches(p);
    benchmark::DoNotOptimize(p.data().data());
  }
}
BENCHMARK(BM_PrepareAndPatchify)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);
