#include <benchmark/benchmark.h>

#include "medblip/data/synthetic.hpp"
#include "medblip/harness/evaluate.hpp"
#include "medblip/harness/model.hpp"
#include "medblip/ndiff/optim.hpp"

namespace nd = medblip::nd;
namespace h = medblip::harness;
namespace data = medblip::data;

namespace {

// One toy-default batch built in memory.
h::Dataset toy_dataset(const h::RunConfig& c, std::size_t n) {
  h::Dataset ds;
  const auto grid = medblip::volume::PatchGrid::make(c.volume_dim, c.patch, c.patch);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = data::generate_sample(data::kLabels[i % 3], i, {c.volume_dim, false});
    s.record.id = "b" + std::to_string(i);
    ds.manifest.records.push_back(s.record);
    auto p = medblip::volume::patchify<float>(s.volume, grid);
    medblip::volume::standardize_patches(p);
    ds.patches.push_back(std::move(p));
    ds.texts.push_back(data::build_texts(s.record));
  }
  return ds;
}

}  // namespace

static void BM_TrainStep(benchmark::State& state) {
  h::RunConfig c;
  c.mode = state.range(0) ? "lora" : "frozen";
  const auto dims = h::model_dims(c);
  auto store = h::init_model<float>(c);
  const auto ds = toy_dataset(c, c.batch_size);
  std::vector<std::size_t> idx(c.batch_size);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = h::make_batch<float>(ds, idx);
  nd::AdamW<float> opt({c.lr, c.beta1, c.beta2, c.eps, c.weight_decay});
  for (auto _ : state) {
    nd::ParamScope<float> scope(store);
    const auto terms = h::compute_losses(scope, dims, c, batch);
    opt.step(store, scope.gradients(terms.total));
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_EvalGenerate(benchmark::State& state) {
  h::RunConfig c;
  const auto store = h::init_model<float>(c);
  const auto ds = toy_dataset(c, 48);
  for (auto _ : state) benchmark::DoNotOptimize(h::eval_zeroshot(store, c, ds, "generate", false).accuracy);
}
BENCHMARK(BM_EvalGenerate)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
