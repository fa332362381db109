#include "medblip/harness/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "medblip/harness/evaluate.hpp"
#include "medblip/ndiff/checkpoint.hpp"
#include "medblip/ndiff/init.hpp"
#include "medblip/ndiff/optim.hpp"

namespace medblip::harness {

using json = nlohmann::ordered_json;

MetricsLog::MetricsLog(const std::filesystem::path& path, bool truncate)
    : out_(path, truncate ? std::ios::trunc : std::ios::app) {
  if (!out_) throw Error("cannot open metrics log " + path.string());
}

void MetricsLog::write(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
}

void MetricsLog::log_step(std::size_t step, double fa, double lg, double total) {
  if (any_step_ && step <= last_step_) throw Error("metrics log: step index must increase");
  any_step_ = true;
  last_step_ = step;
  json j;
  j["event"] = "step";
  j["step"] = step;
  j["l_fa"] = fa;
  j["l_lg"] = lg;
  j["l_total"] = total;
  write(j.dump());
}

void MetricsLog::log_eval(const std::string& dataset, const std::string& method, double accuracy,
                          std::size_t correct, std::size_t total) {
  json j;
  j["event"] = "eval";
  j["dataset"] = dataset;
  j["method"] = method;
  j["accuracy"] = accuracy;
  j["correct"] = correct;
  j["total"] = total;
  write(j.dump());
}

void MetricsLog::log_params(std::size_t total, std::size_t learnable, std::size_t lora_delta,
                            const std::map<std::string, std::size_t>& by_module) {
  json j;
  j["event"] = "params";
  j["total"] = total;
  j["learnable"] = learnable;
  j["lora_delta"] = lora_delta;
  j["by_module"] = by_module;
  write(j.dump());
}

void clamp_temperature(nd::ParamStore<float>& store) {
  if (!store.contains("qformer.log_tau")) return;
  auto t = store.value("qformer.log_tau");
  t[0] = std::clamp(t[0], static_cast<float>(std::log(0.01)), 0.0f);
  store.assign("qformer.log_tau", t);
}

namespace {

// Endless shuffled pass over sample indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(n), batch_(std::min(batch, n)), rng_(nd::keyed_rng(seed, "batches")) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset* test_set, std::ostream* progress) {
  const ModelDims dims = model_dims(config);
  std::filesystem::create_directories(config.output_dir);
  MetricsLog log(config.metrics_path(), /*truncate=*/true);

  TrainResult result{init_model<float>(config), {}, config.checkpoint_path()};
  nd::ParamStore<float>& store = result.store;
  nd::AdamW<float> optimizer({config.lr, config.beta1, config.beta2, config.eps, config.weight_decay});
  BatchSampler sampler(train_set.patches.size(), config.batch_size, config.seed);

  for (std::size_t step = 0; step < config.steps; ++step) {
    store.set_frozen_prefix("lm.", step >= config.lm_warmup_steps);
    const Batch<float> batch = make_batch<float>(train_set, sampler.next());
    StepLosses losses;
    try {
      nd::ParamScope<float> scope(store);
      const LossTerms<float> terms = compute_losses(scope, dims, config, batch);
      losses = {terms.fa.value().item(), terms.lg.value().item(), terms.total.value().item()};
      if (!std::isfinite(losses.total)) throw NumericError("non-finite loss");
      optimizer.step(store, scope.gradients(terms.total));
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
    } catch (const FreezeError& e) {
      throw FreezeError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    clamp_temperature(store);
    result.history.push_back(losses);
    log.log_step(step, losses.fa, losses.lg, losses.total);
    if (progress && (step % 50 == 0 || step + 1 == config.steps)) {
      *progress << "step " << step << "  L_FA " << losses.fa << "  L_LG " << losses.lg << "  L_total "
                << losses.total << '\n';
    }
  }
  store.set_frozen_prefix("lm.", true);

  nd::save_checkpoint(store, result.checkpoint);
  save_config(config, config_path_for(result.checkpoint));
  const ParamReport report = count_params(store);
  log.log_params(report.total, report.learnable, report.lora_delta, report.by_module);
  if (test_set) {
    const EvalResult ev = eval_zeroshot(store, config, *test_set, config.eval_method, config.rank_per_token);
    log.log_eval(test_set->manifest.name + "/" + test_set->manifest.split, ev.method, ev.accuracy, ev.correct,
                 ev.total);
    if (progress) *progress << "eval " << ev.method << " accuracy " << ev.accuracy << '\n';
  }
  return result;
}

TrainResult train(const RunConfig& config, std::ostream* progress) {
  if (config.train_manifest.empty()) throw Error("train: config has no train_manifest");
  const Dataset train_set = load_dataset(config.train_manifest, config);
  if (config.test_manifest.empty()) return train(config, train_set, nullptr, progress);
  const Dataset test_set = load_dataset(config.test_manifest, config);
  return train(config, train_set, &test_set, progress);
}

}  // namespace medblip::harness
