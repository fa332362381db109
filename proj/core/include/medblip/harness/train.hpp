#pragma once

#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "medblip/harness/model.hpp"
#include "medblip/ndiff/param_store.hpp"

namespace medblip::harness {

// Append-only JSON-lines log. Opening with truncate starts a fresh file.
class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, bool truncate);
  void log_step(std::size_t step, double fa, double lg, double total);
  void log_eval(const std::string& dataset, const std::string& method, double accuracy, std::size_t correct,
                std::size_t total);
  void log_params(std::size_t total, std::size_t learnable, std::size_t lora_delta,
                  const std::map<std::string, std::size_t>& by_module);

 private:
  void write(const std::string& line);
  std::ofstream out_;
  std::size_t last_step_ = 0;
  bool any_step_ = false;
};

struct StepLosses {
  double fa = 0.0;
  double lg = 0.0;
  double total = 0.0;
};

struct TrainResult {
  nd::ParamStore<float> store;
  std::vector<StepLosses> history;  // losses of each step, before its update
  std::filesystem::path checkpoint;
};

// Runs config.steps optimizer steps over shuffled batches of train_set, then
// writes the checkpoint, its config and the parameter report. If test_set is
// given it is evaluated with config.eval_method and logged.
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset* test_set = nullptr,
                  std::ostream* progress = nullptr);
// Loads the manifests named in the config.
TrainResult train(const RunConfig& config, std::ostream* progress = nullptr);

// Restores the target range of the temperature after an update.
void clamp_temperature(nd::ParamStore<float>& store);

}  // namespace medblip::harness
