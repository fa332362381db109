#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "medblip/harness/model.hpp"

namespace medblip::harness {

struct EvalRecord {
  std::string id;
  data::Label label = data::Label::NC;
  std::string prediction;  // decoded text, or the chosen candidate in rank mode
  std::optional<data::Label> predicted;
  bool correct = false;
  std::array<double, 3> scores{};  // rank mode: candidate log-probabilities
};

struct EvalResult {
  std::string method;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  std::vector<EvalRecord> records;
};

// Exact match of decoded text against the canonical answers; anything else
// counts as wrong.
EvalResult score_generated(const data::Manifest& manifest, const std::vector<std::string>& decoded);
// Argmax over candidates in label order (lowest index on ties). With
// per_token, each score is divided by its candidate length.
EvalResult score_ranked(const data::Manifest& manifest, const std::vector<std::array<double, 3>>& logprobs,
                        const std::array<std::size_t, 3>& candidate_lengths, bool per_token);

EvalResult eval_zeroshot(const nd::ParamStore<float>& store, const RunConfig& config, const Dataset& dataset,
                         const std::string& method, bool per_token);

// Greedy answer for one sample with a caller-supplied question.
std::string generate_answer(const nd::ParamStore<float>& store, const RunConfig& config, const Dataset& dataset,
                            const std::string& sample_id, const std::string& question);

struct ParamReport {
  std::size_t total = 0;
  std::size_t learnable = 0;
  std::size_t lora_delta = 0;
  std::map<std::string, std::size_t> by_module;  // first name component
};

ParamReport count_params(const nd::ParamStore<float>& store);
std::string format_param_report(const ParamReport& report);

}  // namespace medblip::harness
