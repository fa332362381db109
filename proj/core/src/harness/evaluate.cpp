#include "medblip/harness/evaluate.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "medblip/lm/decoder.hpp"
#include "medblip/qformer/qformer.hpp"

namespace medblip::harness {

namespace {

std::optional<data::Label> match_answer(const std::string& text) {
  for (data::Label l : data::kLabels)
    if (text == data::canonical_answer(l)) return l;
  return std::nullopt;
}

EvalResult finish(EvalResult r) {
  r.total = r.records.size();
  r.correct = static_cast<std::size_t>(
      std::count_if(r.records.begin(), r.records.end(), [](const EvalRecord& e) { return e.correct; }));
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

void require_samples(const data::Manifest& m, std::size_t n) {
  if (m.records.empty()) throw Error("evaluation on an empty manifest");
  if (n != m.records.size()) throw Error("evaluation: predictions do not cover the manifest");
}

std::vector<std::vector<std::size_t>> chunks(std::size_t n, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += size) {
    std::vector<std::size_t> c(std::min(size, n - start));
    std::iota(c.begin(), c.end(), start);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

EvalResult score_generated(const data::Manifest& manifest, const std::vector<std::string>& decoded) {
  require_samples(manifest, decoded.size());
  EvalResult r;
  r.method = "generate";
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    EvalRecord e;
    e.id = manifest.records[i].id;
    e.label = manifest.records[i].label;
    e.prediction = decoded[i];
    e.predicted = match_answer(decoded[i]);
    e.correct = e.predicted && *e.predicted == e.label;
    r.records.push_back(std::move(e));
  }
  return finish(std::move(r));
}

EvalResult score_ranked(const data::Manifest& manifest, const std::vector<std::array<double, 3>>& logprobs,
                        const std::array<std::size_t, 3>& candidate_lengths, bool per_token) {
  require_samples(manifest, logprobs.size());
  EvalResult r;
  r.method = per_token ? "rank-per-token" : "rank";
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    EvalRecord e;
    e.id = manifest.records[i].id;
    e.label = manifest.records[i].label;
    for (std::size_t c = 0; c < 3; ++c)
      e.scores[c] = per_token ? logprobs[i][c] / static_cast<double>(candidate_lengths[c]) : logprobs[i][c];
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c)
      if (e.scores[c] > e.scores[best]) best = c;
    e.predicted = data::kLabels[best];
    e.prediction = std::string(data::canonical_answer(*e.predicted));
    e.correct = *e.predicted == e.label;
    r.records.push_back(std::move(e));
  }
  return finish(std::move(r));
}

EvalResult eval_zeroshot(const nd::ParamStore<float>& store, const RunConfig& config, const Dataset& dataset,
                         const std::string& method, bool per_token) {
  if (dataset.manifest.records.empty()) throw Error("evaluation on an empty manifest");
  if (method != "generate" && method != "rank") throw Error("unknown evaluation method '" + method + "'");
  const ModelDims dims = model_dims(config);
  const auto& vocab = data::Vocabulary::standard();
  std::vector<std::string> decoded(dataset.patches.size());
  std::vector<std::array<double, 3>> logprobs(dataset.patches.size());
  std::array<std::vector<int>, 3> candidates;
  std::array<std::size_t, 3> lengths{};
  for (std::size_t c = 0; c < 3; ++c) {
    candidates[c] = vocab.tokenize(data::canonical_answer(data::kLabels[c]));
    candidates[c].push_back(tokens::kEos);
    lengths[c] = candidates[c].size();
  }

  for (const auto& idx : chunks(dataset.patches.size(), config.batch_size)) {
    const Batch<float> batch = make_batch<float>(dataset, idx);
    nd::ParamScope<float> scope(store, /*inference=*/true);
    const nd::Var<float> prefix = qformer::project_prefix(scope, image_queries(scope, dims, batch.patches));
    std::vector<lm::PromptText> prompts;
    for (const auto& t : batch.texts) prompts.push_back(prompt_text(t, false));
    if (method == "generate") {
      const auto out = lm::greedy_decode(scope, dims.lm, prefix, prompts, dims.order, config.max_new_tokens);
      for (std::size_t b = 0; b < idx.size(); ++b) decoded[idx[b]] = vocab.detokenize(out[b]);
    } else {
      for (std::size_t c = 0; c < 3; ++c) {
        for (auto& p : prompts) p.answer = candidates[c];
        const auto input = lm::assemble_input(scope, dims.lm, prefix, prompts, dims.order);
        const auto lp = lm::answer_logprob(lm::lm_forward(scope, dims.lm, input.embeddings).value(), input);
        for (std::size_t b = 0; b < idx.size(); ++b) logprobs[idx[b]][c] = lp[b];
      }
    }
  }
  return method == "generate" ? score_generated(dataset.manifest, decoded)
                              : score_ranked(dataset.manifest, logprobs, lengths, per_token);
}

std::string generate_answer(const nd::ParamStore<float>& store, const RunConfig& config, const Dataset& dataset,
                            const std::string& sample_id, const std::string& question) {
  const auto& vocab = data::Vocabulary::standard();
  const std::vector<int> q = vocab.tokenize(question);
  if (q.empty()) throw Error("generate: empty question");
  const auto& records = dataset.manifest.records;
  const auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.id == sample_id; });
  if (it == records.end()) throw Error("generate: sample '" + sample_id + "' not in manifest");
  const std::size_t index = static_cast<std::size_t>(it - records.begin());

  const ModelDims dims = model_dims(config);
  const Batch<float> batch = make_batch<float>(dataset, {index});
  nd::ParamScope<float> scope(store, /*inference=*/true);
  const nd::Var<float> prefix = qformer::project_prefix(scope, image_queries(scope, dims, batch.patches));
  lm::PromptText prompt{batch.texts[0].description, q, {}};
  const auto out = lm::greedy_decode(scope, dims.lm, prefix, {prompt}, dims.order, config.max_new_tokens);
  return vocab.detokenize(out[0]);
}

ParamReport count_params(const nd::ParamStore<float>& store) {
  ParamReport r;
  r.total = store.total_scalars();
  r.learnable = store.learnable_scalars();
  r.lora_delta = lm::lora_scalars(store);
  for (const auto& [name, e] : store.entries()) r.by_module[name.substr(0, name.find('.'))] += e.value.numel();
  return r;
}

std::string format_param_report(const ParamReport& r) {
  std::ostringstream out;
  out << "total      " << r.total << '\n' << "learnable  " << r.learnable << '\n' << "lora-delta " << r.lora_delta << '\n';
  for (const auto& [module, n] : r.by_module) out << "  " << module << ' ' << n << '\n';
  return out.str();
}

}  // namespace medblip::harness
