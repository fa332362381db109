#include "medblip/harness/model.hpp"

#include <sstream>

#include "medblip/losses/objectives.hpp"
#include "medblip/ndiff/ops.hpp"

namespace medblip::harness {

using nd::Var;

ModelDims model_dims(const RunConfig& c) {
  c.validate();
  ModelDims d;
  d.embed = {c.volume_dim, c.patch, c.vision_width, c.aggregate};
  d.vision = {c.vision_layers, c.vision_heads, c.vision_width, c.mlp_ratio, c.vision_seed};
  d.qformer.queries = c.queries;
  d.qformer.width = c.qformer_width;
  d.qformer.layers = c.qformer_layers;
  d.qformer.heads = c.qformer_heads;
  d.qformer.mlp_ratio = c.mlp_ratio;
  d.qformer.vision_width = c.vision_width;
  d.qformer.text_layers = c.text_layers;
  d.qformer.vocab = data::Vocabulary::standard().size();
  d.qformer.max_text_len = c.max_text_len;
  d.qformer.prefix_width = c.lm_width;
  d.qformer.init_tau = c.init_tau;
  d.lm = {data::Vocabulary::standard().size(), c.lm_width, c.lm_layers, c.lm_heads, c.mlp_ratio, c.max_len,
          c.lora_alpha};
  d.lora.rank = c.lora_rank;
  d.lora.targets.clear();
  std::istringstream targets(c.lora_targets);
  for (std::string t; std::getline(targets, t, ',');)
    if (!t.empty()) d.lora.targets.push_back(t);
  d.lora_mode = c.mode == "lora";
  d.order = c.prompt_order == "regular" ? lm::PromptOrder::regular : lm::PromptOrder::alternative;
  return d;
}

template <class T>
nd::ParamStore<T> init_model(const RunConfig& config) {
  const ModelDims d = model_dims(config);
  nd::ParamStore<T> store(config.seed);
  volume::init_embed(store, d.embed, config.seed);
  vision::init_frozen(store, d.vision);
  qformer::init_qformer(store, d.qformer, config.seed);
  lm::init_lm(store, d.lm, config.seed, /*frozen=*/true);
  if (d.lora_mode) lm::attach_lora(store, d.lm, d.lora, config.seed);
  return store;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, const RunConfig& config) {
  Dataset ds;
  ds.manifest = data::read_manifest(manifest_path);
  if (ds.manifest.records.empty()) throw Error("manifest " + manifest_path.string() + " has no samples");
  const auto grid = volume::PatchGrid::make(config.volume_dim, config.patch, config.patch);
  for (const auto& r : ds.manifest.records) {
    const auto raw = volume::read_volume(data::resolve_volume(manifest_path, r));
    auto patches = volume::patchify<float>(volume::prepare_volume(raw, static_cast<long>(config.volume_dim)), grid);
    volume::standardize_patches(patches);
    ds.patches.push_back(std::move(patches));
    ds.texts.push_back(data::build_texts(r));
  }
  return ds;
}

template <class T>
Batch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error("make_batch: empty batch");
  const auto& first = ds.patches.at(indices[0]);
  const std::size_t n = first.dim(0), p3 = first.dim(1);
  Batch<T> b;
  b.patches = nd::Tensor<T>({indices.size(), n, p3});
  T* dst = b.patches.data().data();
  for (std::size_t i : indices) {
    for (float v : ds.patches.at(i).data()) *dst++ = static_cast<T>(v);
    b.texts.push_back(ds.texts[i]);
    b.labels.push_back(ds.manifest.records[i].label);
  }
  return b;
}

template <class T>
Var<T> image_queries(nd::ParamScope<T>& scope, const ModelDims& dims, const nd::Tensor<T>& patches) {
  const Var<T> tokens = volume::embed_tokens(scope, dims.embed, Var<T>(patches));
  const Var<T> feats = vision::encode_image(scope, dims.vision, tokens);
  return qformer::qformer_encode_image(scope, dims.qformer, feats);
}

std::vector<int> description_text(const data::TextTokens& t) {
  std::vector<int> out{tokens::kBos};
  out.insert(out.end(), t.description.begin(), t.description.end());
  return out;
}

std::vector<int> qa_text(const data::TextTokens& t) {
  std::vector<int> out{tokens::kBos};
  out.insert(out.end(), t.question.begin(), t.question.end());
  out.insert(out.end(), t.answer.begin(), t.answer.end());
  return out;
}

lm::PromptText prompt_text(const data::TextTokens& t, bool with_answer) {
  lm::PromptText p{t.description, t.question, {}};
  if (with_answer) {
    p.answer = t.answer;
    p.answer.push_back(tokens::kEos);
  }
  return p;
}

template <class T>
LossTerms<T> compute_losses(nd::ParamScope<T>& scope, const ModelDims& dims, const RunConfig& config,
                            const Batch<T>& batch) {
  const Var<T> z = image_queries(scope, dims, batch.patches);
  std::vector<std::vector<int>> desc, qa;
  std::vector<lm::PromptText> prompts;
  for (const auto& t : batch.texts) {
    desc.push_back(description_text(t));
    qa.push_back(qa_text(t));
    prompts.push_back(prompt_text(t, true));
  }
  const Var<T> log_tau = scope("qformer.log_tau");
  const Var<T> desc_pooled = qformer::text_encode(scope, dims.qformer, desc).pooled;
  const Var<T> qa_pooled = config.qa_term ? qformer::text_encode(scope, dims.qformer, qa).pooled : Var<T>();
  LossTerms<T> out;
  out.fa = losses::feature_alignment_loss(z, desc_pooled, qa_pooled, log_tau, config.qa_term);

  const Var<T> prefix = qformer::project_prefix(scope, z);
  const auto input = lm::assemble_input(scope, dims.lm, prefix, prompts, dims.order);
  const Var<T> logits = lm::lm_forward(scope, dims.lm, input.embeddings);
  out.lg = lm::language_generation_loss(logits, input);
  out.total = losses::total_loss(out.fa, out.lg, config.lambda_lg);
  return out;
}

#define MEDBLIP_INSTANTIATE_MODEL(T)                                                                    \
  template nd::ParamStore<T> init_model(const RunConfig&);                                              \
  template Batch<T> make_batch(const Dataset&, const std::vector<std::size_t>&);                        \
  template Var<T> image_queries(nd::ParamScope<T>&, const ModelDims&, const nd::Tensor<T>&);            \
  template LossTerms<T> compute_losses(nd::ParamScope<T>&, const ModelDims&, const RunConfig&, const Batch<T>&);

MEDBLIP_INSTANTIATE_MODEL(float)
MEDBLIP_INSTANTIATE_MODEL(double)

}  // namespace medblip::harness
