#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "medblip/data/synthetic.hpp"
#include "medblip/harness/config.hpp"
#include "medblip/lm/decoder.hpp"
#include "medblip/qformer/qformer.hpp"
#include "medblip/vision/frozen_encoder.hpp"
#include "medblip/volume/embed.hpp"

namespace medblip::harness {

struct ModelDims {
  volume::EmbedConfig embed;
  vision::VisionEncoderConfig vision;
  qformer::QFormerConfig qformer;
  lm::LMConfig lm;
  lm::LoraSpec lora;
  bool lora_mode = false;
  lm::PromptOrder order = lm::PromptOrder::regular;
};

ModelDims model_dims(const RunConfig& config);

// Fresh parameters: embed, vision (frozen), qformer, prefix and LM; the LM is
// frozen, and in lora mode adapters are attached.
template <class T>
nd::ParamStore<T> init_model(const RunConfig& config);

// Volumes prepared, patchified and tokenized once.
struct Dataset {
  data::Manifest manifest;
  std::vector<nd::Tensor<float>> patches;  // (N_v, p^3) per sample
  std::vector<data::TextTokens> texts;
};

Dataset load_dataset(const std::filesystem::path& manifest_path, const RunConfig& config);

template <class T>
struct Batch {
  nd::Tensor<T> patches;  // (B, N_v, p^3)
  std::vector<data::TextTokens> texts;
  std::vector<data::Label> labels;
};

template <class T>
Batch<T> make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);

// Image path: embed -> frozen encoder -> MedQFormer, giving (B, L, d_e).
template <class T>
nd::Var<T> image_queries(nd::ParamScope<T>& scope, const ModelDims& dims, const nd::Tensor<T>& patches);

template <class T>
struct LossTerms {
  nd::Var<T> fa;
  nd::Var<T> lg;
  nd::Var<T> total;
};

// Text encoder inputs: BOS + T, and BOS + Q + A.
std::vector<int> description_text(const data::TextTokens& t);
std::vector<int> qa_text(const data::TextTokens& t);
// LM prompt pieces with the answer followed by EOS (empty answer when
// with_answer is false).
lm::PromptText prompt_text(const data::TextTokens& t, bool with_answer);

template <class T>
LossTerms<T> compute_losses(nd::ParamScope<T>& scope, const ModelDims& dims, const RunConfig& config,
                            const Batch<T>& batch);

}  // namespace medblip::harness
