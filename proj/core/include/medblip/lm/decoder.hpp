#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "medblip/ndiff/param_store.hpp"

// Causal decoder stand-in. Parameters: "lm.tok_embed" (V, e) doubling as the
// tied output head, "lm.pos" (max_len, e), "lm.layers.<i>.{ln1,attn,ln2,mlp}"
// (pre-norm) and "lm.ln_final". Adapters live under
// "lora.<i>.{q_proj,v_proj}.{A,B}".
namespace medblip::lm {

struct LMConfig {
  std::size_t vocab = 0;
  std::size_t width = 64;  // e
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_len = 64;
  double lora_alpha = 8.0;
};

template <class T>
void init_lm(nd::ParamStore<T>& store, const LMConfig& config, std::uint64_t seed, bool frozen);

struct LoraSpec {
  // "q_proj" / "v_proj" target that projection in every layer; "<i>.q_proj"
  // targets a single layer.
  std::vector<std::string> targets{"q_proj", "v_proj"};
  std::size_t rank = 4;
};

// Freezes every "lm." entry and registers A (r, d_in) ~ N(0, 0.02) and
// B (d_out, r) = 0 per resolved target. Returns the adapter base names
// ("lora.<i>.<proj>").
template <class T>
std::vector<std::string> attach_lora(nd::ParamStore<T>& store, const LMConfig& config, const LoraSpec& spec,
                                     std::uint64_t seed);

// Scalar count of every "lora." entry.
template <class T>
std::size_t lora_scalars(const nd::ParamStore<T>& store);

enum class PromptOrder { regular, alternative };

struct PromptText {
  std::vector<int> description;  // T
  std::vector<int> question;     // Q without the "question:" marker
  std::vector<int> answer;       // A, may be empty at inference
};

// Embedded prompt batch (B, S, e). Regular order is
// [H_v; T; question: Q; answer:; A], alternative is
// [question: Q; H_v; T; answer:; A]. Rows past a sample's answer are PAD.
template <class T>
struct AssembledInput {
  nd::Var<T> embeddings;
  std::size_t batch = 0;
  std::size_t length = 0;         // S
  std::size_t prompt_length = 0;  // rows before the answer, equal across the batch
  std::size_t prefix_offset = 0;  // first H_v row
  std::vector<int> tokens;        // (B*S) ids; -1 on H_v rows, PAD past the end
  std::vector<std::uint8_t> answer_mask;  // (B*S), true exactly on A rows
  std::vector<std::size_t> answer_length;
};

// prefix is (B, L, e) or (L, e) for a single sample. Throws if prompt lengths
// differ across the batch or a sequence exceeds max_len.
template <class T>
AssembledInput<T> assemble_input(nd::ParamScope<T>& scope, const LMConfig& config, const nd::Var<T>& prefix,
                                 const std::vector<PromptText>& texts, PromptOrder order);

// embeddings (B, S, e) -> logits (B, S, V), causal.
template <class T>
nd::Var<T> lm_forward(nd::ParamScope<T>& scope, const LMConfig& config, const nd::Var<T>& embeddings);

// Row-wise log-softmax evaluated in double.
template <class T>
std::vector<double> log_softmax(std::span<const T> logits);

// Per sample, sum over answer rows i of log softmax(logits[i-1])[token i].
// Throws if a sample has no answer rows.
template <class T>
std::vector<double> answer_logprob(const nd::Tensor<T>& logits, const AssembledInput<T>& input);

// Mean over every answer row of the batch of -log softmax(logits[i-1])[token i].
template <class T>
nd::Var<T> language_generation_loss(const nd::Var<T>& logits, const AssembledInput<T>& input);

// Next-token logits for each still-running sample given its tokens so far.
using NextLogits = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>& generated)>;

// Appends the argmax (lowest id on ties) until EOS or max_new tokens. EOS is
// not included in the output.
std::vector<std::vector<int>> greedy_decode(const NextLogits& next, std::size_t batch, std::size_t max_new,
                                            int eos);

// Model-bound decode: texts carry empty answers.
template <class T>
std::vector<std::vector<int>> greedy_decode(nd::ParamScope<T>& scope, const LMConfig& config,
                                            const nd::Var<T>& prefix, const std::vector<PromptText>& texts,
                                            PromptOrder order, std::size_t max_new);

}  // namespace medblip::lm
