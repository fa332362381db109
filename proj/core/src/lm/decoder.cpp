#include "medblip/lm/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "medblip/data/special_tokens.hpp"
#include "medblip/ndiff/init.hpp"
#include "medblip/nn/layers.hpp"

namespace medblip::lm {

using nd::Tensor;
using nd::Var;

namespace {

std::string layer_prefix(std::size_t i) { return "lm.layers." + std::to_string(i); }

void validate(const LMConfig& c) {
  if (c.heads == 0 || c.width % c.heads != 0) {
    throw ShapeError("lm width " + std::to_string(c.width) + " not divisible by " + std::to_string(c.heads) +
                     " heads");
  }
  if (c.vocab == 0) throw Error("lm needs a vocabulary size");
}

}  // namespace

template <class T>
void init_lm(nd::ParamStore<T>& store, const LMConfig& c, std::uint64_t seed, bool frozen) {
  validate(c);
  const std::size_t e = c.width;
  // The output head is this table transposed; at the projection init the
  // reachable logit range would be about +-1.3 over the whole vocabulary.
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(e));
  store.add("lm.tok_embed", nd::truncated_normal<T>({c.vocab, e}, embed_std, seed, "lm.tok_embed"), frozen);
  store.add("lm.pos", nd::truncated_normal<T>({c.max_len, e}, nn::kInitStd, seed, "lm.pos"), frozen);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = layer_prefix(i);
    nn::init_layer_norm(store, p + ".ln1", e, frozen);
    nn::init_attention(store, p + ".attn", e, seed, frozen);
    nn::init_layer_norm(store, p + ".ln2", e, frozen);
    nn::init_mlp(store, p + ".mlp", e, e * c.mlp_ratio, seed, frozen);
  }
  nn::init_layer_norm(store, "lm.ln_final", e, frozen);
}

template <class T>
std::vector<std::string> attach_lora(nd::ParamStore<T>& store, const LMConfig& c, const LoraSpec& spec,
                                     std::uint64_t seed) {
  validate(c);
  if (spec.rank == 0) throw Error("attach_lora: rank must be at least 1");
  std::vector<std::string> bases;
  for (const std::string& target : spec.targets) {
    std::string proj = target;
    std::vector<std::size_t> layers;
    if (const auto dot = target.find('.'); dot != std::string::npos) {
      proj = target.substr(dot + 1);
      const std::string idx = target.substr(0, dot);
      if (idx.empty() || !std::all_of(idx.begin(), idx.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) ||
          std::stoul(idx) >= c.layers) {
        throw Error("attach_lora: unknown target '" + target + "'");
      }
      layers.push_back(std::stoul(idx));
    } else {
      for (std::size_t i = 0; i < c.layers; ++i) layers.push_back(i);
    }
    if (proj != "q_proj" && proj != "v_proj") throw Error("attach_lora: unknown target '" + target + "'");
    for (std::size_t i : layers) {
      const std::string weight = layer_prefix(i) + ".attn." + proj + ".weight";
      if (!store.contains(weight)) throw Error("attach_lora: target '" + target + "' has no base weight " + weight);
      const auto& w = store.value(weight);  // (d_in, d_out)
      const std::string base = "lora." + std::to_string(i) + "." + proj;
      store.add(base + ".A", nd::truncated_normal<T>({spec.rank, w.dim(0)}, nn::kInitStd, seed, base + ".A"));
      store.add(base + ".B", Tensor<T>({w.dim(1), spec.rank}));
      bases.push_back(base);
    }
  }
  store.set_frozen_prefix("lm.", true);
  return bases;
}

template <class T>
std::size_t lora_scalars(const nd::ParamStore<T>& store) {
  std::size_t n = 0;
  for (const auto& [name, entry] : store.entries())
    if (name.rfind("lora.", 0) == 0) n += entry.value.numel();
  return n;
}

template <class T>
AssembledInput<T> assemble_input(nd::ParamScope<T>& scope, const LMConfig& c, const Var<T>& prefix,
                                 const std::vector<PromptText>& texts, PromptOrder order) {
  validate(c);
  if (texts.empty()) throw Error("assemble_input: empty batch");
  const Var<T> hv = prefix.rank() == 2 ? nd::reshape(prefix, {1, prefix.dim(0), prefix.dim(1)}) : prefix;
  if (hv.rank() != 3 || hv.dim(0) != texts.size() || hv.dim(2) != c.width) {
    throw ShapeError("assemble_input: prefix " + nd::to_string(prefix.shape()) + " does not match batch " +
                     std::to_string(texts.size()) + " and width " + std::to_string(c.width));
  }
  const std::size_t batch = texts.size(), lv = hv.dim(1);

  // Token rows before and after the prefix block.
  std::vector<std::vector<int>> before(batch), after(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const PromptText& t = texts[b];
    std::vector<int> question{tokens::kQuestion};
    question.insert(question.end(), t.question.begin(), t.question.end());
    std::vector<int>& tail = after[b];
    if (order == PromptOrder::regular) {
      tail = t.description;
      tail.insert(tail.end(), question.begin(), question.end());
    } else {
      before[b] = question;
      tail = t.description;
    }
    tail.push_back(tokens::kAnswer);
  }

  AssembledInput<T> out;
  out.batch = batch;
  out.prefix_offset = before[0].size();
  out.prompt_length = before[0].size() + lv + after[0].size();
  std::size_t longest_answer = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (before[b].size() + lv + after[b].size() != out.prompt_length || before[b].size() != out.prefix_offset) {
      throw ShapeError("assemble_input: prompt lengths differ within the batch");
    }
    longest_answer = std::max(longest_answer, texts[b].answer.size());
  }
  out.length = out.prompt_length + longest_answer;
  if (out.length > c.max_len) {
    throw ShapeError("assemble_input: sequence length " + std::to_string(out.length) + " exceeds max_len " +
                     std::to_string(c.max_len));
  }
  const std::size_t nb = out.prefix_offset, na = out.length - nb - lv;
  std::vector<int> ids_before(batch * nb), ids_after(batch * na, tokens::kPad);
  out.tokens.assign(batch * out.length, tokens::kPad);
  out.answer_mask.assign(batch * out.length, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(before[b].begin(), before[b].end(), ids_before.begin() + b * nb);
    std::vector<int> tail = after[b];
    tail.insert(tail.end(), texts[b].answer.begin(), texts[b].answer.end());
    std::copy(tail.begin(), tail.end(), ids_after.begin() + b * na);
    int* row = out.tokens.data() + b * out.length;
    std::copy(before[b].begin(), before[b].end(), row);
    std::fill(row + nb, row + nb + lv, -1);
    std::copy(tail.begin(), tail.end(), row + nb + lv);
    for (std::size_t i = 0; i < texts[b].answer.size(); ++i) out.answer_mask[b * out.length + out.prompt_length + i] = 1;
    out.answer_length.push_back(texts[b].answer.size());
  }

  const Var<T> table = scope("lm.tok_embed");
  std::vector<Var<T>> parts;
  if (nb > 0) parts.push_back(nd::embedding(table, std::span<const int>(ids_before), {batch, nb}));
  parts.push_back(hv);
  parts.push_back(nd::embedding(table, std::span<const int>(ids_after), {batch, na}));
  Var<T> x = nd::concat(parts, 1);
  out.embeddings = nd::add(x, nd::slice(scope("lm.pos"), 0, 0, out.length));
  return out;
}

template <class T>
Var<T> lm_forward(nd::ParamScope<T>& scope, const LMConfig& c, const Var<T>& embeddings) {
  validate(c);
  if (embeddings.rank() != 3 || embeddings.dim(2) != c.width) {
    throw ShapeError("lm_forward: embeddings " + nd::to_string(embeddings.shape()) + " do not have width " +
                     std::to_string(c.width));
  }
  const std::size_t s = embeddings.dim(1);
  nd::Mask causal{{s, s}, std::vector<std::uint8_t>(s * s, 0)};
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) causal.bits[i * s + j] = 1;

  Var<T> x = embeddings;
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = layer_prefix(i);
    nn::AttentionOptions<T> opts;
    opts.heads = c.heads;
    opts.mask = &causal;
    for (const char* proj : {"q_proj", "v_proj"}) {
      const std::string base = "lora." + std::to_string(i) + "." + proj;
      if (!scope.contains(base + ".A")) continue;
      nn::LowRank<T> update{scope(base + ".A"), scope(base + ".B"), 0.0};
      update.scale = c.lora_alpha / static_cast<double>(update.a.dim(0));
      (proj[0] == 'q' ? opts.q_update : opts.v_update) = update;
    }
    const Var<T> h = nn::layer_norm(scope, p + ".ln1", x);
    x = nd::add(x, nn::attention(scope, p + ".attn", h, h, opts));
    x = nd::add(x, nn::mlp(scope, p + ".mlp", nn::layer_norm(scope, p + ".ln2", x)));
  }
  x = nn::layer_norm(scope, "lm.ln_final", x);
  return nd::matmul(x, nd::transpose(scope("lm.tok_embed")));
}

template <class T>
std::vector<double> log_softmax(std::span<const T> logits) {
  double peak = -INFINITY;
  for (T v : logits) peak = std::max(peak, static_cast<double>(v));
  double total = 0.0;
  for (T v : logits) total += std::exp(static_cast<double>(v) - peak);
  const double lse = peak + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

template <class T>
std::vector<double> answer_logprob(const Tensor<T>& logits, const AssembledInput<T>& input) {
  if (logits.rank() != 3 || logits.dim(0) != input.batch || logits.dim(1) != input.length) {
    throw ShapeError("answer_logprob: logits " + nd::to_string(logits.shape()) + " do not match the input");
  }
  const std::size_t s = input.length, v = logits.dim(2);
  std::vector<double> out(input.batch, 0.0);
  for (std::size_t b = 0; b < input.batch; ++b) {
    bool any = false;
    for (std::size_t i = 1; i < s; ++i) {
      if (!input.answer_mask[b * s + i]) continue;
      any = true;
      const T* row = logits.data().data() + (b * s + i - 1) * v;
      const auto lp = log_softmax(std::span<const T>(row, v));
      out[b] += lp[static_cast<std::size_t>(input.tokens[b * s + i])];
    }
    if (!any) throw Error("answer_logprob: sample " + std::to_string(b) + " has no answer positions");
  }
  return out;
}

template <class T>
Var<T> language_generation_loss(const Var<T>& logits, const AssembledInput<T>& input) {
  if (logits.rank() != 3 || logits.dim(0) != input.batch || logits.dim(1) != input.length) {
    throw ShapeError("language_generation_loss: logits " + nd::to_string(logits.shape()) +
                     " do not match the input");
  }
  const std::size_t s = input.length, rows = input.batch * s;
  std::vector<int> targets(rows, 0);
  std::vector<std::uint8_t> mask(rows, 0);
  bool any = false;
  for (std::size_t b = 0; b < input.batch; ++b)
    for (std::size_t i = 1; i < s; ++i)
      if (input.answer_mask[b * s + i]) {
        targets[b * s + i - 1] = input.tokens[b * s + i];
        mask[b * s + i - 1] = 1;
        any = true;
      }
  if (!any) throw Error("language_generation_loss: no answer positions");
  return nd::cross_entropy(nd::reshape(logits, {rows, logits.dim(2)}), std::span<const int>(targets),
                           std::span<const std::uint8_t>(mask));
}

std::vector<std::vector<int>> greedy_decode(const NextLogits& next, std::size_t batch, std::size_t max_new,
                                            int eos) {
  if (max_new == 0) throw Error("greedy_decode: max_new must be at least 1");
  std::vector<std::vector<int>> out(batch);
  std::vector<bool> done(batch, false);
  for (std::size_t step = 0; step < max_new; ++step) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    const auto logits = next(out);
    if (logits.size() != batch) throw ShapeError("greedy_decode: next-token logits do not cover the batch");
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const auto& row = logits[b];
      const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == eos) {
        done[b] = true;
      } else {
        out[b].push_back(best);
      }
    }
  }
  return out;
}

template <class T>
std::vector<std::vector<int>> greedy_decode(nd::ParamScope<T>& scope, const LMConfig& c, const Var<T>& prefix,
                                            const std::vector<PromptText>& texts, PromptOrder order,
                                            std::size_t max_new) {
  NextLogits next = [&](const std::vector<std::vector<int>>& generated) {
    std::vector<PromptText> step = texts;
    for (std::size_t b = 0; b < step.size(); ++b) step[b].answer = generated[b];
    const AssembledInput<T> in = assemble_input(scope, c, prefix, step, order);
    const Tensor<T> logits = lm_forward(scope, c, in.embeddings).value();
    const std::size_t v = logits.dim(2);
    std::vector<std::vector<double>> rows(step.size());
    for (std::size_t b = 0; b < step.size(); ++b) {
      const T* row = logits.data().data() + (b * in.length + in.prompt_length + generated[b].size() - 1) * v;
      rows[b].assign(row, row + v);
    }
    return rows;
  };
  return greedy_decode(next, texts.size(), max_new, tokens::kEos);
}

#define MEDBLIP_INSTANTIATE_LM(T)                                                                               \
  template void init_lm(nd::ParamStore<T>&, const LMConfig&, std::uint64_t, bool);                              \
  template std::vector<std::string> attach_lora(nd::ParamStore<T>&, const LMConfig&, const LoraSpec&,           \
                                                std::uint64_t);                                                 \
  template std::size_t lora_scalars(const nd::ParamStore<T>&);                                                  \
  template AssembledInput<T> assemble_input(nd::ParamScope<T>&, const LMConfig&, const Var<T>&,                 \
                                            const std::vector<PromptText>&, PromptOrder);                       \
  template Var<T> lm_forward(nd::ParamScope<T>&, const LMConfig&, const Var<T>&);                               \
  template std::vector<double> log_softmax(std::span<const T>);                                                 \
  template std::vector<double> answer_logprob(const Tensor<T>&, const AssembledInput<T>&);                      \
  template Var<T> language_generation_loss(const Var<T>&, const AssembledInput<T>&);                            \
  template std::vector<std::vector<int>> greedy_decode(nd::ParamScope<T>&, const LMConfig&, const Var<T>&,      \
                                                       const std::vector<PromptText>&, PromptOrder, std::size_t);

MEDBLIP_INSTANTIATE_LM(float)
MEDBLIP_INSTANTIATE_LM(double)

}  // namespace medblip::lm
