#pragma once

#include <cstdint>
#include <vector>

#include "medblip/ndiff/param_store.hpp"

// MedQFormer bridge. Two streams that share no attention state:
//   image stream  "qformer.queries" (L, d_e) refined by "qformer.layers.<i>"
//                 (self_attn, ln_self, cross_attn, ln_cross, mlp, ln_mlp);
//   text stream   "qformer.text.{tok_embed,pos}" and "qformer.text.layers.<i>"
//                 (self_attn, ln_self, mlp, ln_mlp).
// Blocks are post-norm, so a zero-layer stack is the identity. The contrastive
// temperature lives here as "qformer.log_tau"; the prefix projection is
// "prefix.proj.weight" (d_e, e).
namespace medblip::qformer {

struct QFormerConfig {
  std::size_t queries = 32;  // L
  std::size_t width = 768;   // d_e
  std::size_t layers = 12;   // N, image stream
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vision_width = 768;  // d_vis; an input projection is added when it differs
  std::size_t text_layers = 12;
  std::size_t vocab = 0;
  std::size_t max_text_len = 64;
  std::size_t prefix_width = 768;  // e
  double init_tau = 0.07;
};

template <class T>
void init_qformer(nd::ParamStore<T>& store, const QFormerConfig& config, std::uint64_t seed);

// feats (N, d_vis) or (B, N, d_vis) -> (L, d_e) or (B, L, d_e).
template <class T>
nd::Var<T> qformer_encode_image(nd::ParamScope<T>& scope, const QFormerConfig& config, const nd::Var<T>& feats);

template <class T>
struct TextEmbedding {
  nd::Var<T> sequence;  // (B, n, d_e)
  nd::Var<T> pooled;    // (B, d_e), first position of the last layer
};

// Token id rows of possibly different lengths, padded at the end with PAD
// (id 0) and masked out as attention keys. Every row must be non-empty.
template <class T>
TextEmbedding<T> text_encode(nd::ParamScope<T>& scope, const QFormerConfig& config,
                                 const std::vector<std::vector<int>>& tokens);

// H_v = z W, z (..., L, d_e) -> (..., L, e).
template <class T>
nd::Var<T> project_prefix(const nd::Var<T>& z, const nd::Var<T>& w);
template <class T>
nd::Var<T> project_prefix(nd::ParamScope<T>& scope, const nd::Var<T>& z);

}  // namespace medblip::qformer
