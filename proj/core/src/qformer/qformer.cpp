#include "medblip/qformer/qformer.hpp"

#include <algorithm>
#include <cmath>

#include "medblip/ndiff/init.hpp"
#include "medblip/nn/layers.hpp"

namespace medblip::qformer {

using nd::Var;

namespace {

std::string image_layer(std::size_t i) { return "qformer.layers." + std::to_string(i); }
std::string text_layer(std::size_t i) { return "qformer.text.layers." + std::to_string(i); }

void validate(const QFormerConfig& c) {
  if (c.heads == 0 || c.width % c.heads != 0) {
    throw ShapeError("qformer width " + std::to_string(c.width) + " not divisible by " + std::to_string(c.heads) +
                     " heads");
  }
  if (c.queries == 0) throw Error("qformer needs at least one query");
}

}  // namespace

template <class T>
void init_qformer(nd::ParamStore<T>& store, const QFormerConfig& c, std::uint64_t seed) {
  validate(c);
  const std::size_t d = c.width;
  // Zero queries: at init the query stream carries only what cross-attention
  // reads from the volume, so the first LayerNorm does not wash it out.
  store.add("qformer.queries", nd::Tensor<T>({c.queries, d}, T(0)));
  if (c.vision_width != d) nn::init_linear(store, "qformer.in_proj", c.vision_width, d, seed, false);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = image_layer(i);
    nn::init_attention(store, p + ".self_attn", d, seed, false);
    nn::init_layer_norm(store, p + ".ln_self", d, false);
    nn::init_attention(store, p + ".cross_attn", d, seed, false);
    nn::init_layer_norm(store, p + ".ln_cross", d, false);
    nn::init_mlp(store, p + ".mlp", d, d * c.mlp_ratio, seed, false);
    nn::init_layer_norm(store, p + ".ln_mlp", d, false);
  }
  if (c.vocab == 0) throw Error("qformer text stream needs a vocabulary size");
  store.add("qformer.text.tok_embed",
            nd::truncated_normal<T>({c.vocab, d}, nn::kInitStd, seed, "qformer.text.tok_embed"));
  store.add("qformer.text.pos", nd::truncated_normal<T>({c.max_text_len, d}, nn::kInitStd, seed, "qformer.text.pos"));
  for (std::size_t i = 0; i < c.text_layers; ++i) {
    const std::string p = text_layer(i);
    nn::init_attention(store, p + ".self_attn", d, seed, false);
    nn::init_layer_norm(store, p + ".ln_self", d, false);
    nn::init_mlp(store, p + ".mlp", d, d * c.mlp_ratio, seed, false);
    nn::init_layer_norm(store, p + ".ln_mlp", d, false);
  }
  store.add("qformer.log_tau", nd::Tensor<T>({}, static_cast<T>(std::log(c.init_tau))));
  nn::init_linear(store, "prefix.proj", d, c.prefix_width, seed, false, /*bias=*/false);
}

template <class T>
Var<T> qformer_encode_image(nd::ParamScope<T>& scope, const QFormerConfig& c, const Var<T>& feats) {
  validate(c);
  if ((feats.rank() != 2 && feats.rank() != 3) || feats.shape().back() != c.vision_width) {
    throw ShapeError("qformer_encode_image: features " + nd::to_string(feats.shape()) + " do not have width " +
                     std::to_string(c.vision_width));
  }
  const bool unbatched = feats.rank() == 2;
  Var<T> kv = unbatched ? nd::reshape(feats, {1, feats.dim(0), feats.dim(1)}) : feats;
  const std::size_t batch = kv.dim(0);
  if (c.vision_width != c.width) kv = nn::linear(scope, "qformer.in_proj", kv);

  Var<T> x = nd::broadcast_to(nd::reshape(scope("qformer.queries"), {1, c.queries, c.width}),
                              {batch, c.queries, c.width});
  nn::AttentionOptions<T> opts;
  opts.heads = c.heads;
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = image_layer(i);
    x = nn::layer_norm(scope, p + ".ln_self", nd::add(x, nn::attention(scope, p + ".self_attn", x, x, opts)));
    x = nn::layer_norm(scope, p + ".ln_cross", nd::add(x, nn::attention(scope, p + ".cross_attn", x, kv, opts)));
    x = nn::layer_norm(scope, p + ".ln_mlp", nd::add(x, nn::mlp(scope, p + ".mlp", x)));
  }
  return unbatched ? nd::reshape(x, {c.queries, c.width}) : x;
}

template <class T>
TextEmbedding<T> text_encode(nd::ParamScope<T>& scope, const QFormerConfig& c,
                             const std::vector<std::vector<int>>& tokens) {
  validate(c);
  if (tokens.empty()) throw Error("text_encode: empty batch");
  std::size_t n = 0;
  bool ragged = false;
  for (const auto& row : tokens) {
    if (row.empty()) throw Error("text_encode: empty token sequence");
    if (n != 0 && row.size() != n) ragged = true;
    n = std::max(n, row.size());
  }
  if (n > c.max_text_len) {
    throw ShapeError("text_encode: sequence length " + std::to_string(n) + " exceeds " +
                     std::to_string(c.max_text_len));
  }
  const std::size_t batch = tokens.size(), d = c.width;
  std::vector<int> ids(batch * n, 0);
  for (std::size_t b = 0; b < batch; ++b) std::copy(tokens[b].begin(), tokens[b].end(), ids.begin() + b * n);

  Var<T> x = nd::embedding(scope("qformer.text.tok_embed"), std::span<const int>(ids), {batch, n});
  x = nd::add(x, nd::slice(scope("qformer.text.pos"), 0, 0, n));

  nd::Mask pad;
  nn::AttentionOptions<T> opts;
  opts.heads = c.heads;
  if (ragged) {
    pad.shape = {batch * c.heads, n, n};
    pad.bits.assign(batch * c.heads * n * n, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < c.heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = tokens[b].size(); j < n; ++j) pad.bits[((b * c.heads + h) * n + i) * n + j] = 1;
    opts.mask = &pad;
  }
  for (std::size_t i = 0; i < c.text_layers; ++i) {
    const std::string p = text_layer(i);
    x = nn::layer_norm(scope, p + ".ln_self", nd::add(x, nn::attention(scope, p + ".self_attn", x, x, opts)));
    x = nn::layer_norm(scope, p + ".ln_mlp", nd::add(x, nn::mlp(scope, p + ".mlp", x)));
  }
  Var<T> pooled = nd::reshape(nd::slice(x, 1, 0, 1), {batch, d});
  return {x, pooled};
}

template <class T>
Var<T> project_prefix(const Var<T>& z, const Var<T>& w) {
  if (z.rank() < 2 || w.rank() != 2 || z.shape().back() != w.dim(0)) {
    throw ShapeError("project_prefix: cannot project " + nd::to_string(z.shape()) + " with " +
                     nd::to_string(w.shape()));
  }
  return nd::matmul(z, w);
}

template <class T>
Var<T> project_prefix(nd::ParamScope<T>& scope, const Var<T>& z) {
  return project_prefix(z, scope("prefix.proj.weight"));
}

#define MEDBLIP_INSTANTIATE_QFORMER(T)                                                                    \
  template void init_qformer(nd::ParamStore<T>&, const QFormerConfig&, std::uint64_t);                    \
  template Var<T> qformer_encode_image(nd::ParamScope<T>&, const QFormerConfig&, const Var<T>&);          \
  template TextEmbedding<T> text_encode(nd::ParamScope<T>&, const QFormerConfig&,                         \
                                        const std::vector<std::vector<int>>&);                            \
  template Var<T> project_prefix(const Var<T>&, const Var<T>&);                                           \
  template Var<T> project_prefix(nd::ParamScope<T>&, const Var<T>&);

MEDBLIP_INSTANTIATE_QFORMER(float)
MEDBLIP_INSTANTIATE_QFORMER(double)

}  // namespace medblip::qformer
