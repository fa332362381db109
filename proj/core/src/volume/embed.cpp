#include "medblip/volume/embed.hpp"

#include "medblip/ndiff/init.hpp"
#include "medblip/ndiff/ops.hpp"
#include "medblip/nn/layers.hpp"

namespace medblip::volume {

template <class T>
void init_embed(nd::ParamStore<T>& store, const EmbedConfig& config, std::uint64_t seed) {
  const PatchGrid grid = config.grid();
  nn::init_linear(store, "embed.proj", grid.patch_voxels(), config.d_vis, seed, false, /*bias=*/false);
  store.add("embed.pos", nd::truncated_normal<T>({config.token_count(), config.d_vis}, nn::kInitStd, seed, "embed.pos"));
  if (config.aggregate) {
    store.add("embed.aggregate", nd::truncated_normal<T>({1, config.d_vis}, nn::kInitStd, seed, "embed.aggregate"));
  }
}

template <class T>
nd::Var<T> embed_tokens(const nd::Var<T>& patches, const nd::Var<T>& w_proj, const nd::Var<T>& pos,
                        const nd::Var<T>& aggregate) {
  if (patches.rank() != 2 && patches.rank() != 3) {
    throw ShapeError("embed_tokens: patches must be rank 2 or 3, got " + nd::to_string(patches.shape()));
  }
  nd::Var<T> tokens = nd::matmul(patches, w_proj);
  const std::size_t axis = patches.rank() - 2;
  const std::size_t width = tokens.shape().back();
  if (aggregate.defined()) {
    if (aggregate.shape() != nd::Shape{1, width}) {
      throw ShapeError("embed_tokens: aggregate shape " + nd::to_string(aggregate.shape()) + " vs width " +
                       std::to_string(width));
    }
    nd::Var<T> agg = aggregate;
    if (patches.rank() == 3) agg = nd::broadcast_to(nd::reshape(aggregate, {1, 1, width}), {patches.dim(0), 1, width});
    tokens = nd::concat<T>({agg, tokens}, axis);
  }
  const nd::Shape expected{tokens.dim(axis), width};
  if (pos.shape() != expected) {
    throw ShapeError("embed_tokens: position table " + nd::to_string(pos.shape()) + " does not match tokens " +
                     nd::to_string(expected));
  }
  return nd::add(tokens, pos);
}

template <class T>
nd::Var<T> embed_tokens(nd::ParamScope<T>& scope, const EmbedConfig& config, const nd::Var<T>& patches) {
  nd::Var<T> aggregate;
  if (config.aggregate) aggregate = scope("embed.aggregate");
  return embed_tokens(patches, scope("embed.proj.weight"), scope("embed.pos"), aggregate);
}

template void init_embed(nd::ParamStore<float>&, const EmbedConfig&, std::uint64_t);
template void init_embed(nd::ParamStore<double>&, const EmbedConfig&, std::uint64_t);
template nd::Var<float> embed_tokens(const nd::Var<float>&, const nd::Var<float>&, const nd::Var<float>&,
                                     const nd::Var<float>&);
template nd::Var<double> embed_tokens(const nd::Var<double>&, const nd::Var<double>&, const nd::Var<double>&,
                                      const nd::Var<double>&);
template nd::Var<float> embed_tokens(nd::ParamScope<float>&, const EmbedConfig&, const nd::Var<float>&);
template nd::Var<double> embed_tokens(nd::ParamScope<double>&, const EmbedConfig&, const nd::Var<double>&);

}  // namespace medblip::volume
