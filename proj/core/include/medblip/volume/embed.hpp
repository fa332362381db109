#pragma once

#include <cstdint>

#include "medblip/ndiff/param_store.hpp"
#include "medblip/volume/volume.hpp"

namespace medblip::volume {

struct EmbedConfig {
  std::size_t volume_dim = 32;
  std::size_t patch = 8;  // stride equals patch
  std::size_t d_vis = 64;
  bool aggregate = true;

  PatchGrid grid() const { return PatchGrid::make(volume_dim, patch, patch); }
  std::size_t token_count() const { return grid().count + (aggregate ? 1 : 0); }
};

// Registers learnable "embed.proj.weight" (p^3, d_vis), "embed.pos"
// (N_v + a, d_vis) and, when enabled, "embed.aggregate" (1, d_vis).
template <class T>
void init_embed(nd::ParamStore<T>& store, const EmbedConfig& config, std::uint64_t seed);

// token_i = patch_i W_proj + pos_{i+a}; with an aggregate row, row 0 is
// aggregate + pos_0. patches is (N_v, p^3) or (B, N_v, p^3); aggregate may be
// undefined.
template <class T>
nd::Var<T> embed_tokens(const nd::Var<T>& patches, const nd::Var<T>& w_proj, const nd::Var<T>& pos,
                        const nd::Var<T>& aggregate);

template <class T>
nd::Var<T> embed_tokens(nd::ParamScope<T>& scope, const EmbedConfig& config, const nd::Var<T>& patches);

}  // namespace medblip::volume
