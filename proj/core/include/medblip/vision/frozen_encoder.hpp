#pragma once

#include <cstdint>

#include "medblip/ndiff/param_store.hpp"

namespace medblip::vision {

struct VisionEncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;
};

// Registers "vision.layers.<i>.{ln1,attn,ln2,mlp}" with every entry frozen.
// Values depend only on (config, seed).
template <class T>
void init_frozen(nd::ParamStore<T>& store, const VisionEncoderConfig& config);

// Pre-norm encoder: x += attn(ln1(x)); x += mlp(ln2(x)) per layer. tokens is
// (N, d) or (B, N, d); the output has the same shape. Features come from the
// last layer.
template <class T>
nd::Var<T> encode_image(nd::ParamScope<T>& scope, const VisionEncoderConfig& config, const nd::Var<T>& tokens);

}  // namespace medblip::vision
