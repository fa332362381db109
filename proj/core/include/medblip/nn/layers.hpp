#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "medblip/ndiff/ops.hpp"
#include "medblip/ndiff/param_store.hpp"

// Transformer building blocks over ParamStore entries. Parameters live under
// "<prefix>.weight" / "<prefix>.bias" (linear), "<prefix>.gain" / "<prefix>.bias"
// (layer norm); attention uses "<prefix>.{q,k,v,o}_proj", the MLP uses
// "<prefix>.fc1" and "<prefix>.fc2".
namespace medblip::nn {

inline constexpr double kInitStd = 0.02;

template <class T>
void init_linear(nd::ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                 std::uint64_t seed, bool frozen, bool bias = true);
template <class T>
void init_layer_norm(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, bool frozen);
template <class T>
void init_attention(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, std::uint64_t seed,
                    bool frozen);
template <class T>
void init_mlp(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, std::size_t hidden,
              std::uint64_t seed, bool frozen);

// x (..., in) -> (..., out)
template <class T>
nd::Var<T> linear(nd::ParamScope<T>& scope, const std::string& prefix, const nd::Var<T>& x);
// Affine layer norm over the last axis.
template <class T>
nd::Var<T> layer_norm(nd::ParamScope<T>& scope, const std::string& prefix, const nd::Var<T>& x);
// fc2(gelu(fc1(x)))
template <class T>
nd::Var<T> mlp(nd::ParamScope<T>& scope, const std::string& prefix, const nd::Var<T>& x);

// Low-rank update added to a projection: y += scale * (x A^T) B^T, with
// A (r, d_in) and B (d_out, r).
template <class T>
struct LowRank {
  nd::Var<T> a;
  nd::Var<T> b;
  double scale = 1.0;
};

template <class T>
struct AttentionOptions {
  std::size_t heads = 1;
  // Masked score positions (true = blocked). Shape must be a suffix of the
  // score shape (B * heads, n_query, n_key).
  const nd::Mask* mask = nullptr;
  std::optional<LowRank<T>> q_update;
  std::optional<LowRank<T>> v_update;
};

// Multi-head scaled dot-product attention: queries from xq (B, nq, d), keys
// and values from xkv (B, nk, d). Returns (B, nq, d).
template <class T>
nd::Var<T> attention(nd::ParamScope<T>& scope, const std::string& prefix, const nd::Var<T>& xq,
                     const nd::Var<T>& xkv, const AttentionOptions<T>& options);

}  // namespace medblip::nn
