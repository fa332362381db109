#include "medblip/nn/layers.hpp"

#include <cmath>
#include <string_view>

#include "medblip/ndiff/init.hpp"

namespace medblip::nn {

using nd::Shape;
using nd::Tensor;
using nd::Var;

template <class T>
void init_linear(nd::ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                 std::uint64_t seed, bool frozen, bool bias) {
  const std::string w = prefix + ".weight";
  store.add(w, nd::truncated_normal<T>({in, out}, kInitStd, seed, w), frozen);
  if (bias) store.add(prefix + ".bias", Tensor<T>({out}), frozen);
}

template <class T>
void init_layer_norm(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, bool frozen) {
  store.add(prefix + ".gain", Tensor<T>({width}, T(1)), frozen);
  store.add(prefix + ".bias", Tensor<T>({width}), frozen);
}

template <class T>
void init_attention(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, std::uint64_t seed,
                    bool frozen) {
  // No key bias: it shifts every score of a query equally and cancels in softmax.
  for (const char* proj : {".q_proj", ".k_proj", ".v_proj", ".o_proj"})
    init_linear(store, prefix + proj, width, width, seed, frozen, std::string_view(proj) != ".k_proj");
}

template <class T>
void init_mlp(nd::ParamStore<T>& store, const std::string& prefix, std::size_t width, std::size_t hidden,
              std::uint64_t seed, bool frozen) {
  init_linear(store, prefix + ".fc1", width, hidden, seed, frozen);
  init_linear(store, prefix + ".fc2", hidden, width, seed, frozen);
}

template <class T>
Var<T> linear(nd::ParamScope<T>& scope, const std::string& prefix, const Var<T>& x) {
  Var<T> y = nd::matmul(x, scope(prefix + ".weight"));
  const std::string b = prefix + ".bias";
  if (scope.contains(b)) y = nd::add(y, scope(b));
  return y;
}

template <class T>
Var<T> layer_norm(nd::ParamScope<T>& scope, const std::string& prefix, const Var<T>& x) {
  Var<T> y = nd::layernorm(x, x.rank() - 1);
  return nd::add(nd::mul(y, scope(prefix + ".gain")), scope(prefix + ".bias"));
}

template <class T>
Var<T> mlp(nd::ParamScope<T>& scope, const std::string& prefix, const Var<T>& x) {
  return linear(scope, prefix + ".fc2", nd::gelu(linear(scope, prefix + ".fc1", x)));
}

namespace {

template <class T>
Var<T> low_rank(const Var<T>& x, const LowRank<T>& u) {
  return nd::scale(nd::matmul(nd::matmul(x, nd::transpose(u.a)), nd::transpose(u.b)), u.scale);
}

// (B, n, H*dh) -> (B*H, n, dh)
template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t batch = x.dim(0), n = x.dim(1), dh = x.dim(2) / heads;
  if (heads == 1) return x;
  Var<T> y = nd::transpose(nd::reshape(x, {batch, n, heads, dh}), {0, 2, 1, 3});
  return nd::reshape(y, {batch * heads, n, dh});
}

// (B*H, n, dh) -> (B, n, H*dh)
template <class T>
Var<T> merge_heads(const Var<T>& x, std::size_t batch, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t n = x.dim(1), dh = x.dim(2);
  Var<T> y = nd::transpose(nd::reshape(x, {batch, heads, n, dh}), {0, 2, 1, 3});
  return nd::reshape(y, {batch, n, heads * dh});
}

}  // namespace

template <class T>
Var<T> attention(nd::ParamScope<T>& scope, const std::string& prefix, const Var<T>& xq, const Var<T>& xkv,
                 const AttentionOptions<T>& options) {
  if (xq.rank() != 3 || xkv.rank() != 3 || xq.dim(0) != xkv.dim(0) || xq.dim(2) != xkv.dim(2)) {
    throw ShapeError("attention '" + prefix + "': incompatible shapes " + nd::to_string(xq.shape()) + " and " +
                     nd::to_string(xkv.shape()));
  }
  const std::size_t batch = xq.dim(0), width = xq.dim(2), heads = options.heads;
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention '" + prefix + "': width " + std::to_string(width) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  Var<T> q = linear(scope, prefix + ".q_proj", xq);
  if (options.q_update) q = nd::add(q, low_rank(xq, *options.q_update));
  Var<T> k = linear(scope, prefix + ".k_proj", xkv);
  Var<T> v = linear(scope, prefix + ".v_proj", xkv);
  if (options.v_update) v = nd::add(v, low_rank(xkv, *options.v_update));

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(width / heads));
  Var<T> scores = nd::scale(nd::matmul(split_heads(q, heads), nd::transpose(split_heads(k, heads))), inv_sqrt);
  if (options.mask) scores = nd::masked_fill(scores, *options.mask, -1e9);
  Var<T> probs = nd::softmax(scores, 2);
  Var<T> out = merge_heads(nd::matmul(probs, split_heads(v, heads)), batch, heads);
  return linear(scope, prefix + ".o_proj", out);
}

#define MEDBLIP_INSTANTIATE_LAYERS(T)                                                                         \
  template void init_linear(nd::ParamStore<T>&, const std::string&, std::size_t, std::size_t, std::uint64_t,  \
                            bool, bool);                                                                      \
  template void init_layer_norm(nd::ParamStore<T>&, const std::string&, std::size_t, bool);                   \
  template void init_attention(nd::ParamStore<T>&, const std::string&, std::size_t, std::uint64_t, bool);     \
  template void init_mlp(nd::ParamStore<T>&, const std::string&, std::size_t, std::size_t, std::uint64_t,     \
                         bool);                                                                               \
  template Var<T> linear(nd::ParamScope<T>&, const std::string&, const Var<T>&);                              \
  template Var<T> layer_norm(nd::ParamScope<T>&, const std::string&, const Var<T>&);                          \
  template Var<T> mlp(nd::ParamScope<T>&, const std::string&, const Var<T>&);                                 \
  template Var<T> attention(nd::ParamScope<T>&, const std::string&, const Var<T>&, const Var<T>&,             \
                            const AttentionOptions<T>&);

MEDBLIP_INSTANTIATE_LAYERS(float)
MEDBLIP_INSTANTIATE_LAYERS(double)

}  // namespace medblip::nn
