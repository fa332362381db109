#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "medblip/ndiff/var.hpp"

// Differentiable primitives. Every primitive validates shapes (ShapeError
// naming the primitive and the offending shapes) and rejects non-finite
// results (NumericError).
namespace medblip::nd {

// Boolean mask whose shape equals a suffix of the masked tensor's shape; it is
// repeated over the leading dimensions.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> bits;
};

// (..., m, k) x (k, n) -> (..., m, n), or batched (B, m, k) x (B, k, n).
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

// Elementwise with numpy-style broadcasting.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, double factor);
template <class T> Var<T> broadcast_to(const Var<T>& a, const Shape& shape);

// Axis permutation. The single-argument form swaps the last two axes.
template <class T> Var<T> transpose(const Var<T>& a, const std::vector<std::size_t>& perm);
template <class T> Var<T> transpose(const Var<T>& a);
template <class T> Var<T> reshape(const Var<T>& a, const Shape& shape);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <class T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t length);

template <class T> Var<T> softmax(const Var<T>& a, std::size_t axis);
// Normalizes to zero mean and unit (biased) variance along axis; no affine.
template <class T> Var<T> layernorm(const Var<T>& a, std::size_t axis, double eps = 1e-5);
// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <class T> Var<T> gelu(const Var<T>& a);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);

// table (V, d) gathered at ids laid out as ids_shape -> ids_shape + (d).
template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids, const Shape& ids_shape);

template <class T> Var<T> masked_fill(const Var<T>& a, const Mask& mask, double value);

// Mean over rows with mask[i] != 0 of -log softmax(logits[i])[targets[i]].
// logits is (N, V).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

// Cosine of a and b (same shape) along axis; that axis is removed.
template <class T> Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, std::size_t axis);

template <class T>
struct MaxResult {
  Var<T> value;
  std::vector<std::size_t> argmax;  // ties resolve to the lowest index
};
template <class T> MaxResult<T> max(const Var<T>& a, std::size_t axis);

template <class T> Var<T> mean(const Var<T>& a, std::size_t axis);
template <class T> Var<T> sum(const Var<T>& a, std::size_t axis);
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);

}  // namespace medblip::nd
