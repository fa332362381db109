#include "medblip/losses/objectives.hpp"

#include <numeric>
#include <vector>

#include "medblip/ndiff/ops.hpp"

namespace medblip::losses {

using nd::Var;

template <class T>
Var<T> pair_similarity(const Var<T>& z, const Var<T>& t) {
  if (z.rank() != 2 || t.rank() != 1 || z.dim(1) != t.dim(0)) {
    throw ShapeError("pair_similarity: shapes " + nd::to_string(z.shape()) + " and " + nd::to_string(t.shape()));
  }
  const Var<T> tb = nd::broadcast_to(nd::reshape(t, {1, t.dim(0)}), z.shape());
  return nd::max(nd::cosine_similarity(z, tb, 1), 0).value;
}

template <class T>
Var<T> similarity_matrix(const Var<T>& z, const Var<T>& t) {
  if (z.rank() != 3 || t.rank() != 2 || z.dim(0) != t.dim(0) || z.dim(2) != t.dim(1)) {
    throw ShapeError("similarity_matrix: shapes " + nd::to_string(z.shape()) + " and " +
                     nd::to_string(t.shape()));
  }
  const std::size_t b = z.dim(0), l = z.dim(1), d = z.dim(2);
  const nd::Shape grid{b, l, b, d};
  const Var<T> zz = nd::broadcast_to(nd::reshape(z, {b, l, 1, d}), grid);
  const Var<T> tt = nd::broadcast_to(nd::reshape(t, {1, 1, b, d}), grid);
  return nd::max(nd::cosine_similarity(zz, tt, 3), 1).value;  // (B, B)
}

template <class T>
Var<T> symmetric_cross_entropy(const Var<T>& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
    throw ShapeError("symmetric_cross_entropy: logits must be square, got " + nd::to_string(logits.shape()));
  }
  const std::size_t b = logits.dim(0);
  std::vector<int> targets(b);
  std::iota(targets.begin(), targets.end(), 0);
  const std::vector<std::uint8_t> mask(b, 1);
  const Var<T> rows = nd::cross_entropy(logits, std::span<const int>(targets), std::span<const std::uint8_t>(mask));
  const Var<T> cols =
      nd::cross_entropy(nd::transpose(logits), std::span<const int>(targets), std::span<const std::uint8_t>(mask));
  return nd::scale(nd::add(rows, cols), 0.5);
}

template <class T>
Var<T> itc_loss(const Var<T>& z, const Var<T>& t, const Var<T>& log_tau) {
  if (log_tau.rank() != 0) throw ShapeError("itc_loss: log_tau must be a scalar");
  const Var<T> inv_tau = nd::exp(nd::scale(log_tau, -1.0));
  return symmetric_cross_entropy(nd::mul(similarity_matrix(z, t), inv_tau));
}

template <class T>
Var<T> feature_alignment_loss(const Var<T>& z, const Var<T>& desc, const Var<T>& qa, const Var<T>& log_tau,
                              bool qa_term) {
  if (desc.rank() != 2 || z.rank() != 3 || desc.dim(0) != z.dim(0) ||
      (qa_term && (qa.rank() != 2 || qa.dim(0) != z.dim(0)))) {
    throw ShapeError("feature_alignment_loss: batch sizes differ (images " + nd::to_string(z.shape()) +
                     ", descriptions " + nd::to_string(desc.shape()) +
                     (qa_term ? ", q&a " + nd::to_string(qa.shape()) : std::string()) + ")");
  }
  const Var<T> it = itc_loss(z, desc, log_tau);
  if (!qa_term) return it;
  return nd::add(it, itc_loss(z, qa, log_tau));
}

template <class T>
Var<T> total_loss(const Var<T>& fa, const Var<T>& lg, double lambda_lg) {
  if (lambda_lg == 0.0) return fa;
  return nd::add(fa, nd::scale(lg, lambda_lg));
}

#define MEDBLIP_INSTANTIATE_LOSSES(T)                                                                     \
  template Var<T> pair_similarity(const Var<T>&, const Var<T>&);                                          \
  template Var<T> similarity_matrix(const Var<T>&, const Var<T>&);                                        \
  template Var<T> symmetric_cross_entropy(const Var<T>&);                                                 \
  template Var<T> itc_loss(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> feature_alignment_loss(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, bool); \
  template Var<T> total_loss(const Var<T>&, const Var<T>&, double);

MEDBLIP_INSTANTIATE_LOSSES(float)
MEDBLIP_INSTANTIATE_LOSSES(double)

}  // namespace medblip::losses
