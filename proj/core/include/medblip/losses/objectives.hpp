#pragma once

#include "medblip/ndiff/var.hpp"

namespace medblip::losses {

// max over the L rows of z (L, d) of cos(z_l, t), t (d).
template <class T>
nd::Var<T> pair_similarity(const nd::Var<T>& z, const nd::Var<T>& t);

// S_ij = pair_similarity(z_i, t_j) for z (B, L, d) and t (B, d).
template <class T>
nd::Var<T> similarity_matrix(const nd::Var<T>& z, const nd::Var<T>& t);

// Symmetric cross-entropy over logits (B, B) with targets on the diagonal:
// half the sum of the row-wise and column-wise means.
template <class T>
nd::Var<T> symmetric_cross_entropy(const nd::Var<T>& logits);

// symmetric_cross_entropy(similarity_matrix(z, t) / tau), tau = exp(log_tau).
template <class T>
nd::Var<T> itc_loss(const nd::Var<T>& z, const nd::Var<T>& t, const nd::Var<T>& log_tau);

// itc(z, desc) + itc(z, qa); the second term is dropped when qa_term is off.
template <class T>
nd::Var<T> feature_alignment_loss(const nd::Var<T>& z, const nd::Var<T>& desc, const nd::Var<T>& qa,
                                  const nd::Var<T>& log_tau, bool qa_term = true);

// L_FA + lambda * L_LG
template <class T>
nd::Var<T> total_loss(const nd::Var<T>& fa, const nd::Var<T>& lg, double lambda_lg = 1.0);

}  // namespace medblip::losses
