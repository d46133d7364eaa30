#pragma once

#include "hvl/alignment.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/types.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace hvl {

/// Entropy gain of every high patch over its mid-scale parent:
/// H(p2_j) - H(p1_parent(j)).
template <typename Scalar>
Vector<Scalar> entropy_gain(const PredictionSet<Scalar>& pred, Index n) {
  require(pred.h_high.size() == 4 * n * n && pred.h_mid.size() == n * n, "entropy_gain: prediction set incomplete");
  Vector<Scalar> gains(pred.h_high.size());
  for (Index j = 0; j < gains.size(); ++j) gains(j) = pred.h_high(j) - pred.h_mid(parent_of(j, n));
  return gains;
}

/// Indices of the K largest gains, descending; equal gains keep ascending index order.
template <typename Derived>
std::vector<Index> select_top_k(const Eigen::MatrixBase<Derived>& gains, Index k) {
  if (k < 1 || k > gains.size())
    throw ConfigError("K = " + std::to_string(k) + " outside [1, " + std::to_string(gains.size()) + "]");
  std::vector<Index> order(static_cast<std::size_t>(gains.size()));
  std::iota(order.begin(), order.end(), Index(0));
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
    if (gains(a) != gains(b)) return gains(a) > gains(b);
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

template <typename Scalar>
struct Propagated {
  Vector<Scalar> q1;
  Vector<Scalar> q0;
};

/// q1 = q2 + (1/n^2) sum_i cos(q2, u1_hat_i) u1_hat_i   (all mid patches, no mask)
/// q0 = q1 + cos(q1, u0) u0
/// With `enabled == false`: q0 = q1 = q2.
template <typename Scalar>
Propagated<Scalar> propagate(const Vector<Scalar>& q2, const Matrix<Scalar>& u1_hat, const Vector<Scalar>& u0,
                             bool enabled = true) {
  require(q2.size() == u1_hat.rows() && q2.size() == u0.size(), "propagate: dimension mismatch");
  if (!enabled) return {q2, q2};
  Vector<Scalar> mix = Vector<Scalar>::Zero(q2.size());
  for (Index i = 0; i < u1_hat.cols(); ++i) mix += cosine(q2, u1_hat.col(i)) * u1_hat.col(i);
  Propagated<Scalar> out;
  out.q1 = q2 + mix / Scalar(u1_hat.cols());
  out.q0 = out.q1 + cosine(out.q1, u0) * u0;
  return out;
}

template <typename Scalar>
struct PseudoOodSet {
  std::vector<Index> indices;
  Matrix<Scalar> q2;  // d x K
  Matrix<Scalar> q1;
  Matrix<Scalar> q0;
  Vector<Scalar> gains;  // gains of the selected patches, same order as indices
};

/// Builds the K hard pseudo-OOD triples for one image. `forced` replaces the
/// entropy-gain ranking (used for frozen selections and the random-selection
/// ablation).
template <typename Scalar>
PseudoOodSet<Scalar> build_pseudo_ood(const HierarchyState<Scalar>& state, const PredictionSet<Scalar>& pred, Index k,
                                      bool lower_scale_propagation = true,
                                      const std::vector<Index>* forced = nullptr) {
  const Vector<Scalar> all_gains = entropy_gain(pred, state.n);
  PseudoOodSet<Scalar> out;
  if (forced) {
    for (Index j : *forced) require(j >= 0 && j < all_gains.size(), "build_pseudo_ood: forced index out of range");
    out.indices = *forced;
  } else {
    out.indices = select_top_k(all_gains, k);
  }
  const Index d = state.u0.size(), K = static_cast<Index>(out.indices.size());
  out.q2.resize(d, K);
  out.q1.resize(d, K);
  out.q0.resize(d, K);
  out.gains.resize(K);
  for (Index s = 0; s < K; ++s) {
    const Index j = out.indices[s];
    out.gains(s) = all_gains(j);
    out.q2.col(s) = state.u2_hat.col(j);
    auto prop = propagate<Scalar>(out.q2.col(s), state.u1_hat, state.u0, lower_scale_propagation);
    out.q1.col(s) = prop.q1;
    out.q0.col(s) = prop.q0;
  }
  return out;
}

}  // namespace hvl
