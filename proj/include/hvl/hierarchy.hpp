#pragma once

#include "hvl/embedding_store.hpp"
#include "hvl/types.hpp"

#include <algorithm>
#include <cmath>

namespace hvl {

/// Learnable parameters: the shared adapter W (d x d) and the text biases for
/// the global and high scales. The mid-scale bias is always derived.
template <typename Scalar>
struct ModelParams {
  Matrix<Scalar> W;
  Matrix<Scalar> b0;
  Matrix<Scalar> b2;

  Index dim() const { return W.rows(); }
  Index num_classes() const { return b0.cols(); }

  /// (b0 + b2) / 2, summed first then halved.
  Matrix<Scalar> b1() const {
    Matrix<Scalar> sum = b0 + b2;
    return sum / Scalar(2);
  }

  bool operator==(const ModelParams&) const = default;
};

template <typename Scalar>
ModelParams<Scalar> zero_params(Index d, Index num_classes) {
  return {Matrix<Scalar>::Zero(d, d), Matrix<Scalar>::Zero(d, num_classes), Matrix<Scalar>::Zero(d, num_classes)};
}

/// u = ReLU(v^T W) + v, i.e. u[k] = max(0, sum_m v[m] W[m,k]) + v[k].
/// Works column-wise when `v` has several columns.
template <typename DerivedV, typename DerivedW>
Matrix<typename DerivedV::Scalar> apply_adapter(const Eigen::MatrixBase<DerivedV>& v,
                                                const Eigen::MatrixBase<DerivedW>& W) {
  require(W.rows() == W.cols() && W.rows() == v.rows(), "apply_adapter: shape mismatch");
  using Scalar = typename DerivedV::Scalar;
  return (W.transpose() * v).cwiseMax(Scalar(0)) + v;
}

/// Cosine similarity clamped to [-1, 1]; 0 when either argument has zero norm.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar na = a.norm(), nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) return Scalar(0);
  return std::clamp(a.dot(b) / (na * nb), Scalar(-1), Scalar(1));
}

/// Mid-scale parent of high-scale patch j = R*2n + C: (R/2, C/2) -> (R/2)*n + C/2.
inline Index parent_of(Index high_index, Index n) {
  const Index side = 2 * n;
  return (high_index / side / 2) * n + (high_index % side) / 2;
}

template <typename Scalar>
struct HierarchyState {
  Index n = 0;
  Vector<Scalar> u0;
  Matrix<Scalar> u1_raw;  // adapted, unfused mid embeddings (d x n^2)
  Matrix<Scalar> u1_hat;  // fused mid embeddings
  Matrix<Scalar> u2_raw;  // adapted, unfused high embeddings (d x 4n^2)
  Matrix<Scalar> u2_hat;  // fused high embeddings
  Vector<Scalar> mid_weight;   // cos(u1_i, u0)
  Vector<Scalar> high_weight;  // cos(u2_j, u1_hat_parent)
  int degenerate_cosines = 0;  // zero-norm arguments encountered
};

/// Coarse-to-fine fusion:
///   u1_hat_i = u1_i + cos(u1_i, u0) u0
///   u2_hat_j = u2_j + cos(u2_j, u1_hat_parent(j)) u1_hat_parent(j)
/// With `enabled == false` the fused embeddings equal the raw ones.
template <typename Scalar>
HierarchyState<Scalar> fuse(const Vector<Scalar>& u0, const Matrix<Scalar>& u1, const Matrix<Scalar>& u2, Index n,
                            bool enabled = true) {
  require(u1.cols() == n * n && u2.cols() == 4 * n * n, "fuse: patch counts do not match n");
  require(u1.rows() == u0.size() && u2.rows() == u0.size(), "fuse: dimension mismatch");
  HierarchyState<Scalar> s;
  s.n = n;
  s.u0 = u0;
  s.u1_raw = u1;
  s.u2_raw = u2;
  s.mid_weight = Vector<Scalar>::Zero(u1.cols());
  s.high_weight = Vector<Scalar>::Zero(u2.cols());
  s.u1_hat = u1;
  s.u2_hat = u2;
  if (!enabled) return s;

  const bool u0_zero = u0.norm() == Scalar(0);
  for (Index i = 0; i < u1.cols(); ++i) {
    if (u0_zero || u1.col(i).norm() == Scalar(0)) ++s.degenerate_cosines;
    s.mid_weight(i) = cosine(u1.col(i), u0);
    s.u1_hat.col(i) += s.mid_weight(i) * u0;
  }
  for (Index j = 0; j < u2.cols(); ++j) {
    const auto parent = s.u1_hat.col(parent_of(j, n));
    if (parent.norm() == Scalar(0) || u2.col(j).norm() == Scalar(0)) ++s.degenerate_cosines;
    s.high_weight(j) = cosine(u2.col(j), parent);
    s.u2_hat.col(j) += s.high_weight(j) * parent;
  }
  return s;
}

/// Adapter on every scale (one shared W), then fusion.
template <typename Scalar>
HierarchyState<Scalar> build_hierarchy(const ImageEmbeddings& img, const ModelParams<Scalar>& params, Index n,
                                       bool fusion = true) {
  const Vector<Scalar> u0 = apply_adapter(img.global.cast<Scalar>(), params.W);
  const Matrix<Scalar> u1 = apply_adapter(img.mid.cast<Scalar>(), params.W);
  const Matrix<Scalar> u2 = apply_adapter(img.high.cast<Scalar>(), params.W);
  return fuse<Scalar>(u0, u1, u2, n, fusion);
}

}  // namespace hvl
