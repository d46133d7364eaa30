#pragma once

#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/types.hpp"

#include <cmath>
#include <optional>

namespace hvl {

struct AlignmentConfig {
  double tau = 0.01;  // fixed softmax temperature
  /// Divide aggregated mid/high predictions by the kept-patch count instead
  /// of the full patch count. Off by default (sub-normalized aggregates).
  bool renormalize_aggregates = false;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
  }
};

/// cos(u, t_c) / tau for every column t_c of `text`.
template <typename DerivedU, typename DerivedT>
Vector<typename DerivedU::Scalar> alignment_logits(const Eigen::MatrixBase<DerivedU>& u,
                                                   const Eigen::MatrixBase<DerivedT>& text, double tau) {
  using Scalar = typename DerivedU::Scalar;
  require(u.rows() == text.rows(), "alignment: dimension mismatch");
  Vector<Scalar> z(text.cols());
  for (Index c = 0; c < text.cols(); ++c) z(c) = cosine(u, text.col(c)) / Scalar(tau);
  return z;
}

/// Numerically stable log-softmax (max subtraction).
template <typename Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

/// p(y = c | u) = softmax_c(cos(u, t_c) / tau).
template <typename DerivedU, typename DerivedT>
Vector<typename DerivedU::Scalar> align_probs(const Eigen::MatrixBase<DerivedU>& u,
                                              const Eigen::MatrixBase<DerivedT>& text, double tau) {
  if (!(tau > 0)) throw ConfigError("tau must be > 0");
  return log_softmax(alignment_logits(u, text, tau)).array().exp().matrix();
}

/// H(p) = -sum p ln p with 0 ln 0 = 0.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& p) {
  using Scalar = typename Derived::Scalar;
  Scalar h(0);
  for (Index c = 0; c < p.size(); ++c) {
    // NaN passes through so callers can report it as a numerical failure
    require(!(p(c) < Scalar(0)), "entropy: negative probability");
    if (p(c) > Scalar(0)) h -= p(c) * std::log(p(c));
  }
  return h;
}

template <typename Scalar>
struct ScaleAggregate {
  Vector<Scalar> entropies;
  Scalar h_bar = 0;  // mean patch entropy
  Mask mask;         // H(p_i) <= h_bar
  Vector<Scalar> aggregated;
  Index kept = 0;
};

/// Entropy filtering over one scale. `per_patch` holds one probability vector
/// per column. The aggregate is (1/total) * sum of kept columns, or the mean
/// over kept columns when `renormalize` is set. A supplied `frozen_mask`
/// replaces the entropy test.
template <typename Scalar>
ScaleAggregate<Scalar> aggregate_scale(const Matrix<Scalar>& per_patch, Index total, bool renormalize = false,
                                       const Mask* frozen_mask = nullptr) {
  require(per_patch.cols() > 0, "aggregate_scale: no patches");
  require(total >= per_patch.cols(), "aggregate_scale: total smaller than patch count");
  ScaleAggregate<Scalar> out;
  const Index P = per_patch.cols();
  out.entropies.resize(P);
  for (Index i = 0; i < P; ++i) out.entropies(i) = entropy(per_patch.col(i));
  out.h_bar = out.entropies.sum() / Scalar(P);
  if (frozen_mask) {
    require(frozen_mask->size() == P, "aggregate_scale: frozen mask size mismatch");
    out.mask = *frozen_mask;
  } else {
    out.mask = (out.entropies.array() <= out.h_bar);
  }
  out.aggregated = Vector<Scalar>::Zero(per_patch.rows());
  for (Index i = 0; i < P; ++i)
    if (out.mask(i)) {
      out.aggregated += per_patch.col(i);
      ++out.kept;
    }
  const Index denom = renormalize ? out.kept : total;
  if (denom > 0) out.aggregated /= Scalar(denom);
  return out;
}

template <typename Scalar>
struct PredictionSet {
  Vector<Scalar> p0;
  Matrix<Scalar> p_mid;   // C x n^2
  Matrix<Scalar> p_high;  // C x 4n^2
  Vector<Scalar> h_mid;
  Vector<Scalar> h_high;
  Scalar h_bar_mid = 0;
  Scalar h_bar_high = 0;
  Mask mask_mid;
  Mask mask_high;
  Vector<Scalar> p1;
  Vector<Scalar> p2;
};

/// Per-scale text embeddings t + b0, t + (b0 + b2)/2, t + b2.
template <typename Scalar>
struct ScaleText {
  Matrix<Scalar> t0, t1, t2;
};

template <typename Scalar>
ScaleText<Scalar> scale_text(const TextBank& text, const ModelParams<Scalar>& params) {
  require(text.t.rows() == params.b0.rows() && text.t.cols() == params.b0.cols(), "scale_text: shape mismatch");
  const Matrix<Scalar> base = text.t.cast<Scalar>();
  return {base + params.b0, base + params.b1(), base + params.b2};
}

template <typename Scalar>
Matrix<Scalar> align_columns(const Matrix<Scalar>& u, const Matrix<Scalar>& text, double tau) {
  Matrix<Scalar> p(text.cols(), u.cols());
  for (Index i = 0; i < u.cols(); ++i) p.col(i) = align_probs(u.col(i), text, tau);
  return p;
}

template <typename Scalar>
PredictionSet<Scalar> predict(const HierarchyState<Scalar>& state, const ScaleText<Scalar>& text,
                              const AlignmentConfig& cfg, const Mask* frozen_mid = nullptr,
                              const Mask* frozen_high = nullptr) {
  cfg.validate();
  PredictionSet<Scalar> out;
  out.p0 = align_probs(state.u0, text.t0, cfg.tau);
  out.p_mid = align_columns(state.u1_hat, text.t1, cfg.tau);
  out.p_high = align_columns(state.u2_hat, text.t2, cfg.tau);

  auto mid = aggregate_scale(out.p_mid, out.p_mid.cols(), cfg.renormalize_aggregates, frozen_mid);
  auto high = aggregate_scale(out.p_high, out.p_high.cols(), cfg.renormalize_aggregates, frozen_high);
  out.h_mid = std::move(mid.entropies);
  out.h_bar_mid = mid.h_bar;
  out.mask_mid = std::move(mid.mask);
  out.p1 = std::move(mid.aggregated);
  out.h_high = std::move(high.entropies);
  out.h_bar_high = high.h_bar;
  out.mask_high = std::move(high.mask);
  out.p2 = std::move(high.aggregated);
  return out;
}

template <typename Scalar>
PredictionSet<Scalar> predict(const HierarchyState<Scalar>& state, const TextBank& text,
                              const ModelParams<Scalar>& params, const AlignmentConfig& cfg) {
  return predict(state, scale_text(text, params), cfg);
}

}  // namespace hvl
