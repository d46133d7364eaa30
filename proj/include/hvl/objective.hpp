#pragma once

#include "hvl/alignment.hpp"
#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/pseudo_ood.hpp"
#include "hvl/types.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace hvl {

/// Probability floor applied before taking logs in cross-entropy terms.
inline constexpr double kProbFloor = 1e-12;

struct Ablations {
  bool disable_ood_loss = false;
  bool disable_entropy_gain_selection = false;  // trainer substitutes random patches
  bool disable_cross_scale_fusion = false;
  bool disable_lower_scale_propagation = false;  // q0 = q1 = q2

  bool operator==(const Ablations&) const = default;
};

/// Everything the forward/backward pass needs besides data and parameters.
struct ModelConfig {
  AlignmentConfig alignment;
  Index K = 4;
  double lambda_ood = 1.0;
  Ablations ablations;

  void validate(Index n) const {
    alignment.validate();
    if (K < 1 || K > 4 * n * n)
      throw ConfigError("K = " + std::to_string(K) + " outside [1, " + std::to_string(4 * n * n) + "]");
    if (!std::isfinite(lambda_ood)) throw ConfigError("lambda_ood must be finite");
  }
};

template <typename Scalar>
struct LossBreakdown {
  Scalar l_id = 0;
  Scalar l_ood = 0;  // already multiplied by lambda_ood; 0 when the OOD loss is disabled
  Scalar total = 0;
  std::array<Scalar, 3> per_scale_ce{};
  std::array<Scalar, 3> per_scale_neg_entropy{};
};

template <typename Scalar>
struct Gradients {
  Matrix<Scalar> dW;
  Matrix<Scalar> db0;
  Matrix<Scalar> db2;

  static Gradients zeros_like(const ModelParams<Scalar>& p) {
    return {Matrix<Scalar>::Zero(p.W.rows(), p.W.cols()), Matrix<Scalar>::Zero(p.b0.rows(), p.b0.cols()),
            Matrix<Scalar>::Zero(p.b2.rows(), p.b2.cols())};
  }
  Gradients& operator+=(const Gradients& o) {
    dW += o.dW;
    db0 += o.db0;
    db2 += o.db2;
    return *this;
  }
  Gradients& operator*=(Scalar s) {
    dW *= s;
    db0 *= s;
    db2 *= s;
    return *this;
  }
  Scalar squared_norm() const { return dW.squaredNorm() + db0.squaredNorm() + db2.squaredNorm(); }
};

/// Discrete decisions of a forward pass. Any field that is set overrides the
/// corresponding decision; gradients treat all of them as constants.
struct DiscreteChoices {
  std::optional<Mask> mask_mid;
  std::optional<Mask> mask_high;
  std::optional<std::vector<Index>> selection;
};

template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& p, Index label) {
  using Scalar = typename Derived::Scalar;
  require(label >= 0 && label < p.size(), "cross_entropy: label out of range");
  return -std::log(std::max(p(label), Scalar(kProbFloor)));
}

/// CE(p0, y) + CE(p1, y) + CE(p2, y).
template <typename Scalar>
Scalar loss_id(const PredictionSet<Scalar>& pred, Index label) {
  return cross_entropy(pred.p0, label) + cross_entropy(pred.p1, label) + cross_entropy(pred.p2, label);
}

/// Unweighted -(1/K) sum_k [H(p0_k) + H(p1_k) + H(p2_k)].
template <typename Scalar>
Scalar loss_ood(const PseudoOodSet<Scalar>& pseudo, const ScaleText<Scalar>& text, const AlignmentConfig& cfg) {
  const Index K = pseudo.q2.cols();
  require(K > 0, "loss_ood: empty pseudo-OOD set");
  Scalar sum(0);
  for (Index k = 0; k < K; ++k)
    sum += entropy(align_probs(pseudo.q0.col(k), text.t0, cfg.tau)) +
           entropy(align_probs(pseudo.q1.col(k), text.t1, cfg.tau)) +
           entropy(align_probs(pseudo.q2.col(k), text.t2, cfg.tau));
  return -sum / Scalar(K);
}

template <typename Scalar>
Scalar loss_ood(const PseudoOodSet<Scalar>& pseudo, const TextBank& text, const ModelParams<Scalar>& params,
                const AlignmentConfig& cfg) {
  return loss_ood(pseudo, scale_text(text, params), cfg);
}

namespace detail {

template <typename Scalar>
using ConstVecRef = Eigen::Ref<const Vector<Scalar>>;
template <typename Scalar>
using VecRef = Eigen::Ref<Vector<Scalar>>;

/// Accumulates g * d cos(a, b) into ga and gb. Zero-norm arguments contribute nothing.
template <typename Scalar>
void cosine_backward(ConstVecRef<Scalar> a, ConstVecRef<Scalar> b, Scalar g, VecRef<Scalar> ga, VecRef<Scalar> gb) {
  const Scalar na = a.norm(), nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0) || g == Scalar(0)) return;
  const Scalar inv = Scalar(1) / (na * nb);
  const Scalar c = a.dot(b) * inv;
  ga += g * (b * inv - (c / (na * na)) * a);
  gb += g * (a * inv - (c / (nb * nb)) * b);
}

/// Backward of z_c = cos(u, T_c) / tau given dL/dz.
template <typename Scalar>
void alignment_backward(ConstVecRef<Scalar> u, const Matrix<Scalar>& T, const Vector<Scalar>& gz, double tau,
                        VecRef<Scalar> gu, Matrix<Scalar>& gT) {
  for (Index c = 0; c < T.cols(); ++c)
    cosine_backward<Scalar>(u, T.col(c), gz(c) / Scalar(tau), gu, gT.col(c));
}

/// dH/dz for p = softmax(z): -p * (log p + H).
template <typename Scalar>
Vector<Scalar> entropy_logit_grad(const Vector<Scalar>& log_p) {
  const Vector<Scalar> p = log_p.array().exp().matrix();
  Scalar h(0);
  for (Index c = 0; c < p.size(); ++c)
    if (p(c) > Scalar(0)) h -= p(c) * log_p(c);
  return (-(p.array() * (log_p.array() + h))).matrix();
}

}  // namespace detail

template <typename Scalar>
struct ImageObjective {
  LossBreakdown<Scalar> loss;
  Gradients<Scalar> grads;
  DiscreteChoices choices;  // the decisions actually used
};

/// Loss and exact reverse-mode gradients for one labeled image. Masks and the
/// pseudo-OOD selection are constants of the pass; `frozen` can pin them.
template <typename Scalar>
ImageObjective<Scalar> image_objective(const ImageEmbeddings& item, const ModelParams<Scalar>& params,
                                       const TextBank& text, const ModelConfig& cfg, Index n,
                                       const DiscreteChoices* frozen = nullptr, bool want_grads = true) {
  using detail::alignment_backward;
  using detail::cosine_backward;
  using Vec = Vector<Scalar>;
  using Mat = Matrix<Scalar>;

  const Index C = text.num_classes();
  require(item.labeled(), "image_objective: item '" + item.id + "' is unlabeled");
  require(item.label < C, "image_objective: label out of range for item '" + item.id + "'");
  const Index y = item.label;
  const double tau = cfg.alignment.tau;
  const bool fusion = !cfg.ablations.disable_cross_scale_fusion;
  const bool propagation = !cfg.ablations.disable_lower_scale_propagation;
  const bool with_ood = !cfg.ablations.disable_ood_loss;

  // ---- forward ----
  const HierarchyState<Scalar> st = build_hierarchy(item, params, n, fusion);
  const ScaleText<Scalar> tx = scale_text(text, params);
  const Mask* fm = frozen && frozen->mask_mid ? &*frozen->mask_mid : nullptr;
  const Mask* fh = frozen && frozen->mask_high ? &*frozen->mask_high : nullptr;
  const PredictionSet<Scalar> pred = predict(st, tx, cfg.alignment, fm, fh);
  const std::vector<Index>* forced = frozen && frozen->selection ? &*frozen->selection : nullptr;
  const PseudoOodSet<Scalar> pseudo = build_pseudo_ood(st, pred, cfg.K, propagation, forced);

  ImageObjective<Scalar> out;
  out.choices.mask_mid = pred.mask_mid;
  out.choices.mask_high = pred.mask_high;
  out.choices.selection = pseudo.indices;

  auto& L = out.loss;
  L.per_scale_ce = {cross_entropy(pred.p0, y), cross_entropy(pred.p1, y), cross_entropy(pred.p2, y)};
  L.l_id = L.per_scale_ce[0] + L.per_scale_ce[1] + L.per_scale_ce[2];

  const Index K = pseudo.q2.cols();
  const std::array<const Mat*, 3> q = {&pseudo.q0, &pseudo.q1, &pseudo.q2};
  const std::array<const Mat*, 3> ts = {&tx.t0, &tx.t1, &tx.t2};
  std::array<std::vector<Vec>, 3> ood_logp;
  for (int s = 0; s < 3; ++s) {
    Scalar h_sum(0);
    for (Index k = 0; k < K; ++k) {
      ood_logp[s].push_back(log_softmax(alignment_logits(q[s]->col(k), *ts[s], tau)));
      h_sum += entropy(ood_logp[s].back().array().exp().matrix());
    }
    L.per_scale_neg_entropy[s] = -h_sum / Scalar(K);
  }
  if (with_ood) {
    const Scalar neg = L.per_scale_neg_entropy[0] + L.per_scale_neg_entropy[1] + L.per_scale_neg_entropy[2];
    L.l_ood = Scalar(cfg.lambda_ood) * neg;
  }
  L.total = L.l_id + L.l_ood;
  if (!want_grads) return out;

  // ---- backward ----
  const Index d = st.u0.size(), P1 = st.u1_hat.cols(), P2 = st.u2_hat.cols();
  Vec g_u0 = Vec::Zero(d);
  Mat g_u1 = Mat::Zero(d, P1);  // w.r.t. fused mid embeddings first, raw after fusion backward
  Mat g_u2 = Mat::Zero(d, P2);
  Mat gT0 = Mat::Zero(d, C), gT1 = Mat::Zero(d, C), gT2 = Mat::Zero(d, C);

  // CE on p0.
  {
    const Vec lp = log_softmax(alignment_logits(st.u0, tx.t0, tau));
    if (lp(y) > std::log(Scalar(kProbFloor))) {
      Vec gz = lp.array().exp().matrix();
      gz(y) -= Scalar(1);
      alignment_backward<Scalar>(st.u0, tx.t0, gz, tau, g_u0, gT0);
    }
  }
  // CE on the aggregated mid/high predictions.
  auto aggregate_backward = [&](const Vec& agg, const Mat& per_patch, const Mask& mask, const Mat& u_hat,
                                const Mat& T, Mat& g_u, Mat& gT) {
    if (!(agg(y) > Scalar(kProbFloor))) return;
    Index kept = mask.count();
    const Scalar denom = Scalar(cfg.alignment.renormalize_aggregates ? kept : per_patch.cols());
    const Scalar g_agg = -Scalar(1) / (agg(y) * denom);
    for (Index i = 0; i < per_patch.cols(); ++i) {
      if (!mask(i)) continue;
      const Vec p = per_patch.col(i);
      Vec gz = -p;
      gz(y) += Scalar(1);
      gz *= g_agg * p(y);
      alignment_backward<Scalar>(u_hat.col(i), T, gz, tau, g_u.col(i), gT);
    }
  };
  aggregate_backward(pred.p1, pred.p_mid, pred.mask_mid, st.u1_hat, tx.t1, g_u1, gT1);
  aggregate_backward(pred.p2, pred.p_high, pred.mask_high, st.u2_hat, tx.t2, g_u2, gT2);

  // Pseudo-OOD entropies and the propagation chain back to u2_hat / u1_hat / u0.
  if (with_ood && cfg.lambda_ood != 0.0) {
    const Scalar weight = Scalar(cfg.lambda_ood) / Scalar(K);
    std::array<Mat*, 3> gT = {&gT0, &gT1, &gT2};
    for (Index k = 0; k < K; ++k) {
      std::array<Vec, 3> gq = {Vec::Zero(d), Vec::Zero(d), Vec::Zero(d)};
      for (int s = 0; s < 3; ++s) {
        // L_ood = -weight * H  =>  dL/dz = -weight * dH/dz
        const Vec gz = -weight * detail::entropy_logit_grad<Scalar>(ood_logp[s][k]);
        alignment_backward<Scalar>(q[s]->col(k), *ts[s], gz, tau, gq[s], *gT[s]);
      }
      if (propagation) {
        const Vec q1 = pseudo.q1.col(k), q2 = pseudo.q2.col(k);
        // q0 = q1 + cos(q1, u0) u0
        gq[1] += gq[0];
        g_u0 += cosine(q1, st.u0) * gq[0];
        cosine_backward<Scalar>(q1, st.u0, gq[0].dot(st.u0), gq[1], g_u0);
        // q1 = q2 + (1/P1) sum_i cos(q2, u1_hat_i) u1_hat_i
        gq[2] += gq[1];
        for (Index i = 0; i < P1; ++i) {
          const Vec u1i = st.u1_hat.col(i);
          g_u1.col(i) += (cosine(q2, u1i) / Scalar(P1)) * gq[1];
          cosine_backward<Scalar>(q2, u1i, gq[1].dot(u1i) / Scalar(P1), gq[2], g_u1.col(i));
        }
      } else {
        gq[2] += gq[0] + gq[1];
      }
      g_u2.col(pseudo.indices[k]) += gq[2];
    }
  }

  // Fusion backward: high first (it feeds on fused mid), then mid.
  if (fusion) {
    for (Index j = 0; j < P2; ++j) {
      const Index par = parent_of(j, n);
      const Vec g = g_u2.col(j);
      const Vec parent = st.u1_hat.col(par);
      g_u1.col(par) += st.high_weight(j) * g;
      cosine_backward<Scalar>(st.u2_raw.col(j), parent, g.dot(parent), g_u2.col(j), g_u1.col(par));
    }
    for (Index i = 0; i < P1; ++i) {
      const Vec g = g_u1.col(i);
      g_u0 += st.mid_weight(i) * g;
      cosine_backward<Scalar>(st.u1_raw.col(i), st.u0, g.dot(st.u0), g_u1.col(i), g_u0);
    }
  }

  // Adapter: u = ReLU(W^T v) + v. The ReLU derivative at exactly 0 is taken
  // as 1 so a zero-initialized adapter receives a learning signal.
  out.grads = Gradients<Scalar>::zeros_like(params);
  auto adapter_backward = [&](const auto& raw, const Mat& g) {
    const Mat v = raw.template cast<Scalar>();
    const Mat pre = params.W.transpose() * v;
    const Mat gated = (pre.array() >= Scalar(0)).select(g.array(), Scalar(0)).matrix();
    out.grads.dW.noalias() += v * gated.transpose();
  };
  adapter_backward(item.global, Mat(g_u0));
  adapter_backward(item.mid, g_u1);
  adapter_backward(item.high, g_u2);

  // t1 = t + (b0 + b2)/2 splits its sensitivity evenly.
  out.grads.db0 = gT0 + gT1 / Scalar(2);
  out.grads.db2 = gT2 + gT1 / Scalar(2);
  return out;
}

template <typename Scalar>
struct BatchObjective {
  LossBreakdown<Scalar> loss;
  Gradients<Scalar> grads;
  std::vector<DiscreteChoices> choices;
};

/// Mean over the batch of (L_id + L_ood), with gradients. Items are reduced
/// in batch order. `frozen`, when non-empty, supplies per-item overrides.
template <typename Scalar>
BatchObjective<Scalar> batch_loss_and_grads(std::span<const ImageEmbeddings* const> batch,
                                            const ModelParams<Scalar>& params, const TextBank& text,
                                            const ModelConfig& cfg, Index n,
                                            std::span<const DiscreteChoices> frozen = {}, bool want_grads = true) {
  require(!batch.empty(), "batch_loss_and_grads: empty batch");
  require(frozen.empty() || frozen.size() == batch.size(), "batch_loss_and_grads: frozen choices size mismatch");
  cfg.validate(n);
  for (const auto* item : batch)
    require(item->labeled(), "batch_loss_and_grads: unlabeled item '" + item->id + "' in training batch");

  BatchObjective<Scalar> out;
  if (want_grads) out.grads = Gradients<Scalar>::zeros_like(params);
  auto& L = out.loss;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto r = image_objective<Scalar>(*batch[b], params, text, cfg, n, frozen.empty() ? nullptr : &frozen[b],
                                     want_grads);
    L.l_id += r.loss.l_id;
    L.l_ood += r.loss.l_ood;
    for (int s = 0; s < 3; ++s) {
      L.per_scale_ce[s] += r.loss.per_scale_ce[s];
      L.per_scale_neg_entropy[s] += r.loss.per_scale_neg_entropy[s];
    }
    if (want_grads) out.grads += r.grads;
    out.choices.push_back(std::move(r.choices));
  }
  const Scalar inv = Scalar(1) / Scalar(batch.size());
  L.l_id *= inv;
  L.l_ood *= inv;
  for (int s = 0; s < 3; ++s) {
    L.per_scale_ce[s] *= inv;
    L.per_scale_neg_entropy[s] *= inv;
  }
  L.total = L.l_id + L.l_ood;
  if (want_grads) out.grads *= inv;
  return out;
}

template <typename Scalar>
BatchObjective<Scalar> batch_loss_and_grads(std::span<const ImageEmbeddings> batch, const ModelParams<Scalar>& params,
                                            const TextBank& text, const ModelConfig& cfg, Index n,
                                            std::span<const DiscreteChoices> frozen = {}, bool want_grads = true) {
  std::vector<const ImageEmbeddings*> ptrs;
  for (const auto& item : batch) ptrs.push_back(&item);
  return batch_loss_and_grads<Scalar>(std::span<const ImageEmbeddings* const>(ptrs), params, text, cfg, n, frozen,
                                      want_grads);
}

}  // namespace hvl
