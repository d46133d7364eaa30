#include "support/fixtures.hpp"

#include "hvl/objective.hpp"

#include <doctest.h>

using namespace hvl;

namespace {

Vector<double> one_hot(Index C, Index c) {
  Vector<double> v = Vector<double>::Zero(C);
  v(c) = 1;
  return v;
}

Vector<double> unit(Index d, Index k, double scale = 1.0) { return scale * one_hot(d, k); }

// Central difference of the reference loss along one parameter coordinate,
// masks and selection frozen.
double reference_partial(const ref::Image& img, ref::Params p, const ref::Cols& text, const ref::Settings& s,
                         const ref::Frozen& frozen, char block, std::size_t row, std::size_t col, double h) {
  auto coord = [&](ref::Params& q) -> double& {
    if (block == 'W') return q.W[row][col];
    if (block == '0') return q.b0[col][row];
    return q.b2[col][row];
  };
  const double saved = coord(p);
  coord(p) = saved + h;
  const double up = ref::image_loss(img, p, text, s, &frozen).total;
  coord(p) = saved - h;
  const double down = ref::image_loss(img, p, text, s, &frozen).total;
  return (up - down) / (2 * h);
}

ModelParams<double> moved(const ModelParams<double>& p, const Gradients<double>& dir, double eps) {
  return {p.W + eps * dir.dW, p.b0 + eps * dir.db0, p.b2 + eps * dir.db2};
}

double inner(const Gradients<double>& a, const Gradients<double>& b) {
  return (a.dW.array() * b.dW.array()).sum() + (a.db0.array() * b.db0.array()).sum() +
         (a.db2.array() * b.db2.array()).sum();
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("L_ID is zero for one-hot predictions at the label") {
  PredictionSet<double> pred;
  pred.p0 = pred.p1 = pred.p2 = one_hot(4, 2);
  CHECK(loss_id(pred, 2) == 0.0);
}

TEST_CASE("L_ID with uniform p0 and one-hot p1, p2 is ln 4") {
  PredictionSet<double> pred;
  pred.p0 = Vector<double>::Constant(4, 0.25);
  pred.p1 = pred.p2 = one_hot(4, 1);
  CHECK(loss_id(pred, 1) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("cross-entropy floors the probability at 1e-12") {
  CHECK(cross_entropy(one_hot(3, 0), 1) == doctest::Approx(-std::log(1e-12)).epsilon(1e-15));
}

TEST_CASE("label outside [0, C) is a contract violation") {
  PredictionSet<double> pred;
  pred.p0 = pred.p1 = pred.p2 = one_hot(3, 0);
  CHECK_THROWS_AS(loss_id(pred, 3), ContractViolation);
  CHECK_THROWS_AS(loss_id(pred, -1), ContractViolation);

  Rng rng(1);
  auto w = fixtures::random_world(rng, 4, 3, 1, 1);
  w.items[0].label = 3;
  CHECK_THROWS_AS(image_objective<double>(w.items[0], w.params, w.text, ModelConfig{}, 1), ContractViolation);
}

TEST_CASE("L_OOD is -3 ln 4 when every pseudo-OOD prediction is uniform") {
  // zero embeddings have zero cosine with every class, hence uniform predictions
  PseudoOodSet<double> set;
  set.q0 = set.q1 = set.q2 = Matrix<double>::Zero(4, 3);
  ScaleText<double> tx;
  tx.t0 = tx.t1 = tx.t2 = Matrix<double>::Identity(4, 4);
  const double l = loss_ood(set, tx, AlignmentConfig{});
  CHECK(l == doctest::Approx(-3 * std::log(4.0)).epsilon(1e-15));
  CHECK(l == doctest::Approx(-4.1589).epsilon(1e-4));
}

TEST_CASE("L_OOD is 0 when every pseudo-OOD prediction is one-hot") {
  PseudoOodSet<double> set;
  set.q0 = set.q1 = set.q2 = unit(4, 1).replicate(1, 2);
  ScaleText<double> tx;
  tx.t0 = tx.t1 = tx.t2 = Matrix<double>::Identity(4, 4);
  AlignmentConfig cfg;
  cfg.tau = 1e-3;  // exp(-1000) underflows to exactly 0
  CHECK(std::abs(loss_ood(set, tx, cfg)) <= 1e-300);
}

TEST_CASE("losses equal the reference evaluator on random fixtures") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    auto w = fixtures::random_small_world(rng);
    ModelConfig cfg;
    cfg.alignment.tau = trial % 2 ? 0.01 : 0.05 + rng.uniform();
    cfg.alignment.renormalize_aggregates = trial % 5 == 0;
    cfg.K = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(4 * w.n * w.n)));
    cfg.lambda_ood = trial % 7 == 0 ? 0.5 : 1.0;
    const auto r = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n, nullptr, false);
    const auto expected = ref::image_loss(fixtures::to_ref(w.items[0]), fixtures::to_ref(w.params),
                                          fixtures::to_cols(w.text.t), fixtures::to_ref(cfg, w.n));
    CHECK(r.loss.l_id == doctest::Approx(expected.l_id).epsilon(1e-12));
    CHECK(r.loss.l_ood == doctest::Approx(expected.l_ood).epsilon(1e-12));
    const double lnC = std::log(double(w.C));
    CHECK(r.loss.l_ood <= 0.0);
    CHECK(r.loss.l_ood >= -3 * lnC * cfg.lambda_ood - 1e-12);
  }
}

TEST_CASE("stationary fixture: saturated predictions and maximal pseudo-OOD entropy give no gradient") {
  // d = C = 3, orthonormal text. Global, mid and two high patches point at the
  // label; the other two high patches are zero, so they are uniform (maximal
  // entropy), have the largest entropy gain and are the selected pseudo-OOD.
  const Index d = 3, C = 3, n = 1;
  TextBank text{Matrix<double>::Identity(d, C)};
  ImageEmbeddings img;
  img.id = "stationary";
  img.label = 0;
  img.global = unit(d, 0, 2.0);
  img.mid = unit(d, 0, 1.5);
  img.high = Matrix<double>::Zero(d, 4);
  img.high.col(0) = unit(d, 0);
  img.high.col(3) = unit(d, 0, 3.0);
  ModelConfig cfg;
  cfg.K = 2;
  const auto params = zero_params<double>(d, C);
  const auto r = image_objective<double>(img, params, text, cfg, n);
  REQUIRE(r.choices.selection.has_value());
  CHECK(*r.choices.selection == std::vector<Index>{1, 2});
  CHECK(r.loss.per_scale_ce[0] <= 1e-12);
  CHECK(r.loss.l_ood == doctest::Approx(-3 * std::log(3.0)).epsilon(1e-12));
  CHECK(std::sqrt(r.grads.squared_norm()) <= 1e-8);
}

TEST_CASE("single-item batch equals the unbatched objective") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = fixtures::random_small_world(rng);
    ModelConfig cfg;
    cfg.K = 1;
    const auto single = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n);
    const auto batch = batch_loss_and_grads<double>(std::span<const ImageEmbeddings>(w.items), w.params, w.text, cfg, w.n);
    CHECK(batch.loss.total == single.loss.total);
    CHECK(batch.loss.l_id == single.loss.l_id);
    CHECK(batch.grads.dW == single.grads.dW);
    CHECK(batch.grads.db0 == single.grads.db0);
    CHECK(batch.grads.db2 == single.grads.db2);
  }
}

TEST_CASE("batch loss is the mean of per-item losses and total = l_id + l_ood exactly") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto w = fixtures::random_world(rng, 5, 3, 2, 1 + static_cast<Index>(rng.below(5)));
    ModelConfig cfg;
    cfg.K = 2;
    const auto b = batch_loss_and_grads<double>(std::span<const ImageEmbeddings>(w.items), w.params, w.text, cfg, w.n);
    CHECK(b.loss.total == b.loss.l_id + b.loss.l_ood);
    double sum = 0;
    for (const auto& item : w.items)
      sum += image_objective<double>(item, w.params, w.text, cfg, w.n, nullptr, false).loss.total;
    CHECK(b.loss.total == doctest::Approx(sum / double(w.items.size())).epsilon(1e-13));
  }
}

TEST_CASE("unlabeled item in a training batch is a contract violation") {
  Rng rng(5);
  auto w = fixtures::random_world(rng, 4, 2, 1, 3);
  w.items[1].label = -1;
  CHECK_THROWS_AS(batch_loss_and_grads<double>(std::span<const ImageEmbeddings>(w.items), w.params, w.text,
                                               ModelConfig{}, w.n),
                  ContractViolation);
}

TEST_CASE("analytic gradients match central differences of the reference loss") {
  Rng rng(6);
  const double h = 1e-6;
  for (int trial = 0; trial < 8; ++trial) {
    auto w = fixtures::random_world(rng, 8, 3, 2, 1);
    ModelConfig cfg;
    cfg.K = 2;
    cfg.alignment.tau = trial < 4 ? 0.2 : 0.05;
    cfg.ablations.disable_cross_scale_fusion = trial == 5;
    cfg.ablations.disable_lower_scale_propagation = trial == 6;
    cfg.alignment.renormalize_aggregates = trial == 7;
    const auto r = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n);
    const auto img = fixtures::to_ref(w.items[0]);
    const auto p = fixtures::to_ref(w.params);
    const auto text = fixtures::to_cols(w.text.t);
    const auto s = fixtures::to_ref(cfg, w.n);
    const auto frozen = fixtures::to_ref(r.choices);
    double worst = 0;
    for (Index row = 0; row < 8; ++row) {
      for (Index col = 0; col < 8; ++col) {
        const double fd = reference_partial(img, p, text, s, frozen, 'W', row, col, h);
        worst = std::max(worst, std::abs(fd - r.grads.dW(row, col)) / (1e-4 + std::abs(fd)));
      }
      for (Index col = 0; col < 3; ++col) {
        const double fd0 = reference_partial(img, p, text, s, frozen, '0', row, col, h);
        const double fd2 = reference_partial(img, p, text, s, frozen, '2', row, col, h);
        worst = std::max(worst, std::abs(fd0 - r.grads.db0(row, col)) / (1e-4 + std::abs(fd0)));
        worst = std::max(worst, std::abs(fd2 - r.grads.db2(row, col)) / (1e-4 + std::abs(fd2)));
      }
    }
    CAPTURE(trial);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("frozen choices: the first-order model is accurate to second order") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = fixtures::random_world(rng, 6, 3, 2, 2);
    ModelConfig cfg;
    cfg.K = 2;
    cfg.alignment.tau = 0.1;
    const std::span<const ImageEmbeddings> batch(w.items);
    const auto base = batch_loss_and_grads<double>(batch, w.params, w.text, cfg, w.n);
    Gradients<double> dir{fixtures::gaussian(rng, 6, 6), fixtures::gaussian(rng, 6, 3), fixtures::gaussian(rng, 6, 3)};
    const double slope = inner(base.grads, dir);
    auto residual = [&](double eps) {
      const auto at = batch_loss_and_grads<double>(batch, moved(w.params, dir, eps), w.text, cfg, w.n, base.choices, false);
      return std::abs(at.loss.total - base.loss.total - eps * slope);
    };
    const double r1 = residual(1e-3), r2 = residual(1e-4);
    CAPTURE(r1);
    CAPTURE(r2);
    // O(eps^2): a tenfold smaller step shrinks the residual about a hundredfold
    CHECK(r2 <= 0.03 * r1 + 1e-11);
  }
}

TEST_CASE("recomputed choices: residuals stay second order unless a mask or selection flips") {
  Rng rng(8);
  int flips = 0, smooth = 0;
  for (int trial = 0; trial < 40; ++trial) {
    auto w = fixtures::random_world(rng, 6, 3, 2, 1);
    ModelConfig cfg;
    cfg.K = 2;
    cfg.alignment.tau = 0.1;
    const std::span<const ImageEmbeddings> batch(w.items);
    const auto base = batch_loss_and_grads<double>(batch, w.params, w.text, cfg, w.n);
    Gradients<double> dir{fixtures::gaussian(rng, 6, 6), fixtures::gaussian(rng, 6, 3), fixtures::gaussian(rng, 6, 3)};
    const double eps = 1e-2;
    const auto at = batch_loss_and_grads<double>(batch, moved(w.params, dir, eps), w.text, cfg, w.n, {}, false);
    const auto& a = at.choices[0];
    const auto& b = base.choices[0];
    const bool flipped = !(*a.mask_mid == *b.mask_mid).all() || !(*a.mask_high == *b.mask_high).all() ||
                         *a.selection != *b.selection;
    if (flipped) {
      ++flips;
      continue;
    }
    ++smooth;
    const auto frozen = batch_loss_and_grads<double>(batch, moved(w.params, dir, eps), w.text, cfg, w.n,
                                                     base.choices, false);
    CHECK(at.loss.total == frozen.loss.total);
  }
  CHECK(smooth > 0);
  MESSAGE("mask/selection flips excluded: " << flips);
}

TEST_CASE("b1 chain rule: when only the mid-scale text matters, db0 = db2") {
  // Global and high patches align exactly with the label's orthonormal text
  // column, so their predictions are saturated one-hots with vanishing
  // gradient. Mid patches sit between classes 0 and 1, so only CE(p1) has a
  // learning signal, and it reaches b0 and b2 only through t1.
  Rng rng(9);
  const Index d = 4, C = 3, n = 2;
  TextBank text{Matrix<double>::Identity(d, C)};
  ImageEmbeddings img;
  img.id = "mid-only";
  img.label = 0;
  img.global = unit(d, 0, 2.0);
  img.high = unit(d, 0).replicate(1, 16);
  img.mid.resize(d, 4);
  for (Index i = 0; i < 4; ++i) img.mid.col(i) = unit(d, 0) + unit(d, 1) + fixtures::gaussian_vec(rng, d, 0.02);
  ModelConfig cfg;
  cfg.ablations.disable_cross_scale_fusion = true;
  cfg.ablations.disable_ood_loss = true;
  const auto r = image_objective<double>(img, zero_params<double>(d, C), text, cfg, n);
  CHECK(r.grads.db0.norm() > 1e-3);
  CHECK((r.grads.db0 - r.grads.db2).norm() <= 1e-12 * r.grads.db0.norm());
}

TEST_CASE("lambda_ood scales the OOD term and disabling it zeroes it") {
  Rng rng(10);
  auto w = fixtures::random_world(rng, 5, 3, 2, 1);
  ModelConfig cfg;
  cfg.alignment.tau = 0.2;
  const auto one = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n);
  cfg.lambda_ood = 2.0;
  const auto two = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n, &one.choices);
  CHECK(two.loss.l_ood == doctest::Approx(2.0 * one.loss.l_ood).epsilon(1e-14));
  CHECK(two.loss.l_id == one.loss.l_id);
  cfg.ablations.disable_ood_loss = true;
  const auto none = image_objective<double>(w.items[0], w.params, w.text, cfg, w.n);
  CHECK(none.loss.l_ood == 0.0);
  CHECK(none.loss.total == none.loss.l_id);
}

TEST_CASE("gradients are finite and shaped like the parameters") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto w = fixtures::random_small_world(rng, 2);
    ModelConfig cfg;
    cfg.K = 1;
    const auto b = batch_loss_and_grads<double>(std::span<const ImageEmbeddings>(w.items), w.params, w.text, cfg, w.n);
    CHECK(b.grads.dW.rows() == w.d);
    CHECK(b.grads.dW.cols() == w.d);
    CHECK(b.grads.db0.cols() == w.C);
    CHECK(b.grads.dW.allFinite());
    CHECK(b.grads.db0.allFinite());
    CHECK(b.grads.db2.allFinite());
  }
}

}  // TEST_SUITE
