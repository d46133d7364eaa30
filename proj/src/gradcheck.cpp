#include "hvl/gradcheck.hpp"

#include "hvl/random.hpp"

#include <cmath>

namespace hvl {

void GradcheckSpec::validate() const {
  if (d < 1 || num_classes < 2 || n < 1 || batch < 1) throw ConfigError("gradcheck: need d >= 1, C >= 2, n >= 1, batch >= 1");
  if (K < 1 || K > 4 * n * n) throw ConfigError("gradcheck: K outside [1, (2n)^2]");
  if (!(tau > 0) || !(step > 0) || !(tolerance > 0)) throw ConfigError("gradcheck: tau, step, tolerance must be > 0");
}

GradcheckFixture random_fixture(const GradcheckSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  auto gaussian = [&](Index rows, Index cols, double sigma) {
    Matrix<double> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
    return m;
  };
  GradcheckFixture f;
  f.n = spec.n;
  f.text.t = gaussian(spec.d, spec.num_classes, 1.0);
  for (Index b = 0; b < spec.batch; ++b) {
    ImageEmbeddings img;
    img.id = "gc_" + std::to_string(b);
    img.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
    img.global = gaussian(spec.d, 1, 1.0);
    img.mid = gaussian(spec.d, spec.n * spec.n, 1.0);
    img.high = gaussian(spec.d, 4 * spec.n * spec.n, 1.0);
    f.items.push_back(std::move(img));
  }
  f.params.W = gaussian(spec.d, spec.d, 0.3);
  f.params.b0 = gaussian(spec.d, spec.num_classes, 0.3);
  f.params.b2 = gaussian(spec.d, spec.num_classes, 0.3);
  f.cfg.alignment.tau = spec.tau;
  f.cfg.K = spec.K;
  return f;
}

GradcheckResult run_gradcheck(const GradcheckSpec& spec) {
  const GradcheckFixture f = random_fixture(spec);
  const auto base = batch_loss_and_grads<double>(f.items, f.params, f.text, f.cfg, f.n);
  Gradients<double> analytic = base.grads;
  if (spec.corrupt_gradient) analytic.db0(0, 0) = analytic.db0(0, 0) * 1.01 + 1e-3;

  GradcheckResult r;
  ModelParams<double> probe = f.params;
  // Per-item, per-term loss components at the probe point. The central
  // difference is taken term by term and summed afterwards, which avoids
  // rounding every evaluation to the magnitude of the total loss.
  auto terms_at = [&]() {
    std::vector<double> terms;
    for (std::size_t b = 0; b < f.items.size(); ++b) {
      const auto l = image_objective<double>(f.items[b], probe, f.text, f.cfg, f.n, &base.choices[b], false).loss;
      for (int s = 0; s < 3; ++s) terms.push_back(l.per_scale_ce[s]);
      if (!f.cfg.ablations.disable_ood_loss)
        for (int s = 0; s < 3; ++s) terms.push_back(f.cfg.lambda_ood * l.per_scale_neg_entropy[s]);
    }
    return terms;
  };
  auto central_difference = [&](double& coordinate) {
    const double saved = coordinate;
    coordinate = saved + spec.step;
    const auto up = terms_at();
    coordinate = saved - spec.step;
    const auto down = terms_at();
    coordinate = saved;
    double diff = 0;
    for (std::size_t t = 0; t < up.size(); ++t) diff += up[t] - down[t];
    return diff / (2.0 * spec.step) / double(f.items.size());
  };
  auto check_block = [&](const char* name, Matrix<double>& theta, const Matrix<double>& grad) {
    for (Index i = 0; i < theta.size(); ++i) {
      const double numeric = central_difference(theta.data()[i]);
      const double a = grad.data()[i];
      const double rel = std::abs(a - numeric) / (std::abs(numeric) + 1e-8);
      ++r.coordinates;
      if (rel > r.max_rel_error || r.worst_index < 0) {
        r.max_rel_error = std::max(r.max_rel_error, rel);
        r.worst_block = name;
        r.worst_index = i;
        r.worst_analytic = a;
        r.worst_numeric = numeric;
      }
    }
  };
  check_block("W", probe.W, analytic.dW);
  check_block("b0", probe.b0, analytic.db0);
  check_block("b2", probe.b2, analytic.db2);
  r.passed = r.max_rel_error <= spec.tolerance;
  return r;
}

}  // namespace hvl
