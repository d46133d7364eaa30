#include "hvl/detector.hpp"

#include "hvl/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace hvl {

ScoredItem score_item(const ImageEmbeddings& item, const ModelParams<double>& params, const TextBank& text,
                      const ModelConfig& cfg, Index n) {
  const auto state = build_hierarchy(item, params, n, !cfg.ablations.disable_cross_scale_fusion);
  const auto pred = predict(state, scale_text(text, params), cfg.alignment);

  ScoredItem out;
  out.id = item.id;
  out.label = item.label;
  out.p_id = (pred.p0 + pred.p1 + pred.p2) / 3.0;
  out.predicted = 0;
  for (Index c = 1; c < out.p_id.size(); ++c)
    if (out.p_id(c) > out.p_id(out.predicted)) out.predicted = c;
  out.msp = out.p_id(out.predicted);
  return out;
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require(!id_scores.empty() && !ood_scores.empty(), "auroc: both score lists must be nonempty");
  struct Entry {
    double score;
    bool id;
  };
  std::vector<Entry> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) all.push_back({s, true});
  for (double s : ood_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Rank sum of ID scores with midranks (ranks start at 1). Twice the rank is
  // an integer, so accumulate that to keep the sum exact.
  double twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double twice_mid = double(i + 1) + double(j);  // 2 * (i+1 + j) / 2
    for (std::size_t k = i; k < j; ++k)
      if (all[k].id) twice_rank_sum += twice_mid;
    i = j;
  }
  const double n_id = double(id_scores.size()), n_ood = double(ood_scores.size());
  const double u = twice_rank_sum / 2.0 - n_id * (n_id + 1.0) / 2.0;
  return u / (n_id * n_ood);
}

Fpr95 fpr95(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require(!id_scores.empty() && !ood_scores.empty(), "fpr95: both score lists must be nonempty");
  if (id_scores.size() < 20)
    std::cerr << "warning: fpr95 with only " << id_scores.size() << " ID scores is coarse\n";
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  std::sort(sorted.begin(), sorted.end());
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.05 * double(sorted.size()))));
  Fpr95 out;
  out.threshold = sorted[k - 1];
  const auto passed = std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s >= out.threshold; });
  out.fpr = double(passed) / double(ood_scores.size());
  return out;
}

EvalReport report_from_scores(std::span<const ScoredItem> scores) {
  EvalReport r;
  std::vector<double> id, ood;
  Index correct = 0;
  for (const auto& s : scores) {
    if (s.label >= 0) {
      id.push_back(s.msp);
      if (s.predicted == s.label) ++correct;
    } else {
      ood.push_back(s.msp);
    }
  }
  r.id_items = static_cast<Index>(id.size());
  r.ood_items = static_cast<Index>(ood.size());
  if (!id.empty()) r.acc = double(correct) / double(id.size());
  if (!id.empty() && !ood.empty()) {
    r.auroc = auroc(id, ood);
    const auto f = fpr95(id, ood);
    r.fpr95 = f.fpr;
    r.threshold_used = f.threshold;
  }
  return r;
}

Evaluation evaluate(std::span<const ImageEmbeddings> items, const ModelParams<double>& params, const TextBank& text,
                    const ModelConfig& cfg, Index n) {
  cfg.validate(n);
  Evaluation out;
  out.scores.reserve(items.size());
  for (const auto& item : items) out.scores.push_back(score_item(item, params, text, cfg, n));
  out.report = report_from_scores(out.scores);
  return out;
}

}  // namespace hvl
