#pragma once

#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/objective.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hvl {

struct ScoredItem {
  std::string id;
  int label = -1;
  Index predicted = 0;
  double msp = 0;          // max component of p_id; higher means more ID-like
  Vector<double> p_id;     // (p0 + p1 + p2) / 3, possibly sub-normalized
};

/// Full forward pass (adapter, fusion, alignment, filtering) and MSP.
ScoredItem score_item(const ImageEmbeddings& item, const ModelParams<double>& params, const TextBank& text,
                      const ModelConfig& cfg, Index n);

/// Mann-Whitney AUROC with ID as the positive class; ties count one half.
/// Sort-and-rank, O(N log N).
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

struct Fpr95 {
  double fpr = 0;
  double threshold = 0;
};

/// threshold = the ceil(0.05 * |ID|)-th smallest ID score;
/// fpr = fraction of OOD scores >= threshold.
Fpr95 fpr95(std::span<const double> id_scores, std::span<const double> ood_scores);

struct EvalReport {
  std::optional<double> acc;  // absent without ID items
  std::optional<double> fpr95;
  std::optional<double> auroc;
  std::optional<double> threshold_used;
  Index id_items = 0;
  Index ood_items = 0;

  bool ood_metrics_present() const { return auroc.has_value(); }
};

/// Recomputes the report from per-item scores alone.
EvalReport report_from_scores(std::span<const ScoredItem> scores);

struct Evaluation {
  EvalReport report;
  std::vector<ScoredItem> scores;
};

Evaluation evaluate(std::span<const ImageEmbeddings> items, const ModelParams<double>& params, const TextBank& text,
                    const ModelConfig& cfg, Index n);

}  // namespace hvl
