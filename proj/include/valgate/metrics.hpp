#pragma once

// Difficulty-classification metrics. The positive class is Hard throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "valgate/errors.hpp"

namespace valgate {

struct ConfusionSummary {
  std::size_t tp = 0;  // hard, predicted hard
  std::size_t fp = 0;  // easy, predicted hard
  std::size_t tn = 0;  // easy, predicted easy
  std::size_t fn = 0;  // hard, predicted easy

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionSummary&, const ConfusionSummary&) = default;
};

inline ConfusionSummary confusion(const std::vector<bool>& predicted_hard,
                                  const std::vector<bool>& hard_labels) {
  if (predicted_hard.size() != hard_labels.size()) {
    throw ContractError("predictions and labels differ in length (" +
                        std::to_string(predicted_hard.size()) + " vs " +
                        std::to_string(hard_labels.size()) + ")");
  }
  if (hard_labels.empty()) throw ContractError("no predictions to score");
  ConfusionSummary c;
  for (std::size_t i = 0; i < hard_labels.size(); ++i) {
    if (hard_labels[i]) {
      predicted_hard[i] ? ++c.tp : ++c.fn;
    } else {
      predicted_hard[i] ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

/// F1 for one class; 0 when the class is absent from predictions and labels.
inline double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
}

struct ClassF1 {
  double easy = 0.0;
  double hard = 0.0;
};

inline ClassF1 per_class_f1(const ConfusionSummary& c) {
  return {f1_score(c.tn, c.fn, c.fp), f1_score(c.tp, c.fp, c.fn)};
}

inline double macro_f1(const ConfusionSummary& c) {
  const ClassF1 f = per_class_f1(c);
  return (f.easy + f.hard) / 2.0;
}

inline double macro_f1(const std::vector<bool>& predicted_hard, const std::vector<bool>& hard_labels) {
  return macro_f1(confusion(predicted_hard, hard_labels));
}

/// Per-class recall. A class missing from the labels yields nullopt.
struct ClassAccuracies {
  std::optional<double> easy;
  std::optional<double> hard;
};

inline ClassAccuracies class_accuracies(const ConfusionSummary& c) {
  ClassAccuracies a;
  if (c.tn + c.fp > 0) a.easy = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  if (c.tp + c.fn > 0) a.hard = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return a;
}

inline ClassAccuracies class_accuracies(const std::vector<bool>& predicted_hard,
                                        const std::vector<bool>& hard_labels) {
  return class_accuracies(confusion(predicted_hard, hard_labels));
}

/// Mann-Whitney ROC-AUC for hardness-oriented scores (higher means harder):
/// the fraction of (hard, easy) pairs with the hard item scored higher, ties
/// counted one half. Computed from doubled mid-ranks so the result is exact.
inline double roc_auc(std::span<const double> hardness, const std::vector<bool>& hard_labels) {
  const std::size_t n = hardness.size();
  if (n != hard_labels.size()) throw ContractError("scores and labels differ in length");
  for (double s : hardness) {
    if (std::isnan(s)) throw ContractError("roc_auc: NaN score");
  }
  const std::size_t n_hard = static_cast<std::size_t>(std::count(hard_labels.begin(), hard_labels.end(), true));
  const std::size_t n_easy = n - n_hard;
  if (n_hard == 0 || n_easy == 0) {
    throw UndefinedMetricError("roc_auc is undefined unless both classes are present");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return hardness[a] < hardness[b]; });

  // Sum over hard items of twice their (1-based, tie-averaged) rank.
  std::uint64_t hard_rank_x2 = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && hardness[order[j + 1]] == hardness[order[i]]) ++j;
    const std::uint64_t rank_x2 = (i + 1) + (j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (hard_labels[order[k]]) hard_rank_x2 += rank_x2;
    }
    i = j + 1;
  }
  const std::uint64_t u_x2 = hard_rank_x2 - static_cast<std::uint64_t>(n_hard) * (n_hard + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(n_hard) * static_cast<double>(n_easy));
}

/// ROC-AUC for value estimates, where a LOWER value means a harder question.
inline double value_auc(std::span<const double> values, const std::vector<bool>& hard_labels) {
  std::vector<double> negated(values.size());
  std::transform(values.begin(), values.end(), negated.begin(), [](double v) { return -v; });
  return roc_auc(negated, hard_labels);
}

}  // namespace valgate
