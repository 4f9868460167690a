#pragma once

// Glue shared by the command-line tool and the acceptance suite: presets,
// per-question scoring, split evaluation, and joining candidates to features.

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "valgate/difficulty.hpp"
#include "valgate/metrics.hpp"
#include "valgate/oracle_sim.hpp"
#include "valgate/routing.hpp"
#include "valgate/td_trainer.hpp"
#include "valgate/trajectory_store.hpp"

namespace valgate {

struct Preset {
  std::string name;
  std::size_t n_questions = 200;
  std::size_t k_rollouts = 8;
  BenchmarkFamily family;
  TDConfig train;
};

/// Desk-scale benchmark settings. "small" is for smoke runs, "default" is the
/// 500-question configuration.
inline Preset preset(std::string_view name) {
  Preset p;
  p.name = std::string(name);
  p.train.hidden_units = 64;
  p.train.batch_steps = 64;
  p.train.epochs = 30;
  p.train.early_stop_tol = 0.0;
  if (name == "small") {
    p.n_questions = 200;
    p.k_rollouts = 8;
  } else if (name == "default") {
    p.n_questions = 500;
    p.k_rollouts = 8;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected small or default)");
  }
  return p;
}

/// The question-only feature of a record (taken from its lowest-index rollout).
inline std::vector<double> question_feature(const QuestionRecord& rec, std::size_t k) {
  if (rec.rollouts.empty()) throw DataError(rec.question_id + ": no rollouts");
  const auto it = std::min_element(rec.rollouts.begin(), rec.rollouts.end(),
                                   [](const auto& a, const auto& b) { return a.rollout_index < b.rollout_index; });
  return initial_feature(*it, k);
}

inline std::vector<double> raw_scores(const DifficultyModel& model, std::span<const QuestionRecord> records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(score(model, question_feature(r, model.state_order_k)).raw);
  return out;
}

inline std::vector<bool> hard_labels(std::span<const QuestionRecord> records) {
  std::vector<bool> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.ground_truth_hard);
  return out;
}

struct SplitEvaluation {
  double roc_auc = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> easy_acc;
  std::optional<double> hard_acc;
  std::size_t n_easy = 0;
  std::size_t n_hard = 0;
  double tau = 0.0;
  ConfusionSummary confusion;

  nlohmann::json to_json() const {
    const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"roc_auc", roc_auc}, {"macro_f1", macro_f1}, {"easy_acc", opt(easy_acc)}, {"hard_acc", opt(hard_acc)},
            {"n_easy", n_easy},   {"n_hard", n_hard},     {"tau", tau}};
  }
};

inline SplitEvaluation evaluate_split(const DifficultyModel& model, std::span<const QuestionRecord> records) {
  if (!model.tau) throw CalibrationError("evaluation needs a calibrated threshold");
  const auto scores = raw_scores(model, records);
  const auto labels = hard_labels(records);
  std::vector<bool> predicted(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) predicted[i] = classify(model, scores[i]) == Difficulty::difficult;
  SplitEvaluation ev;
  ev.tau = *model.tau;
  ev.roc_auc = value_auc(scores, labels);
  ev.confusion = confusion(predicted, labels);
  ev.macro_f1 = macro_f1(ev.confusion);
  const auto acc = class_accuracies(ev.confusion);
  ev.easy_acc = acc.easy;
  ev.hard_acc = acc.hard;
  ev.n_hard = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  ev.n_easy = labels.size() - ev.n_hard;
  return ev;
}

/// Pairs each record with its candidate set; every record must have one.
inline std::vector<RoutingItem> routing_items(const DifficultyModel& model, std::span<const QuestionRecord> records,
                                              std::span<const CandidateSet> candidates) {
  std::map<std::string, const CandidateSet*> by_id;
  for (const auto& c : candidates) by_id[c.question_id] = &c;
  std::vector<RoutingItem> items;
  for (const auto& r : records) {
    auto it = by_id.find(r.question_id);
    if (it == by_id.end()) throw DataError("no candidate set for question " + r.question_id);
    if (!it->second->gold_answer) throw DataError("candidate set for " + r.question_id + " has no gold_answer");
    items.push_back({r.question_id, question_feature(r, model.state_order_k), *it->second, *it->second->gold_answer});
  }
  return items;
}

inline std::vector<QuestionRecord> select_split(std::span<const QuestionRecord> records, std::string_view split) {
  if (split == "all") return {records.begin(), records.end()};
  return filter_split(records, parse_split(split));
}

}  // namespace valgate
