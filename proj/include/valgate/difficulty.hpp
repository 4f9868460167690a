#pragma once

// Difficulty estimation from the initial state: score = F(s0), Difficult iff
// score <= tau. tau is calibrated on a validation split by maximizing Macro-F1.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "valgate/errors.hpp"
#include "valgate/metrics.hpp"
#include "valgate/value_head.hpp"

namespace valgate {

enum class Difficulty { easy, difficult };

inline std::string_view to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "difficult"; }

enum class CalibrationObjective { macro_f1 };

struct CalibrationMeta {
  std::string split = "val";
  std::string objective = "macro_f1";
  std::size_t sweep_size = 0;
  double objective_value = 0.0;
  bool fixed_override = false;
};

struct DifficultyModel {
  ValueHead head;
  double gamma = 0.99;
  std::size_t state_order_k = 1;
  std::optional<double> tau;
  std::optional<CalibrationMeta> calibration;
  nlohmann::json training = nlohmann::json::object();  // provenance only
  nlohmann::json val_stats = nlohmann::json::object();

  std::size_t feature_dim() const { return head.in_dim(); }

  void set_tau(double t) {
    if (!std::isfinite(t)) throw CalibrationError("tau must be finite");
    tau = t;
  }
};

template <class F>
concept ValueFunction = requires(const F& f, std::span<const double> x) {
  { f.in_dim() } -> std::convertible_to<std::size_t>;
  { f.forward(x) } -> std::convertible_to<double>;
};

struct Score {
  double raw = 0.0;
  double reported = 0.0;  // raw clamped to [0, 1]
};

/// One forward pass over the initial-state feature; nothing is generated.
template <ValueFunction F>
Score score_with(const F& value_fn, std::span<const double> h0_feature) {
  if (h0_feature.size() != value_fn.in_dim()) {
    throw ShapeError("score: feature has " + std::to_string(h0_feature.size()) +
                     " components, model expects " + std::to_string(value_fn.in_dim()));
  }
  const double raw = value_fn.forward(h0_feature);
  return {raw, std::clamp(raw, 0.0, 1.0)};
}

inline Score score(const DifficultyModel& model, std::span<const double> h0_feature) {
  return score_with(model.head, h0_feature);
}

inline Difficulty classify(double score, double tau) {
  return score <= tau ? Difficulty::difficult : Difficulty::easy;
}

inline Difficulty classify(const DifficultyModel& model, double score) {
  if (!model.tau) throw CalibrationError("model has no threshold; run calibration first");
  return classify(score, *model.tau);
}

struct CalibrationResult {
  double tau = 0.0;
  double objective_value = 0.0;
  std::size_t sweep_size = 0;
};

/// Candidate thresholds in ascending order: a sentinel below the minimum,
/// midpoints between consecutive distinct scores, a sentinel above the maximum.
inline std::vector<double> candidate_thresholds(std::span<const double> scores) {
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> out;
  if (sorted.empty()) return out;
  out.reserve(sorted.size() + 1);
  out.push_back(sorted.front() - (1.0 + std::abs(sorted.front())));
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    double mid = sorted[i - 1] + (sorted[i] - sorted[i - 1]) / 2.0;
    // adjacent doubles: keep the partition {<= lower} intact
    if (mid >= sorted[i]) mid = sorted[i - 1];
    out.push_back(mid);
  }
  out.push_back(sorted.back() + (1.0 + std::abs(sorted.back())));
  return out;
}

/// Sweeps candidate_thresholds and returns the tau maximizing Macro-F1 of
/// "hard iff score <= tau"; ties go to the smaller tau. O(n log n).
inline CalibrationResult calibrate_tau(std::span<const double> scores, const std::vector<bool>& hard_labels,
                                       CalibrationObjective objective = CalibrationObjective::macro_f1) {
  (void)objective;  // Macro-F1 is the only objective
  if (scores.size() != hard_labels.size()) throw ContractError("scores and labels differ in length");
  for (double s : scores) {
    if (!std::isfinite(s)) throw CalibrationError("calibration scores must be finite");
  }
  const std::size_t n_hard = static_cast<std::size_t>(std::count(hard_labels.begin(), hard_labels.end(), true));
  const std::size_t n_easy = hard_labels.size() - n_hard;
  if (n_hard == 0 || n_easy == 0) {
    throw CalibrationError("calibration needs at least one hard and one easy question");
  }
  const std::vector<double> thresholds = candidate_thresholds(scores);

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  CalibrationResult best{thresholds.front(), -1.0, thresholds.size()};
  ConfusionSummary c{0, 0, n_easy, n_hard};  // everything predicted easy
  std::size_t next = 0;
  for (double tau : thresholds) {
    while (next < order.size() && scores[order[next]] <= tau) {
      if (hard_labels[order[next]]) {
        --c.fn;
        ++c.tp;
      } else {
        --c.tn;
        ++c.fp;
      }
      ++next;
    }
    const double value = macro_f1(c);
    if (value > best.objective_value) {
      best.tau = tau;
      best.objective_value = value;
    }
  }
  return best;
}

inline CalibrationResult calibrate(DifficultyModel& model, std::span<const double> val_scores,
                                   const std::vector<bool>& val_hard_labels, std::string split = "val") {
  const CalibrationResult r = calibrate_tau(val_scores, val_hard_labels);
  model.set_tau(r.tau);
  model.calibration = CalibrationMeta{std::move(split), "macro_f1", r.sweep_size, r.objective_value, false};
  return r;
}

// ---------------------------------------------------------------------------
// Model bundle: head.json + head.bin + calibration.json (once calibrated)

inline constexpr std::string_view kCalibrationFile = "calibration.json";

inline void save_model(const DifficultyModel& model, const std::filesystem::path& dir) {
  nlohmann::json meta = {{"gamma", model.gamma},
                         {"state_order_k", model.state_order_k},
                         {"training", model.training}};
  save_head(model.head, dir, meta);
  const auto cal_path = dir / kCalibrationFile;
  if (model.tau) {
    nlohmann::json cal = {{"tau", *model.tau},
                          {"gamma", model.gamma},
                          {"state_order_k", model.state_order_k},
                          {"objective", model.calibration ? model.calibration->objective : "fixed"},
                          {"val_stats", model.val_stats}};
    if (model.calibration) {
      cal["split"] = model.calibration->split;
      cal["sweep_size"] = model.calibration->sweep_size;
      cal["objective_value"] = model.calibration->objective_value;
      cal["fixed_override"] = model.calibration->fixed_override;
    }
    detail::write_file(cal_path, cal.dump(2) + "\n");
  } else {
    std::error_code ec;
    std::filesystem::remove(cal_path, ec);
  }
}

inline DifficultyModel load_model(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / kHeadHeaderFile)) {
    throw IoError("not a model bundle (missing head.json): " + dir.string());
  }
  LoadedHead loaded = load_head(dir);
  DifficultyModel model;
  model.head = std::move(loaded.head);
  try {
    model.gamma = loaded.metadata.at("gamma").get<double>();
    model.state_order_k = loaded.metadata.at("state_order_k").get<std::size_t>();
    model.training = loaded.metadata.value("training", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError((dir / kHeadHeaderFile).string() + ": " + e.what());
  }
  const auto cal_path = dir / kCalibrationFile;
  if (std::filesystem::exists(cal_path)) {
    try {
      const auto cal = nlohmann::json::parse(detail::read_file(cal_path));
      model.set_tau(cal.at("tau").get<double>());
      model.val_stats = cal.value("val_stats", nlohmann::json::object());
      CalibrationMeta meta;
      meta.split = cal.value("split", "val");
      meta.objective = cal.value("objective", "macro_f1");
      meta.sweep_size = cal.value("sweep_size", std::size_t{0});
      meta.objective_value = cal.value("objective_value", 0.0);
      meta.fixed_override = cal.value("fixed_override", false);
      model.calibration = meta;
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(cal_path.string() + ": " + e.what());
    }
  }
  return model;
}

}  // namespace valgate
