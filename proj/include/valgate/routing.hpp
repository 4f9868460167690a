#pragma once

// Difficulty-aware routing over pre-recorded candidates. Easy questions take
// the direct answer; Difficult ones take Self-Consistency (majority vote),
// Best-of-N (max P(true)) or Self-Refine (last refinement).

#include <algorithm>
#include <cctype>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "valgate/difficulty.hpp"
#include "valgate/errors.hpp"

namespace valgate {

struct Candidate {
  std::string answer;
  std::optional<double> p_true;
  std::size_t token_count = 0;
  std::size_t chain_index = 0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct CandidateSet {
  std::string question_id;
  Candidate direct_answer;
  std::vector<Candidate> cot_candidates;
  std::vector<Candidate> refine_chain;
  std::optional<std::string> gold_answer;

  const Candidate& direct() const { return direct_answer; }
  std::span<const Candidate> cot() const { return cot_candidates; }
  std::span<const Candidate> refine() const { return refine_chain; }

  friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

/// Read access to one question's candidates; lets tests observe which parts a
/// routing decision touches.
template <class S>
concept CandidateSource = requires(const S& s) {
  { s.direct() } -> std::convertible_to<const Candidate&>;
  { s.cot() } -> std::convertible_to<std::span<const Candidate>>;
  { s.refine() } -> std::convertible_to<std::span<const Candidate>>;
};

enum class Strategy { sc, bon, sr };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::sc: return "sc";
    case Strategy::bon: return "bon";
    case Strategy::sr: return "sr";
  }
  return "sc";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "sc") return Strategy::sc;
  if (s == "bon") return Strategy::bon;
  if (s == "sr") return Strategy::sr;
  throw ConfigError("unknown strategy '" + std::string(s) + "' (expected sc, bon or sr)");
}

/// Trim surrounding whitespace and fold ASCII case.
inline std::string normalize_answer(std::string_view a) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!a.empty() && is_space(static_cast<unsigned char>(a.front()))) a.remove_prefix(1);
  while (!a.empty() && is_space(static_cast<unsigned char>(a.back()))) a.remove_suffix(1);
  std::string out(a);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool answers_match(std::string_view a, std::string_view b) {
  return normalize_answer(a) == normalize_answer(b);
}

/// Most frequent answer (after normalization); ties go to the answer whose
/// first occurrence is earliest. Returns that first occurrence verbatim.
inline std::string sc_vote(std::span<const std::string> answers) {
  if (answers.empty()) throw ContractError("sc_vote: no answers");
  struct Tally {
    std::size_t first;
    std::size_t count;
  };
  std::unordered_map<std::string, Tally> tally;
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    auto key = normalize_answer(answers[i]);
    auto [it, inserted] = tally.try_emplace(key, Tally{i, 0});
    if (inserted) keys.push_back(std::move(key));
    ++it->second.count;
  }
  const Tally* best = nullptr;
  for (const auto& k : keys) {  // keys are in first-occurrence order
    const Tally& t = tally.at(k);
    if (!best || t.count > best->count) best = &t;
  }
  return answers[best->first];
}

/// Candidate with the highest p_true; ties go to the lowest chain_index.
inline const Candidate& bon_select(std::span<const Candidate> cands) {
  if (cands.empty()) throw ContractError("bon_select: no candidates");
  const Candidate* best = nullptr;
  for (const auto& c : cands) {
    if (!c.p_true) throw ContractError("bon_select: candidate " + std::to_string(c.chain_index) + " has no p_true");
    if (!best || *c.p_true > *best->p_true ||
        (*c.p_true == *best->p_true && c.chain_index < best->chain_index)) {
      best = &c;
    }
  }
  return *best;
}

inline const Candidate& sr_final(std::span<const Candidate> chain) {
  if (chain.empty()) throw ContractError("sr_final: empty refinement chain");
  return chain.back();
}

struct RouteOutcome {
  std::string answer;
  std::size_t tokens = 0;
  Difficulty decision = Difficulty::easy;
  double score = 0.0;
};

inline std::size_t total_tokens(std::span<const Candidate> cands) {
  std::size_t n = 0;
  for (const auto& c : cands) n += c.token_count;
  return n;
}

/// Applies an already-made decision. The Easy branch reads only direct().
template <CandidateSource S>
RouteOutcome route_decided(Difficulty decision, Strategy strategy, const S& cands) {
  RouteOutcome out;
  out.decision = decision;
  if (decision == Difficulty::easy) {
    const Candidate& d = cands.direct();
    out.answer = d.answer;
    out.tokens = d.token_count;
    return out;
  }
  switch (strategy) {
    case Strategy::sc: {
      const auto cot = cands.cot();
      if (cot.empty()) throw ContractError("self-consistency needs at least one CoT candidate");
      std::vector<std::string> answers;
      answers.reserve(cot.size());
      for (const auto& c : cot) answers.push_back(c.answer);
      out.answer = sc_vote(answers);
      out.tokens = total_tokens(cot);
      break;
    }
    case Strategy::bon: {
      const auto cot = cands.cot();
      if (cot.empty()) throw ContractError("best-of-N needs at least one CoT candidate");
      out.answer = bon_select(cot).answer;
      out.tokens = total_tokens(cot);
      break;
    }
    case Strategy::sr: {
      const auto chain = cands.refine();
      if (chain.empty()) throw ContractError("self-refine needs a non-empty refinement chain");
      out.answer = sr_final(chain).answer;
      out.tokens = total_tokens(chain);
      break;
    }
  }
  return out;
}

template <CandidateSource S>
RouteOutcome route(const DifficultyModel& model, std::span<const double> h0_feature, Strategy strategy,
                   const S& cands) {
  const Score s = score(model, h0_feature);
  RouteOutcome out = route_decided(classify(model, s.raw), strategy, cands);
  out.score = s.raw;
  return out;
}

// ---------------------------------------------------------------------------
// Batch evaluation

enum class RoutingMode { adaptive, always_direct, always_sample };

inline std::string_view to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::adaptive: return "adaptive";
    case RoutingMode::always_direct: return "always_direct";
    case RoutingMode::always_sample: return "always_sample";
  }
  return "adaptive";
}

inline RoutingMode parse_routing_mode(std::string_view s) {
  if (s == "adaptive") return RoutingMode::adaptive;
  if (s == "always_direct" || s == "direct") return RoutingMode::always_direct;
  if (s == "always_sample" || s == "sample") return RoutingMode::always_sample;
  throw ConfigError("unknown routing mode '" + std::string(s) + "'");
}

struct RoutingItem {
  std::string question_id;
  std::vector<double> h0_feature;
  CandidateSet candidates;
  std::string gold_answer;
};

struct QuestionOutcome {
  std::string question_id;
  double score = 0.0;
  Difficulty decision = Difficulty::easy;
  std::string answer;
  bool correct = false;
  std::size_t tokens = 0;
};

struct RoutingReport {
  Strategy strategy = Strategy::sc;
  RoutingMode mode = RoutingMode::adaptive;
  std::optional<double> tau;
  std::vector<QuestionOutcome> questions;
  double accuracy = 0.0;
  std::size_t total_tokens = 0;
  std::size_t n_easy = 0;
  std::size_t n_difficult = 0;

  nlohmann::json to_json(bool include_questions = true) const {
    nlohmann::json j = {{"strategy", std::string(to_string(strategy))},
                        {"mode", std::string(to_string(mode))},
                        {"tau", tau ? nlohmann::json(*tau) : nlohmann::json(nullptr)},
                        {"n_questions", questions.size()},
                        {"n_easy", n_easy},
                        {"n_difficult", n_difficult},
                        {"accuracy", accuracy},
                        {"total_tokens", total_tokens}};
    if (include_questions) {
      auto& qs = j["questions"] = nlohmann::json::array();
      for (const auto& q : questions) {
        qs.push_back({{"question_id", q.question_id},
                      {"score", q.score},
                      {"decision", std::string(to_string(q.decision))},
                      {"answer", q.answer},
                      {"correct", q.correct},
                      {"tokens", q.tokens}});
      }
    }
    return j;
  }
};

inline RoutingReport evaluate_routing(const DifficultyModel& model, std::span<const RoutingItem> items,
                                      Strategy strategy, RoutingMode mode = RoutingMode::adaptive) {
  if (mode == RoutingMode::adaptive && !model.tau) {
    throw CalibrationError("adaptive routing needs a calibrated threshold");
  }
  RoutingReport rep;
  rep.strategy = strategy;
  rep.mode = mode;
  rep.tau = model.tau;
  std::size_t n_correct = 0;
  for (const auto& item : items) {
    try {
      const double s = score(model, item.h0_feature).raw;
      Difficulty d = Difficulty::difficult;
      if (mode == RoutingMode::adaptive) d = classify(model, s);
      if (mode == RoutingMode::always_direct) d = Difficulty::easy;
      RouteOutcome r = route_decided(d, strategy, item.candidates);
      QuestionOutcome q{item.question_id, s, d, r.answer, answers_match(r.answer, item.gold_answer), r.tokens};
      n_correct += q.correct ? 1 : 0;
      rep.total_tokens += q.tokens;
      (d == Difficulty::easy ? rep.n_easy : rep.n_difficult) += 1;
      rep.questions.push_back(std::move(q));
    } catch (const ContractError& e) {
      throw ContractError("question " + item.question_id + ": " + e.what());
    }
  }
  rep.accuracy = items.empty() ? 0.0 : static_cast<double>(n_correct) / static_cast<double>(items.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Candidate file: JSON-Lines, one CandidateSet per line

inline nlohmann::json to_json(const Candidate& c) {
  return {{"answer", c.answer},
          {"p_true", c.p_true ? nlohmann::json(*c.p_true) : nlohmann::json(nullptr)},
          {"token_count", c.token_count},
          {"chain_index", c.chain_index}};
}

inline nlohmann::json to_json(const CandidateSet& s) {
  nlohmann::json j = {{"question_id", s.question_id}, {"direct_answer", to_json(s.direct_answer)}};
  auto& cot = j["cot_candidates"] = nlohmann::json::array();
  for (const auto& c : s.cot_candidates) cot.push_back(to_json(c));
  auto& chain = j["refine_chain"] = nlohmann::json::array();
  for (const auto& c : s.refine_chain) chain.push_back(to_json(c));
  j["gold_answer"] = s.gold_answer ? nlohmann::json(*s.gold_answer) : nlohmann::json(nullptr);
  return j;
}

inline Candidate candidate_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> allowed{"answer", "p_true", "token_count", "chain_index"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError("candidate has unknown field '" + key + "'");
    }
  }
  Candidate c;
  c.answer = j.at("answer").get<std::string>();
  if (j.contains("p_true") && !j.at("p_true").is_null()) {
    const double p = j.at("p_true").get<double>();
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p_true outside [0, 1]");
    c.p_true = p;
  }
  if (!j.at("token_count").is_number_unsigned() && !(j.at("token_count").is_number_integer() && j.at("token_count").get<long long>() >= 0)) {
    throw ValidationError("token_count must be a non-negative integer");
  }
  c.token_count = j.at("token_count").get<std::size_t>();
  c.chain_index = j.value("chain_index", std::size_t{0});
  return c;
}

inline CandidateSet candidate_set_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> allowed{"question_id", "direct_answer", "cot_candidates", "refine_chain",
                                                "gold_answer"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError("candidate set has unknown field '" + key + "'");
    }
  }
  CandidateSet s;
  s.question_id = j.at("question_id").get<std::string>();
  if (s.question_id.empty()) throw ValidationError("candidate set with empty question_id");
  s.direct_answer = candidate_from_json(j.at("direct_answer"));
  for (const auto& c : j.value("cot_candidates", nlohmann::json::array())) s.cot_candidates.push_back(candidate_from_json(c));
  for (const auto& c : j.value("refine_chain", nlohmann::json::array())) s.refine_chain.push_back(candidate_from_json(c));
  if (j.contains("gold_answer") && !j.at("gold_answer").is_null()) s.gold_answer = j.at("gold_answer").get<std::string>();
  return s;
}

inline void write_candidates(std::span<const CandidateSet> sets, const std::filesystem::path& path) {
  std::string out;
  for (const auto& s : sets) {
    out += to_json(s).dump();
    out += '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, out);
}

inline std::vector<CandidateSet> read_candidates(const std::filesystem::path& path) {
  std::istringstream in(detail::read_file(path));
  std::vector<CandidateSet> sets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      sets.push_back(candidate_set_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return sets;
}

}  // namespace valgate
