#pragma once

// Synthetic absorbing Markov chains standing in for a language model: each
// state has an embedding (the fake hidden state), EOS states carry a reward.
// Exact values satisfy V(s) = R(s) at EOS and V(s) = gamma * E[V(s')] elsewhere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "valgate/errors.hpp"
#include "valgate/routing.hpp"
#include "valgate/trajectory_store.hpp"

namespace valgate {

struct ChainSpec {
  std::size_t start_state = 0;
  Eigen::MatrixXd transitions;  // row-stochastic, EOS rows absorbing
  std::vector<bool> terminal;
  std::vector<double> terminal_reward;  // 0 for non-terminal states
  Eigen::MatrixXd embeddings;           // [n_states x hidden_dim]
  std::uint64_t seed = 0;

  std::size_t n_states() const { return static_cast<std::size_t>(transitions.rows()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(embeddings.cols()); }
};

inline void validate_structure(const ChainSpec& spec) {
  const std::size_t n = spec.n_states();
  if (n < 2) throw ValidationError("chain needs at least 2 states");
  if (static_cast<std::size_t>(spec.transitions.cols()) != n) throw ShapeError("transition matrix is not square");
  if (spec.terminal.size() != n || spec.terminal_reward.size() != n) {
    throw ShapeError("terminal flags/rewards must have one entry per state");
  }
  if (static_cast<std::size_t>(spec.embeddings.rows()) != n || spec.embeddings.cols() == 0) {
    throw ShapeError("embeddings must be [n_states x hidden_dim] with hidden_dim > 0");
  }
  if (spec.start_state >= n) throw ValidationError("start_state out of range");
  if (!spec.embeddings.allFinite()) throw ValidationError("non-finite embedding");
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = spec.transitions.row(static_cast<Eigen::Index>(i));
    if (!row.allFinite() || row.minCoeff() < 0.0) throw ValidationError("row " + std::to_string(i) + " has invalid probabilities");
    if (std::abs(row.sum() - 1.0) > 1e-9) {
      throw ValidationError("row " + std::to_string(i) + " sums to " + std::to_string(row.sum()));
    }
    if (spec.terminal[i]) {
      if (std::abs(row(static_cast<Eigen::Index>(i)) - 1.0) > 1e-9) {
        throw ValidationError("terminal state " + std::to_string(i) + " is not absorbing");
      }
      const double r = spec.terminal_reward[i];
      if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("terminal reward of state " + std::to_string(i) + " outside [0, 1]");
    }
  }
}

/// Throws DivergenceError if some non-terminal state cannot reach EOS.
inline void check_absorbing(const ChainSpec& spec) {
  const std::size_t n = spec.n_states();
  std::vector<bool> reaches(n, false);
  std::queue<std::size_t> frontier;
  for (std::size_t i = 0; i < n; ++i) {
    if (spec.terminal[i]) {
      reaches[i] = true;
      frontier.push(i);
    }
  }
  if (frontier.empty()) throw DivergenceError("chain has no terminal state");
  while (!frontier.empty()) {
    const std::size_t j = frontier.front();
    frontier.pop();
    for (std::size_t i = 0; i < n; ++i) {
      if (!reaches[i] && spec.transitions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > 0.0) {
        reaches[i] = true;
        frontier.push(i);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!reaches[i]) throw DivergenceError("chain is not absorbing: state " + std::to_string(i) + " never reaches EOS");
  }
}

inline void validate(const ChainSpec& spec) {
  validate_structure(spec);
  check_absorbing(spec);
}

inline double bellman_residual(const ChainSpec& spec, double gamma, const Eigen::VectorXd& v) {
  double worst = 0.0;
  const Eigen::VectorXd backed = gamma * (spec.transitions * v);
  for (std::size_t i = 0; i < spec.n_states(); ++i) {
    const double target = spec.terminal[i] ? spec.terminal_reward[i] : backed(static_cast<Eigen::Index>(i));
    worst = std::max(worst, std::abs(v(static_cast<Eigen::Index>(i)) - target));
  }
  return worst;
}

/// Value iteration until the sup-norm update drops below `tolerance`.
inline Eigen::VectorXd exact_values(const ChainSpec& spec, double gamma, double tolerance = 1e-12,
                                    std::size_t max_iterations = 1'000'000) {
  validate_structure(spec);
  check_absorbing(spec);
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  const auto n = static_cast<Eigen::Index>(spec.n_states());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (spec.terminal[static_cast<std::size_t>(i)]) v(i) = spec.terminal_reward[static_cast<std::size_t>(i)];
  }
  Eigen::VectorXd next(n);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    next.noalias() = gamma * (spec.transitions * v);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (spec.terminal[static_cast<std::size_t>(i)]) next(i) = spec.terminal_reward[static_cast<std::size_t>(i)];
    }
    const double delta = (next - v).cwiseAbs().maxCoeff();
    v.swap(next);
    if (delta < tolerance) return v;
  }
  throw DivergenceError("value iteration did not converge in " + std::to_string(max_iterations) + " iterations");
}

/// Direct solve of (I - gamma P_nn) V_n = gamma P_nt R_t by partial-pivot LU.
inline Eigen::VectorXd solve_values_direct(const ChainSpec& spec, double gamma) {
  validate_structure(spec);
  check_absorbing(spec);
  const std::size_t n = spec.n_states();
  std::vector<Eigen::Index> live, eos;
  for (std::size_t i = 0; i < n; ++i) (spec.terminal[i] ? eos : live).push_back(static_cast<Eigen::Index>(i));
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (auto t : eos) v(t) = spec.terminal_reward[static_cast<std::size_t>(t)];
  if (live.empty()) return v;
  const auto m = static_cast<Eigen::Index>(live.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(m, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    for (Eigen::Index c = 0; c < m; ++c) a(r, c) -= gamma * spec.transitions(live[static_cast<std::size_t>(r)], live[static_cast<std::size_t>(c)]);
    for (auto t : eos) b(r) += gamma * spec.transitions(live[static_cast<std::size_t>(r)], t) * v(t);
  }
  const Eigen::VectorXd x = a.partialPivLu().solve(b);
  if (!x.allFinite()) throw DivergenceError("direct value solve produced non-finite values");
  for (Eigen::Index r = 0; r < m; ++r) v(live[static_cast<std::size_t>(r)]) = x(r);
  return v;
}

// ---------------------------------------------------------------------------
// Sampling

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct SampledWalk {
  HiddenTrajectory trajectory;
  std::vector<std::size_t> states;
};

/// n walks from start_state to absorption; walk i uses derive_seed(seed, i).
/// A walk longer than `step_cap` steps (default 10 * n_states) is an error.
inline std::vector<SampledWalk> sample_walks(const ChainSpec& spec, std::size_t n, std::uint64_t seed,
                                             std::size_t step_cap = 0, const std::string& question_id = "chain") {
  validate_structure(spec);
  if (n == 0) throw ContractError("sample_walks: n must be >= 1");
  if (step_cap == 0) step_cap = 10 * spec.n_states();
  const std::size_t d = spec.hidden_dim();
  std::vector<SampledWalk> out;
  out.reserve(n);
  for (std::size_t w = 0; w < n; ++w) {
    std::mt19937_64 rng(derive_seed(seed, w));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SampledWalk walk;
    std::size_t s = spec.start_state;
    walk.states.push_back(s);
    while (!spec.terminal[s]) {
      if (walk.states.size() >= step_cap) {
        throw DivergenceError("walk " + std::to_string(w) + " exceeded " + std::to_string(step_cap) +
                              " steps without absorption");
      }
      const double r = u(rng);
      double acc = 0.0;
      std::size_t next = spec.n_states() - 1;
      for (std::size_t j = 0; j < spec.n_states(); ++j) {
        const double p = spec.transitions(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j));
        if (p <= 0.0) continue;
        next = j;  // falls back to the last reachable state on round-off
        acc += p;
        if (r < acc) break;
      }
      s = next;
      walk.states.push_back(s);
    }
    HiddenTrajectory& t = walk.trajectory;
    t.question_id = question_id;
    t.rollout_index = w;
    t.hidden_dim = d;
    t.values.reserve(walk.states.size() * d);
    for (std::size_t st : walk.states) {
      for (std::size_t c = 0; c < d; ++c) {
        t.values.push_back(static_cast<float>(spec.embeddings(static_cast<Eigen::Index>(st), static_cast<Eigen::Index>(c))));
      }
    }
    t.terminal_reward = spec.terminal_reward[s];
    out.push_back(std::move(walk));
  }
  return out;
}

inline std::vector<HiddenTrajectory> sample_trajectories(const ChainSpec& spec, std::size_t n, std::uint64_t seed,
                                                         std::size_t step_cap = 0) {
  auto walks = sample_walks(spec, n, seed, step_cap);
  std::vector<HiddenTrajectory> out;
  out.reserve(walks.size());
  for (auto& w : walks) out.push_back(std::move(w.trajectory));
  return out;
}

// ---------------------------------------------------------------------------
// Random chains

inline Eigen::VectorXd random_unit_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
  do {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = g(rng);
  } while (v.norm() < 1e-12);
  return v.normalized();
}

struct RandomChainOptions {
  std::size_t n_states = 30;
  std::size_t hidden_dim = 16;
  std::size_t n_terminal = 0;    // 0: max(1, n_states / 5)
  std::size_t max_out_degree = 3;
  std::size_t forward_span = 0;  // 0: the guaranteed forward edge may jump anywhere ahead
  double back_edge_prob = 0.3;
  std::size_t alias_groups = 0;  // > 0: states share this many distinct embeddings
  std::uint64_t seed = 0;
};

/// States [0, n - n_terminal) are live, the rest are EOS; start is 0. Every live
/// state has an edge to a higher index, so the chain is absorbing.
inline ChainSpec random_chain(const RandomChainOptions& o) {
  if (o.n_states < 2) throw ContractError("random_chain: need at least 2 states");
  const std::size_t n = o.n_states;
  const std::size_t n_term = std::clamp<std::size_t>(o.n_terminal == 0 ? std::max<std::size_t>(1, n / 5) : o.n_terminal, 1, n - 1);
  const std::size_t n_live = n - n_term;
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> weight(0.2, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ChainSpec spec;
  spec.seed = o.seed;
  spec.transitions = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  spec.terminal.assign(n, false);
  spec.terminal_reward.assign(n, 0.0);
  for (std::size_t i = n_live; i < n; ++i) {
    spec.terminal[i] = true;
    spec.terminal_reward[i] = unit(rng);
    spec.transitions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
  }
  for (std::size_t i = 0; i < n_live; ++i) {
    const std::size_t hi = o.forward_span == 0 ? n - 1 : std::min(n - 1, i + o.forward_span);
    std::uniform_int_distribution<std::size_t> fwd(i + 1, hi);
    auto row = spec.transitions.row(static_cast<Eigen::Index>(i));
    row(static_cast<Eigen::Index>(fwd(rng))) += weight(rng);
    std::uniform_int_distribution<std::size_t> extra(0, o.max_out_degree > 0 ? o.max_out_degree - 1 : 0);
    const std::size_t n_extra = extra(rng);
    for (std::size_t e = 0; e < n_extra; ++e) {
      std::size_t j;
      if (unit(rng) < o.back_edge_prob) {
        j = std::uniform_int_distribution<std::size_t>(0, i)(rng);
      } else {
        j = fwd(rng);
      }
      row(static_cast<Eigen::Index>(j)) += weight(rng);
    }
    row /= row.sum();
  }
  spec.embeddings.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(o.hidden_dim));
  std::vector<Eigen::VectorXd> pool;
  if (o.alias_groups > 0) {
    for (std::size_t g = 0; g < o.alias_groups; ++g) pool.push_back(random_unit_vector(o.hidden_dim, rng));
  }
  for (std::size_t i = 0; i < n; ++i) {
    spec.embeddings.row(static_cast<Eigen::Index>(i)) =
        (pool.empty() ? random_unit_vector(o.hidden_dim, rng) : pool[i % pool.size()]).transpose();
  }
  return spec;
}

// ---------------------------------------------------------------------------
// ChainSpec JSON

inline nlohmann::json to_json(const ChainSpec& spec) {
  const auto n = static_cast<Eigen::Index>(spec.n_states());
  nlohmann::json p = nlohmann::json::array(), e = nlohmann::json::array();
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> prow(spec.transitions.row(i).begin(), spec.transitions.row(i).end());
    std::vector<double> erow(spec.embeddings.row(i).begin(), spec.embeddings.row(i).end());
    p.push_back(prow);
    e.push_back(erow);
  }
  std::vector<bool> term = spec.terminal;
  return {{"n_states", spec.n_states()},   {"start_state", spec.start_state}, {"transitions", p},
          {"terminal", term},              {"terminal_reward", spec.terminal_reward},
          {"embeddings", e},               {"seed", spec.seed}};
}

inline ChainSpec chain_spec_from_json(const nlohmann::json& j) {
  try {
    ChainSpec spec;
    const auto n = j.at("n_states").get<std::size_t>();
    spec.start_state = j.at("start_state").get<std::size_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    const auto& p = j.at("transitions");
    const auto& e = j.at("embeddings");
    if (p.size() != n || e.size() != n) throw ShapeError("transitions/embeddings must have n_states rows");
    const std::size_t d = e.at(0).size();
    spec.transitions.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    spec.embeddings.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
      if (p.at(i).size() != n || e.at(i).size() != d) throw ShapeError("ragged matrix in chain spec");
      for (std::size_t c = 0; c < n; ++c) spec.transitions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = p.at(i).at(c).get<double>();
      for (std::size_t c = 0; c < d; ++c) spec.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = e.at(i).at(c).get<double>();
    }
    spec.terminal = j.at("terminal").get<std::vector<bool>>();
    spec.terminal_reward = j.at("terminal_reward").get<std::vector<double>>();
    validate(spec);
    return spec;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("chain spec: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Benchmark family: one small chain per question

/// Each question is a chain  start -> (on-track | off-track) path of L steps
/// -> EOS(correct, reward 1) | EOS(wrong, reward 0), branching once at the
/// start with the question's success probability p. Path states are embedded
/// by (track, steps remaining) and shared across questions; the start state is
/// embedded as normalize(c + signal * (2p - 1) * d + noise * xi).
struct BenchmarkFamily {
  std::size_t hidden_dim = 16;
  double gamma = 0.99;
  double hard_fraction = 0.5;
  double easy_p_lo = 0.95, easy_p_hi = 1.0;
  double hard_p_lo = 0.0, hard_p_hi = 0.35;
  std::size_t min_length = 4, max_length = 12;
  double start_signal = 1.0;
  double start_noise = 0.3;
  std::size_t cot_length_factor = 4;
  double cot_boost = 0.4;      // p_cot = 1 - (1 - p) * (1 - cot_boost)
  double refine_decay = 0.75;  // step t of refinement fails w.p. (1 - p_cot) * decay^t
  std::size_t k_candidates = 10;
  std::size_t refine_steps = 5;
  std::size_t grading_rollouts = 3;
  double train_fraction = 0.5;
  double val_fraction = 0.1;
  std::string answer_alphabet = "ABCDE";

  nlohmann::json to_json() const {
    return {{"hidden_dim", hidden_dim},       {"gamma", gamma},
            {"hard_fraction", hard_fraction}, {"easy_p", {easy_p_lo, easy_p_hi}},
            {"hard_p", {hard_p_lo, hard_p_hi}}, {"length", {min_length, max_length}},
            {"start_signal", start_signal},   {"start_noise", start_noise},
            {"cot_length_factor", cot_length_factor}, {"cot_boost", cot_boost},
            {"refine_decay", refine_decay},   {"k_candidates", k_candidates},
            {"refine_steps", refine_steps},   {"grading_rollouts", grading_rollouts},
            {"train_fraction", train_fraction}, {"val_fraction", val_fraction}};
  }
};

struct OracleEntry {
  std::string question_id;
  double success_prob = 0.0;
  double v0 = 0.0;
  bool hard = false;
  Split split = Split::train;
  std::size_t path_length = 0;

  nlohmann::json to_json() const {
    return {{"question_id", question_id}, {"success_prob", success_prob}, {"v0", v0},
            {"hard", hard},               {"split", std::string(to_string(split))},
            {"path_length", path_length}};
  }
};

struct Benchmark {
  std::vector<QuestionRecord> records;
  std::vector<CandidateSet> candidates;
  std::vector<OracleEntry> oracle;
  BenchmarkFamily family;  // the mix actually used, after any regeneration
  std::size_t regenerations = 0;
};

struct PathEmbeddings {
  std::vector<Eigen::VectorXd> on_track;   // index r = steps remaining
  std::vector<Eigen::VectorXd> off_track;
  Eigen::VectorXd eos_correct, eos_wrong, start_center, start_direction;
};

inline PathEmbeddings make_path_embeddings(const BenchmarkFamily& f, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xE3BEDull));
  PathEmbeddings e;
  const std::size_t max_r = f.max_length * std::max<std::size_t>(1, f.cot_length_factor) + 1;
  for (std::size_t r = 0; r <= max_r; ++r) {
    e.on_track.push_back(random_unit_vector(f.hidden_dim, rng));
    e.off_track.push_back(random_unit_vector(f.hidden_dim, rng));
  }
  e.eos_correct = random_unit_vector(f.hidden_dim, rng);
  e.eos_wrong = random_unit_vector(f.hidden_dim, rng);
  e.start_center = random_unit_vector(f.hidden_dim, rng);
  Eigen::VectorXd d = random_unit_vector(f.hidden_dim, rng);
  d -= d.dot(e.start_center) * e.start_center;
  e.start_direction = d.normalized();
  return e;
}

/// Two-track chain of `length` transitions from start to EOS. State layout:
/// 0 start, 1..L-1 on-track (r = L-1..1), L..2L-2 off-track, 2L-1 EOS correct, 2L EOS wrong.
inline ChainSpec question_chain(double success_prob, std::size_t length, const Eigen::VectorXd& start_embedding,
                                const PathEmbeddings& emb) {
  if (length == 0) throw ContractError("question_chain: length must be >= 1");
  if (length >= emb.on_track.size()) throw ContractError("question_chain: length exceeds embedding table");
  const std::size_t L = length;
  const std::size_t n = 2 * L + 1;
  const auto idx = [](std::size_t i) { return static_cast<Eigen::Index>(i); };
  const std::size_t eos_ok = 2 * L - 1, eos_bad = 2 * L;
  const auto on = [&](std::size_t r) { return L - r; };            // r in [1, L-1]
  const auto off = [&](std::size_t r) { return L - 1 + (L - r); };  // r in [1, L-1]
  ChainSpec spec;
  spec.transitions = Eigen::MatrixXd::Zero(idx(n), idx(n));
  spec.terminal.assign(n, false);
  spec.terminal_reward.assign(n, 0.0);
  spec.embeddings.resize(idx(n), start_embedding.size());
  spec.terminal[eos_ok] = spec.terminal[eos_bad] = true;
  spec.terminal_reward[eos_ok] = 1.0;
  spec.transitions(idx(eos_ok), idx(eos_ok)) = 1.0;
  spec.transitions(idx(eos_bad), idx(eos_bad)) = 1.0;
  spec.embeddings.row(idx(eos_ok)) = emb.eos_correct.transpose();
  spec.embeddings.row(idx(eos_bad)) = emb.eos_wrong.transpose();
  spec.embeddings.row(0) = start_embedding.transpose();
  const std::size_t first_on = L == 1 ? eos_ok : on(L - 1);
  const std::size_t first_off = L == 1 ? eos_bad : off(L - 1);
  spec.transitions(0, idx(first_on)) += success_prob;
  spec.transitions(0, idx(first_off)) += 1.0 - success_prob;
  for (std::size_t r = L - 1; r >= 1 && L > 1; --r) {
    spec.embeddings.row(idx(on(r))) = emb.on_track[r].transpose();
    spec.embeddings.row(idx(off(r))) = emb.off_track[r].transpose();
    spec.transitions(idx(on(r)), idx(r == 1 ? eos_ok : on(r - 1))) = 1.0;
    spec.transitions(idx(off(r)), idx(r == 1 ? eos_bad : off(r - 1))) = 1.0;
  }
  return spec;
}

namespace detail {

inline std::string pick_wrong(const std::string& alphabet, char gold, std::mt19937_64& rng) {
  std::string others;
  for (char c : alphabet)
    if (c != gold) others.push_back(c);
  return std::string(1, others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)]);
}

inline Candidate sample_candidate(const ChainSpec& chain, std::uint64_t seed, std::size_t index, char gold,
                                  const std::string& alphabet, bool with_p_true) {
  const auto walk = sample_walks(chain, 1, seed)[0];
  std::mt19937_64 rng(derive_seed(seed, 0xCA7Dull));
  const bool correct = walk.trajectory.terminal_reward >= 1.0;
  Candidate c;
  c.answer = correct ? std::string(1, gold) : pick_wrong(alphabet, gold, rng);
  c.token_count = walk.trajectory.num_steps() - 1;
  c.chain_index = index;
  if (with_p_true) {
    // the judge is informative but imperfect
    std::uniform_real_distribution<double> p(correct ? 0.55 : 0.05, correct ? 0.95 : 0.6);
    c.p_true = p(rng);
  }
  return c;
}

inline Benchmark generate_benchmark(const BenchmarkFamily& f, std::size_t n_questions, std::size_t k_rollouts,
                                    std::uint64_t seed) {
  if (f.answer_alphabet.size() < 2) throw ConfigError("answer alphabet needs at least two symbols");
  if (f.min_length == 0 || f.max_length < f.min_length) throw ConfigError("invalid path length range");
  const PathEmbeddings emb = make_path_embeddings(f, seed);
  Benchmark b;
  b.family = f;

  std::vector<std::size_t> perm(n_questions);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 split_rng(derive_seed(seed, 0x5B117ull));
  std::shuffle(perm.begin(), perm.end(), split_rng);
  std::vector<Split> split_of(n_questions, Split::test);
  const auto n_train = static_cast<std::size_t>(std::llround(f.train_fraction * static_cast<double>(n_questions)));
  const auto n_val = static_cast<std::size_t>(std::llround(f.val_fraction * static_cast<double>(n_questions)));
  for (std::size_t i = 0; i < n_questions; ++i) {
    split_of[perm[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }

  const LabelingRule rule{f.grading_rollouts, 1.0};
  for (std::size_t q = 0; q < n_questions; ++q) {
    const std::uint64_t qseed = derive_seed(seed, q + 1);
    std::mt19937_64 rng(qseed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool hard_mode = unit(rng) < f.hard_fraction;
    const double p = hard_mode ? f.hard_p_lo + (f.hard_p_hi - f.hard_p_lo) * unit(rng)
                               : f.easy_p_lo + (f.easy_p_hi - f.easy_p_lo) * unit(rng);
    const std::size_t L = std::uniform_int_distribution<std::size_t>(f.min_length, f.max_length)(rng);
    const char gold = f.answer_alphabet[std::uniform_int_distribution<std::size_t>(0, f.answer_alphabet.size() - 1)(rng)];
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd xi(static_cast<Eigen::Index>(f.hidden_dim));
    for (Eigen::Index i = 0; i < xi.size(); ++i) xi(i) = g(rng) / std::sqrt(static_cast<double>(f.hidden_dim));
    Eigen::VectorXd start = emb.start_center + f.start_signal * (2.0 * p - 1.0) * emb.start_direction + f.start_noise * xi;
    start.normalize();

    std::string qid = "q" + std::to_string(q);
    while (qid.size() < 5) qid.insert(1, "0");
    const ChainSpec chain = question_chain(p, L, start, emb);
    const Eigen::VectorXd values = exact_values(chain, f.gamma);

    auto walks = sample_walks(chain, k_rollouts, derive_seed(qseed, 1), 0, qid);
    std::vector<HiddenTrajectory> rollouts;
    std::mt19937_64 ans_rng(derive_seed(qseed, 2));
    for (auto& w : walks) {
      HiddenTrajectory t = std::move(w.trajectory);
      t.split = split_of[q];
      t.answer_text = t.terminal_reward >= 1.0 ? std::string(1, gold) : pick_wrong(f.answer_alphabet, gold, ans_rng);
      rollouts.push_back(std::move(t));
    }
    QuestionRecord rec = make_question_record(qid, std::move(rollouts), rule);

    CandidateSet cs;
    cs.question_id = qid;
    cs.gold_answer = std::string(1, gold);
    cs.direct_answer = sample_candidate(chain, derive_seed(qseed, 3), 0, gold, f.answer_alphabet, false);
    const double p_cot = 1.0 - (1.0 - p) * (1.0 - f.cot_boost);
    const std::size_t cot_len = L * std::max<std::size_t>(1, f.cot_length_factor);
    const ChainSpec cot_chain = question_chain(p_cot, cot_len, start, emb);
    for (std::size_t k = 0; k < f.k_candidates; ++k) {
      cs.cot_candidates.push_back(sample_candidate(cot_chain, derive_seed(qseed, 100 + k), k, gold, f.answer_alphabet, true));
    }
    for (std::size_t t = 1; t <= f.refine_steps; ++t) {
      const double p_t = 1.0 - (1.0 - p_cot) * std::pow(f.refine_decay, static_cast<double>(t));
      const ChainSpec step_chain = question_chain(p_t, cot_len, start, emb);
      cs.refine_chain.push_back(sample_candidate(step_chain, derive_seed(qseed, 1000 + t), t - 1, gold, f.answer_alphabet, true));
    }

    b.oracle.push_back({qid, p, values(0), rec.ground_truth_hard, split_of[q], L});
    b.records.push_back(std::move(rec));
    b.candidates.push_back(std::move(cs));
  }
  return b;
}

}  // namespace detail

/// Generates a labeled benchmark. If every question comes out with the same
/// label, the difficulty mix is pushed back toward balance and regenerated.
inline Benchmark make_benchmark(const BenchmarkFamily& family, std::size_t n_questions, std::size_t k_rollouts,
                                std::uint64_t seed, std::size_t max_regenerations = 5) {
  if (n_questions < 2) throw ContractError("make_benchmark: need at least 2 questions");
  if (k_rollouts < family.grading_rollouts) {
    throw ContractError("make_benchmark: need at least " + std::to_string(family.grading_rollouts) + " rollouts per question");
  }
  BenchmarkFamily f = family;
  const BenchmarkFamily defaults;
  for (std::size_t attempt = 0;; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, 0xA77E0000ull + attempt);
    Benchmark b = detail::generate_benchmark(f, n_questions, k_rollouts, s);
    b.regenerations = attempt;
    const auto n_hard = static_cast<std::size_t>(std::count_if(b.oracle.begin(), b.oracle.end(), [](const auto& o) { return o.hard; }));
    if (n_hard != 0 && n_hard != n_questions) return b;
    if (attempt >= max_regenerations) {
      throw ValidationError("benchmark family stays degenerate after " + std::to_string(attempt) + " regenerations");
    }
    if (n_hard == 0) {
      f.hard_fraction = std::max(f.hard_fraction, 0.5);
      f.hard_p_lo = std::min(f.hard_p_lo, defaults.hard_p_lo);
      f.hard_p_hi = std::min(f.hard_p_hi, defaults.hard_p_hi);
    } else {
      f.hard_fraction = std::min(f.hard_fraction, 0.5);
      f.easy_p_lo = std::max(f.easy_p_lo, defaults.easy_p_lo);
      f.easy_p_hi = std::max(f.easy_p_hi, defaults.easy_p_hi);
    }
  }
}

struct BenchmarkPaths {
  std::filesystem::path data;
  std::filesystem::path candidates;
  std::filesystem::path oracle;
};

inline BenchmarkPaths write_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  BenchmarkPaths paths{dir / "data", dir / "candidates.jsonl", dir / "oracle.jsonl"};
  write_dataset(b.records, paths.data, WriteOptions{LabelingRule{b.family.grading_rollouts, 1.0}});
  write_candidates(b.candidates, paths.candidates);
  std::string lines;
  for (const auto& o : b.oracle) lines += o.to_json().dump() + "\n";
  detail::write_file(paths.oracle, lines);
  return paths;
}

}  // namespace valgate
