#pragma once

// Semi-gradient TD(0) training of a ValueHead on hidden-state trajectories.
//
//   delta_t = g_term * Reward - F(s_t)     at the EOS step
//   delta_t = gamma  * F(s_{t+1}) - F(s_t) otherwise
//
// with g_term = gamma (TerminalReward::discounted, the default) or 1
// (TerminalReward::undiscounted, which matches V = R at EOS states).
// Loss per trajectory is the sum of delta_t^2; bootstrap targets are constants.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "valgate/difficulty.hpp"
#include "valgate/errors.hpp"
#include "valgate/trajectory_store.hpp"
#include "valgate/value_head.hpp"

namespace valgate {

enum class TerminalReward { discounted, undiscounted };

inline std::string_view to_string(TerminalReward t) {
  return t == TerminalReward::discounted ? "discounted" : "undiscounted";
}

struct TDConfig {
  double gamma = 0.99;
  double lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_steps = 256;
  std::uint64_t seed = 0;
  std::size_t state_order_k = 1;
  std::size_t hidden_units = 256;
  TerminalReward terminal = TerminalReward::discounted;
  // Stop once an epoch's mean loss improves by less than this fraction; <= 0 disables.
  double early_stop_tol = 1e-5;
  std::size_t workers = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1], got " + std::to_string(gamma));
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_steps == 0) throw ConfigError("batch_steps must be >= 1");
    if (state_order_k == 0) throw ConfigError("state_order_k must be >= 1");
    if (hidden_units == 0) throw ConfigError("hidden_units must be >= 1");
    if (workers == 0) throw ConfigError("workers must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
      throw ConfigError("invalid optimizer moments");
    }
  }

  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }

  nlohmann::json to_json() const {
    return {{"gamma", gamma},           {"lr", lr},
            {"epochs", epochs},         {"batch_steps", batch_steps},
            {"seed", seed},             {"state_order_k", state_order_k},
            {"hidden_units", hidden_units}, {"terminal_reward", std::string(to_string(terminal))},
            {"early_stop_tol", early_stop_tol}, {"beta1", beta1},
            {"beta2", beta2},           {"adam_eps", adam_eps}};
  }
};

/// The two-case TD residual. Terminal steps need `reward`, others need `v_next`.
inline double td_error(double v_t, std::optional<double> v_next, std::optional<double> reward, double gamma,
                       bool is_terminal, TerminalReward terminal = TerminalReward::discounted) {
  if (is_terminal) {
    if (!reward) throw ContractError("td_error: terminal step needs a reward");
    const double g = terminal == TerminalReward::discounted ? gamma : 1.0;
    return g * *reward - v_t;
  }
  if (!v_next) throw ContractError("td_error: non-terminal step needs v_next");
  return gamma * *v_next - v_t;
}

inline void check_head_matches(const ValueHead& head, const HiddenTrajectory& traj, std::size_t k) {
  if (head.in_dim() != k * traj.hidden_dim) {
    throw ShapeError("value head expects " + std::to_string(head.in_dim()) + " inputs but " + traj.label() +
                     " yields " + std::to_string(k * traj.hidden_dim) + " (k=" + std::to_string(k) + ")");
  }
}

/// Sum over all steps of delta_t^2 under the current head.
inline double trajectory_loss(const ValueHead& head, const HiddenTrajectory& traj, const TDConfig& config) {
  const std::size_t k = config.state_order_k;
  check_head_matches(head, traj, k);
  const std::size_t n = traj.num_steps();
  std::vector<double> x(k * traj.hidden_dim);
  std::vector<double> values(n);
  for (std::size_t t = 0; t < n; ++t) {
    state_feature_into(traj, t, k, x);
    values[t] = head.forward(x);
  }
  double loss = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const bool terminal = t + 1 == n;
    const double d = terminal ? td_error(values[t], std::nullopt, traj.terminal_reward, config.gamma, true, config.terminal)
                              : td_error(values[t], values[t + 1], std::nullopt, config.gamma, false);
    loss += d * d;
  }
  return loss;
}

/// Gradient of sum_t delta_t^2 with every bootstrap target held fixed.
inline GradientSet trajectory_semi_gradient(const ValueHead& head, const HiddenTrajectory& traj,
                                            const TDConfig& config) {
  const std::size_t k = config.state_order_k;
  check_head_matches(head, traj, k);
  const std::size_t n = traj.num_steps();
  GradientSet g = GradientSet::zeros_like(head);
  std::vector<double> x(k * traj.hidden_dim);
  std::vector<double> values(n);
  for (std::size_t t = 0; t < n; ++t) {
    state_feature_into(traj, t, k, x);
    values[t] = head.forward(x);
  }
  for (std::size_t t = 0; t < n; ++t) {
    const bool terminal = t + 1 == n;
    const double d = terminal ? td_error(values[t], std::nullopt, traj.terminal_reward, config.gamma, true, config.terminal)
                              : td_error(values[t], values[t + 1], std::nullopt, config.gamma, false);
    state_feature_into(traj, t, k, x);
    accumulate_backward(head, x, -2.0 * d, g);
  }
  return g;
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double wall_ms = 0.0;
  std::size_t steps = 0;

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"mean_loss", mean_loss}, {"wall_ms", wall_ms}}; }
};

struct TrainResult {
  DifficultyModel model;
  std::vector<EpochStats> history;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochStats&, const ValueHead&)>;

namespace detail {

struct StepRef {
  std::uint32_t traj;
  std::uint32_t t;
};

// Steps per gradient chunk. Chunk partials are summed in chunk order, so the
// result does not depend on how many workers computed them.
inline constexpr std::size_t kChunkSteps = 32;

struct ChunkResult {
  GradientSet grad;
  double loss = 0.0;
};

class BatchEvaluator {
 public:
  BatchEvaluator(const ValueHead& head, std::span<const HiddenTrajectory> trajs, const TDConfig& cfg)
      : head_(head), trajs_(trajs), cfg_(cfg), dim_(trajs.front().hidden_dim * cfg.state_order_k) {}

  void run_chunk(std::span<const StepRef> steps, ChunkResult& out) const {
    out.grad.set_zero();
    out.loss = 0.0;
    std::vector<double> x(dim_), x_next(dim_);
    Eigen::VectorXd pre(static_cast<Eigen::Index>(head_.hidden_units()));
    for (const StepRef& s : steps) {
      const HiddenTrajectory& traj = trajs_[s.traj];
      const bool terminal = s.t + 1 == traj.num_steps();
      state_feature_into(traj, s.t, cfg_.state_order_k, x);
      const Eigen::Map<const Eigen::VectorXd> in(x.data(), static_cast<Eigen::Index>(dim_));
      pre.noalias() = head_.w1 * in;
      pre += head_.b1;
      const double v = head_.b2 + head_.w2.dot(pre.cwiseMax(0.0));
      double delta;
      if (terminal) {
        delta = td_error(v, std::nullopt, traj.terminal_reward, cfg_.gamma, true, cfg_.terminal);
      } else {
        state_feature_into(traj, s.t + 1, cfg_.state_order_k, x_next);
        delta = td_error(v, head_.forward(x_next), std::nullopt, cfg_.gamma, false);
      }
      if (!std::isfinite(delta)) {
        throw NumericError("non-finite TD error on trajectory " + traj.label() + " at step " + std::to_string(s.t));
      }
      out.loss += delta * delta;
      const double up = -2.0 * delta;
      const Eigen::VectorXd dpre = (pre.array() > 0.0).select(up * head_.w2.array(), 0.0).matrix();
      out.grad.dw2.noalias() += up * pre.cwiseMax(0.0);
      out.grad.db2 += up;
      out.grad.db1 += dpre;
      out.grad.dw1.noalias() += dpre * in.transpose();
    }
  }

 private:
  const ValueHead& head_;
  std::span<const HiddenTrajectory> trajs_;
  const TDConfig& cfg_;
  std::size_t dim_;
};

}  // namespace detail

/// Runs `epochs` passes of shuffled step-level minibatch semi-gradient TD(0).
/// Deterministic for a fixed seed, independent of `workers`.
inline TrainResult train(std::span<const HiddenTrajectory> trajectories, const TDConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  if (trajectories.empty()) throw DataError("training set is empty");
  const std::size_t hidden_dim = trajectories.front().hidden_dim;
  std::vector<detail::StepRef> steps;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    if (tr.hidden_dim != hidden_dim) {
      throw ShapeError("dimension mismatch: " + tr.label() + " has hidden_dim " + std::to_string(tr.hidden_dim) +
                       ", expected " + std::to_string(hidden_dim));
    }
    validate(tr);
    for (std::size_t t = 0; t < tr.num_steps(); ++t) {
      steps.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t)});
    }
  }

  TrainResult result;
  DifficultyModel& model = result.model;
  model.gamma = config.gamma;
  model.state_order_k = config.state_order_k;
  model.training = config.to_json();
  model.head = ValueHead::glorot(config.state_order_k * hidden_dim, config.hidden_units, config.seed);
  ValueHead& head = model.head;
  AdamState adam = AdamState::for_head(head);
  const AdamConfig adam_cfg = config.adam();

  std::seed_seq seq{config.seed, std::uint64_t{0x7d5eed}};
  std::mt19937_64 rng(seq);

  detail::BatchEvaluator eval(head, trajectories, config);
  const std::size_t max_chunks = (config.batch_steps + detail::kChunkSteps - 1) / detail::kChunkSteps;
  std::vector<detail::ChunkResult> chunks(max_chunks);
  for (auto& c : chunks) c.grad = GradientSet::zeros_like(head);
  GradientSet batch_grad = GradientSet::zeros_like(head);

  std::optional<double> prev_loss;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(steps.begin(), steps.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < steps.size(); begin += config.batch_steps) {
      const std::size_t end = std::min(begin + config.batch_steps, steps.size());
      const std::span<const detail::StepRef> batch(steps.data() + begin, end - begin);
      const std::size_t n_chunks = (batch.size() + detail::kChunkSteps - 1) / detail::kChunkSteps;
      auto chunk_span = [&](std::size_t c) {
        const std::size_t lo = c * detail::kChunkSteps;
        return batch.subspan(lo, std::min(detail::kChunkSteps, batch.size() - lo));
      };
      const std::size_t workers = std::min(config.workers, n_chunks);
      if (workers <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) eval.run_chunk(chunk_span(c), chunks[c]);
      } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            try {
              for (std::size_t c = w; c < n_chunks; c += workers) eval.run_chunk(chunk_span(c), chunks[c]);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
      }
      batch_grad.set_zero();
      double batch_loss = 0.0;
      for (std::size_t c = 0; c < n_chunks; ++c) {
        batch_grad += chunks[c].grad;
        batch_loss += chunks[c].loss;
      }
      batch_grad *= 1.0 / static_cast<double>(batch.size());
      epoch_loss += batch_loss;
      adam_step(head, batch_grad, adam, adam_cfg);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.steps = steps.size();
    stats.mean_loss = epoch_loss / static_cast<double>(steps.size());
    stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(stats.mean_loss)) throw NumericError("non-finite epoch loss at epoch " + std::to_string(epoch));
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats, head);
    if (prev_loss && config.early_stop_tol > 0.0) {
      const double improvement = (*prev_loss - stats.mean_loss) / std::max(*prev_loss, 1e-300);
      if (improvement < config.early_stop_tol) {
        result.early_stopped = true;
        break;
      }
    }
    prev_loss = stats.mean_loss;
  }
  return result;
}

inline std::vector<HiddenTrajectory> collect_trajectories(std::span<const QuestionRecord> records) {
  std::vector<HiddenTrajectory> out;
  for (const auto& r : records) out.insert(out.end(), r.rollouts.begin(), r.rollouts.end());
  return out;
}

inline TrainResult train(std::span<const QuestionRecord> records, const TDConfig& config,
                         const EpochCallback& on_epoch = {}) {
  const auto trajs = collect_trajectories(records);
  return train(std::span<const HiddenTrajectory>(trajs), config, on_epoch);
}

}  // namespace valgate
