#pragma once

// Two-layer rectifier network mapping a state feature to a scalar value:
//   out = b2 + w2 . max(0, W1 x + b1)
// Parameters live in double precision; the on-disk form is float32.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "valgate/errors.hpp"
#include "valgate/trajectory_store.hpp"

namespace valgate {

struct ValueHead {
  Eigen::MatrixXd w1;  // [hidden_units x in_dim]
  Eigen::VectorXd b1;  // [hidden_units]
  Eigen::VectorXd w2;  // [hidden_units]
  double b2 = 0.0;

  std::size_t in_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_units() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t parameter_count() const { return hidden_units() * (in_dim() + 2) + 1; }

  static ValueHead zeros(std::size_t in_dim, std::size_t hidden_units) {
    if (in_dim == 0 || hidden_units == 0) throw ShapeError("value head dimensions must be positive");
    ValueHead h;
    h.w1 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(hidden_units), static_cast<Eigen::Index>(in_dim));
    h.b1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden_units));
    h.w2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden_units));
    return h;
  }

  /// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights per layer, zero biases.
  static ValueHead glorot(std::size_t in_dim, std::size_t hidden_units, std::uint64_t seed) {
    ValueHead h = zeros(in_dim, hidden_units);
    std::mt19937_64 rng(seed);
    const double a1 = std::sqrt(6.0 / static_cast<double>(in_dim + hidden_units));
    const double a2 = std::sqrt(6.0 / static_cast<double>(hidden_units + 1));
    std::uniform_real_distribution<double> u1(-a1, a1);
    std::uniform_real_distribution<double> u2(-a2, a2);
    for (Eigen::Index r = 0; r < h.w1.rows(); ++r)
      for (Eigen::Index c = 0; c < h.w1.cols(); ++c) h.w1(r, c) = u1(rng);
    for (Eigen::Index r = 0; r < h.w2.size(); ++r) h.w2(r) = u2(rng);
    return h;
  }

  double forward(std::span<const double> x) const {
    check_input(x);
    const Eigen::Map<const Eigen::VectorXd> in(x.data(), static_cast<Eigen::Index>(x.size()));
    return b2 + w2.dot((w1 * in + b1).cwiseMax(0.0));
  }

  void check_input(std::span<const double> x) const {
    if (x.size() != in_dim()) {
      throw ShapeError("value head expects " + std::to_string(in_dim()) + " inputs, got " +
                       std::to_string(x.size()));
    }
  }

  bool all_finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && std::isfinite(b2);
  }

  friend bool operator==(const ValueHead& a, const ValueHead& b) {
    return a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2;
  }
};

struct GradientSet {
  Eigen::MatrixXd dw1;
  Eigen::VectorXd db1;
  Eigen::VectorXd dw2;
  double db2 = 0.0;

  static GradientSet zeros_like(const ValueHead& h) {
    return {Eigen::MatrixXd::Zero(h.w1.rows(), h.w1.cols()), Eigen::VectorXd::Zero(h.b1.size()),
            Eigen::VectorXd::Zero(h.w2.size()), 0.0};
  }

  void set_zero() {
    dw1.setZero();
    db1.setZero();
    dw2.setZero();
    db2 = 0.0;
  }

  GradientSet& operator+=(const GradientSet& o) {
    dw1 += o.dw1;
    db1 += o.db1;
    dw2 += o.dw2;
    db2 += o.db2;
    return *this;
  }

  GradientSet& operator*=(double s) {
    dw1 *= s;
    db1 *= s;
    dw2 *= s;
    db2 *= s;
    return *this;
  }

  bool all_finite() const {
    return dw1.allFinite() && db1.allFinite() && dw2.allFinite() && std::isfinite(db2);
  }

  bool matches(const ValueHead& h) const {
    return dw1.rows() == h.w1.rows() && dw1.cols() == h.w1.cols() && db1.size() == h.b1.size() &&
           dw2.size() == h.w2.size();
  }
};

/// Adds upstream * d(out)/d(params) at x into `grads`. The rectifier's
/// subgradient at 0 is taken as 0.
inline void accumulate_backward(const ValueHead& head, std::span<const double> x, double upstream,
                                GradientSet& grads) {
  head.check_input(x);
  if (!grads.matches(head)) throw ShapeError("gradient set does not match value head");
  const Eigen::Map<const Eigen::VectorXd> in(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd pre = head.w1 * in + head.b1;
  const Eigen::VectorXd act = pre.cwiseMax(0.0);
  const Eigen::VectorXd dpre =
      (pre.array() > 0.0).select(upstream * head.w2.array(), 0.0).matrix();
  grads.dw2.noalias() += upstream * act;
  grads.db2 += upstream;
  grads.db1 += dpre;
  grads.dw1.noalias() += dpre * in.transpose();
}

inline GradientSet backward(const ValueHead& head, std::span<const double> x, double upstream) {
  GradientSet g = GradientSet::zeros_like(head);
  accumulate_backward(head, x, upstream, g);
  return g;
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  GradientSet m;
  GradientSet v;
  std::uint64_t t = 0;  // number of steps taken

  static AdamState for_head(const ValueHead& h) {
    return {GradientSet::zeros_like(h), GradientSet::zeros_like(h), 0};
  }
};

namespace detail {

template <class P, class G>
void adam_update(P& param, const G& grad, G& m, G& v, const AdamConfig& c, double bc1, double bc2) {
  m = c.beta1 * m + (1.0 - c.beta1) * grad;
  v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  param -= (c.lr * (m / bc1).array() / ((v / bc2).array().sqrt() + c.eps)).matrix();
}

}  // namespace detail

/// One bias-corrected adaptive-moment step; advances state.t first, so the
/// first call uses t = 1.
inline void adam_step(ValueHead& head, const GradientSet& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (!grads.matches(head) || !state.m.matches(head) || !state.v.matches(head)) {
    throw ShapeError("adam_step: gradient/moment shapes do not match the value head");
  }
  if (!grads.all_finite()) {
    throw NumericError("adam_step: non-finite gradient (|db2|=" + std::to_string(grads.db2) +
                       ", max|dw1|=" + std::to_string(grads.dw1.cwiseAbs().maxCoeff()) + ")");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  detail::adam_update(head.w1, grads.dw1, state.m.dw1, state.v.dw1, cfg, bc1, bc2);
  detail::adam_update(head.b1, grads.db1, state.m.db1, state.v.db1, cfg, bc1, bc2);
  detail::adam_update(head.w2, grads.dw2, state.m.dw2, state.v.dw2, cfg, bc1, bc2);
  state.m.db2 = cfg.beta1 * state.m.db2 + (1.0 - cfg.beta1) * grads.db2;
  state.v.db2 = cfg.beta2 * state.v.db2 + (1.0 - cfg.beta2) * grads.db2 * grads.db2;
  head.b2 -= cfg.lr * (state.m.db2 / bc1) / (std::sqrt(state.v.db2 / bc2) + cfg.eps);
}

// ---------------------------------------------------------------------------
// Serialization: head.json (dims + metadata) and head.bin (float32 LE, order W1, b1, W2, b2)

inline constexpr std::string_view kHeadHeaderFile = "head.json";
inline constexpr std::string_view kHeadBlobFile = "head.bin";

inline void save_head(const ValueHead& head, const std::filesystem::path& dir,
                      const nlohmann::json& metadata = nlohmann::json::object()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string blob;
  std::vector<float> row(head.in_dim());
  for (Eigen::Index r = 0; r < head.w1.rows(); ++r) {
    for (Eigen::Index c = 0; c < head.w1.cols(); ++c) row[static_cast<std::size_t>(c)] = static_cast<float>(head.w1(r, c));
    detail::append_floats(blob, row);
  }
  std::vector<float> tmp(head.hidden_units());
  for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(head.b1(static_cast<Eigen::Index>(i)));
  detail::append_floats(blob, tmp);
  for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(head.w2(static_cast<Eigen::Index>(i)));
  detail::append_floats(blob, tmp);
  const float b2 = static_cast<float>(head.b2);
  detail::append_floats(blob, std::span<const float>(&b2, 1));

  nlohmann::json header = {{"format", "valgate-value-head"},
                           {"version", 1},
                           {"in_dim", head.in_dim()},
                           {"hidden_units", head.hidden_units()},
                           {"activation", "relu"},
                           {"dtype", "float32-le"},
                           {"parameter_order", {"W1", "b1", "W2", "b2"}},
                           {"blob", std::string(kHeadBlobFile)},
                           {"metadata", metadata}};
  detail::write_file(dir / kHeadBlobFile, blob);
  detail::write_file(dir / kHeadHeaderFile, header.dump(2) + "\n");
}

struct LoadedHead {
  ValueHead head;
  nlohmann::json metadata;
};

inline LoadedHead load_head(const std::filesystem::path& dir) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::read_file(dir / kHeadHeaderFile));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError((dir / kHeadHeaderFile).string() + ": " + e.what());
  }
  std::size_t in = 0, hidden = 0;
  try {
    if (header.at("format") != "valgate-value-head" || header.at("activation") != "relu") {
      throw CorruptionError((dir / kHeadHeaderFile).string() + ": not a rectifier value head");
    }
    in = header.at("in_dim").get<std::size_t>();
    hidden = header.at("hidden_units").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError((dir / kHeadHeaderFile).string() + ": " + e.what());
  }
  ValueHead head = ValueHead::zeros(in, hidden);
  const std::string blob = detail::read_file(dir / kHeadBlobFile);
  if (blob.size() != head.parameter_count() * sizeof(float)) {
    throw CorruptionError((dir / kHeadBlobFile).string() + ": expected " +
                          std::to_string(head.parameter_count() * sizeof(float)) + " bytes, found " +
                          std::to_string(blob.size()));
  }
  const std::vector<float> p = detail::decode_floats(blob);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < head.w1.rows(); ++r)
    for (Eigen::Index c = 0; c < head.w1.cols(); ++c) head.w1(r, c) = p[k++];
  for (Eigen::Index i = 0; i < head.b1.size(); ++i) head.b1(i) = p[k++];
  for (Eigen::Index i = 0; i < head.w2.size(); ++i) head.w2(i) = p[k++];
  head.b2 = p[k++];
  if (!head.all_finite()) throw ValidationError((dir / kHeadBlobFile).string() + ": non-finite parameter");
  return {std::move(head), header.value("metadata", nlohmann::json::object())};
}

}  // namespace valgate
