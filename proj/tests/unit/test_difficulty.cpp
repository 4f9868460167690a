#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "valgate/difficulty.hpp"

namespace fs = std::filesystem;
using namespace valgate;

namespace {

struct CountingHead {
  ValueHead head;
  mutable int calls = 0;
  std::size_t in_dim() const { return head.in_dim(); }
  double forward(std::span<const double> x) const {
    ++calls;
    return head.forward(x);
  }
};

DifficultyModel constant_model(std::size_t in, double b2) {
  DifficultyModel m;
  m.head = ValueHead::zeros(in, 3);
  m.head.b2 = b2;
  return m;
}

}  // namespace

TEST(Score, ZeroAndConstantHeads) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  const auto zero = constant_model(4, 0.0), seven = constant_model(4, 0.7);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> x{g(rng), g(rng), g(rng), g(rng)};
    EXPECT_EQ(score(zero, x).raw, 0.0);
    EXPECT_EQ(score(seven, x).raw, 0.7);
    EXPECT_EQ(score(seven, x).reported, 0.7);
  }
}

TEST(Score, ReportedValueIsClamped) {
  EXPECT_EQ(score(constant_model(2, 1.4), std::vector<double>{0, 0}).reported, 1.0);
  EXPECT_EQ(score(constant_model(2, 1.4), std::vector<double>{0, 0}).raw, 1.4);
  EXPECT_EQ(score(constant_model(2, -0.2), std::vector<double>{0, 0}).reported, 0.0);
}

TEST(Score, ShapeMismatch) {
  EXPECT_THROW(score(constant_model(3, 0.0), std::vector<double>{1, 2}), ShapeError);
}

TEST(Score, ExactlyOneForwardPass) {
  CountingHead h{ValueHead::glorot(4, 5, 2)};
  (void)score_with(h, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(h.calls, 1);
}

TEST(Classify, BoundaryGoesToDifficult) {
  EXPECT_EQ(classify(0.5, 0.5), Difficulty::difficult);
  EXPECT_EQ(classify(0.5 + 1e-9, 0.5), Difficulty::easy);
  EXPECT_EQ(classify(0.0, 0.0), Difficulty::difficult);
  EXPECT_EQ(classify(1e-300, 0.0), Difficulty::easy);
}

TEST(Classify, Monotone) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 2);
  for (int i = 0; i < 1000; ++i) {
    double a = u(rng), b = u(rng), tau = u(rng);
    if (a > b) std::swap(a, b);
    if (classify(b, tau) == Difficulty::difficult) EXPECT_EQ(classify(a, tau), Difficulty::difficult);
  }
}

TEST(Classify, RequiresTau) {
  DifficultyModel m = constant_model(2, 0.3);
  EXPECT_THROW(classify(m, 0.3), CalibrationError);
  m.set_tau(0.3);
  EXPECT_EQ(classify(m, 0.3), Difficulty::difficult);
  EXPECT_THROW(m.set_tau(std::numeric_limits<double>::infinity()), CalibrationError);
  EXPECT_THROW(m.set_tau(std::nan("")), CalibrationError);
}

TEST(Calibrate, MidpointExample) {
  const auto r = calibrate_tau(std::vector<double>{0.1, 0.4, 0.6, 0.9}, {true, true, false, false});
  EXPECT_DOUBLE_EQ(r.tau, 0.5);
  EXPECT_EQ(r.objective_value, 1.0);
  EXPECT_EQ(r.sweep_size, 5u);
}

TEST(Calibrate, SeparableDataReachesPerfectF1) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> lo(0.0, 0.4), hi(0.6, 1.0);
  std::vector<double> s;
  std::vector<bool> l;
  for (int i = 0; i < 50; ++i) {
    s.push_back(lo(rng));
    l.push_back(true);
    s.push_back(hi(rng));
    l.push_back(false);
  }
  const auto r = calibrate_tau(s, l);
  EXPECT_EQ(r.objective_value, 1.0);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(classify(s[i], r.tau) == Difficulty::difficult, l[i]);
}

TEST(Calibrate, MatchesExhaustiveSweep) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 30);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s;
    std::vector<bool> l;
    for (int i = 0; i < 200; ++i) {
      s.push_back(coarse(rng) / 30.0);
      l.push_back(coin(rng));
    }
    l[0] = true;
    l[1] = false;
    // the oracle builds its own candidate list: every midpoint plus outer sentinels
    std::vector<double> u = s;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    std::vector<double> cands{u.front() - 1.0};
    for (std::size_t i = 1; i < u.size(); ++i) cands.push_back((u[i - 1] + u[i]) / 2.0);
    cands.push_back(u.back() + 1.0);
    const auto [best, best_tau] = oracle::brute_tau_sweep(s, l, cands);
    const auto r = calibrate_tau(s, l);
    EXPECT_NEAR(r.objective_value, best, 1e-15) << trial;
    // both taus induce the same partition
    for (double x : s) EXPECT_EQ(classify(x, r.tau), classify(x, best_tau));
    // no swept candidate beats the returned objective
    for (double t : candidate_thresholds(s)) {
      std::vector<bool> pred;
      for (double x : s) pred.push_back(x <= t);
      EXPECT_LE(oracle::hand_macro_f1(oracle::hand_confusion(pred, l)), r.objective_value + 1e-15);
    }
  }
}

TEST(Calibrate, TiesGoToSmallerTau) {
  // scores 0.2 (easy), 0.8 (hard): all-easy and all-hard both yield 1/3
  const auto r = calibrate_tau(std::vector<double>{0.2, 0.8}, {false, true});
  // candidates: sentinel (F1 1/3), 0.5 (F1 0), sentinel high (F1 1/3)
  EXPECT_LT(r.tau, 0.2);
  EXPECT_NEAR(r.objective_value, 1.0 / 3.0, 1e-15);
}

TEST(Calibrate, MirrorSymmetry) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s;
  std::vector<bool> l;
  for (int i = 0; i < 60; ++i) {
    s.push_back(u(rng));
    l.push_back(s.back() + 0.3 * u(rng) < 0.6);
  }
  const auto r = calibrate_tau(s, l);
  std::vector<double> ns;
  std::vector<bool> nl;
  for (double x : s) ns.push_back(-x);
  for (bool b : l) nl.push_back(!b);
  const auto m = calibrate_tau(ns, nl);
  EXPECT_NEAR(r.objective_value, m.objective_value, 1e-15);
}

TEST(Calibrate, SingleClassIsAnError) {
  EXPECT_THROW(calibrate_tau(std::vector<double>{0.1, 0.2}, {true, true}), CalibrationError);
  EXPECT_THROW(calibrate_tau(std::vector<double>{0.1, 0.2}, {false, false}), CalibrationError);
}

TEST(Calibrate, CandidateThresholdsAreOrderedAndSeparating) {
  const std::vector<double> s{0.3, 0.1, 0.3, 0.2, std::nextafter(0.2, 1.0)};
  const auto c = candidate_thresholds(s);
  ASSERT_EQ(c.size(), 5u);
  EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
  EXPECT_LT(c.front(), 0.1);
  EXPECT_GT(c.back(), 0.3);
  // each interior threshold splits the distinct values in a distinct place
  std::set<std::size_t> splits;
  for (double t : c) splits.insert(static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double x) { return x <= t; })));
  EXPECT_EQ(splits.size(), c.size());
}

TEST(ModelBundle, RoundTrip) {
  const auto dir = fs::temp_directory_path() / "valgate_bundle_rt";
  fs::remove_all(dir);
  DifficultyModel m = constant_model(4, 0.25);
  m.gamma = 0.9;
  m.state_order_k = 2;
  m.head = ValueHead::zeros(4, 3);
  m.head.b2 = 0.25;
  m.training = {{"lr", 1e-4}};
  save_model(m, dir);
  EXPECT_FALSE(fs::exists(dir / "calibration.json"));
  auto back = load_model(dir);
  EXPECT_EQ(back.head, m.head);
  EXPECT_EQ(back.gamma, 0.9);
  EXPECT_EQ(back.state_order_k, 2u);
  EXPECT_FALSE(back.tau.has_value());

  calibrate(m, std::vector<double>{0.1, 0.4, 0.6, 0.9}, {true, true, false, false});
  m.val_stats = {{"n", 4}};
  save_model(m, dir);
  const auto cal = nlohmann::json::parse(detail::read_file(dir / "calibration.json"));
  for (const char* k : {"tau", "gamma", "state_order_k", "objective", "val_stats"}) EXPECT_TRUE(cal.contains(k)) << k;
  back = load_model(dir);
  ASSERT_TRUE(back.tau.has_value());
  EXPECT_EQ(*back.tau, *m.tau);
  ASSERT_TRUE(back.calibration.has_value());
  EXPECT_EQ(back.calibration->sweep_size, 5u);
  EXPECT_EQ(back.calibration->objective, "macro_f1");
  fs::remove_all(dir);
  EXPECT_THROW(load_model(dir), IoError);
}
