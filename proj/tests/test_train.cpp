#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "iflow/train.hpp"

using namespace iflow;

namespace {

SyntheticDataset small_data(std::uint64_t seed = 3) {
  SynthConfig c;
  c.segments = 3;
  c.samples_per_segment = 40;
  c.dim = 2;
  return generate_dataset(c, seed);
}

FlowConfig small_flow() {
  FlowConfig c;
  c.layers = 2;
  c.bins = 4;
  c.hidden = 8;
  c.hidden_layers = 1;
  return c;
}

PriorConfig small_prior() {
  PriorConfig c;
  c.hidden = 8;
  c.hidden_layers = 1;
  return c;
}

TrainConfig small_train(std::size_t iterations) {
  TrainConfig t;
  t.batch = 16;
  t.lr = 5e-3;
  t.iterations = iterations;
  t.eval_every = 10;
  t.seed = 4;
  return t;
}

bool same_params(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a) {
    if (!b.contains(k) || b.at(k).values() != v.values()) return false;
  }
  return true;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamMap p{{"w", ad::Array::row({1.0, -2.0})}};
  AdamState st;
  adam_step(p, {{"w", ad::Array::row({0.0, 0.0})}}, st);
  EXPECT_EQ(p.at("w")[0], 1.0);
  EXPECT_EQ(p.at("w")[1], -2.0);
  adam_step(p, {}, st);  // missing gradient counts as zero
  EXPECT_EQ(p.at("w")[0], 1.0);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  ParamMap p{{"w", ad::Array::row({1.0, 1.0, 1.0})}};
  AdamState st;
  st.lr = 0.01;
  adam_step(p, {{"w", ad::Array::row({0.5, -3.0, 1e-3})}}, st);
  EXPECT_NEAR(p.at("w")[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.at("w")[1], 1.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.at("w")[2], 1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MinimisesQuadratic) {
  ParamMap p{{"w", ad::Array::scalar(5.0)}};
  AdamState st;
  st.lr = 0.1;
  for (int i = 0; i < 100; ++i) adam_step(p, {{"w", ad::Array::scalar(2.0 * p.at("w")[0])}}, st);
  EXPECT_LT(std::abs(p.at("w")[0]), 0.5);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParamMap p{{"prior.w0", ad::Array::scalar(1.0)}};
  AdamState st;
  try {
    adam_step(p, {{"prior.w0", ad::Array::scalar(std::nan(""))}}, st);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("prior.w0"), std::string::npos);
  }
  EXPECT_EQ(p.at("prior.w0")[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(BatchSchedule, EpochsCoverEveryRowOnce) {
  BatchSchedule s(50, 10, 9);
  std::multiset<std::size_t> seen;
  for (std::size_t it = 0; it < 5; ++it) {
    for (auto r : s.batch(it)) seen.insert(r);
  }
  ASSERT_EQ(seen.size(), 50u);
  for (std::size_t r = 0; r < 50; ++r) EXPECT_EQ(seen.count(r), 1u);
}

TEST(BatchSchedule, PureFunctionOfSeedAndIteration) {
  BatchSchedule a(37, 8, 2);
  std::vector<std::vector<std::size_t>> seq;
  for (std::size_t it = 0; it < 20; ++it) seq.push_back(a.batch(it));
  BatchSchedule b(37, 8, 2);
  EXPECT_EQ(b.batch(13), seq[13]);
  EXPECT_EQ(b.batch(2), seq[2]);
  BatchSchedule c(37, 8, 3);
  EXPECT_NE(c.batch(0), seq[0]);
}

TEST(Train, FirstLossMatchesDirectComputation) {
  const auto data = small_data();
  const auto cfg = small_train(1);
  const auto st = initial_state(small_flow(), small_prior(), cfg, data);
  const auto res = train(cfg, data, st);
  BatchSchedule s(data.size(), cfg.batch, cfg.seed);
  const auto rows = s.batch(0);
  const double direct = loss(st.flow, st.prior, gather_rows(data.x, rows), gather_rows(data.u, rows));
  ASSERT_GE(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].loss, direct);
  EXPECT_EQ(*res.history[0].energy, energy(st.flow, st.prior, data));
  EXPECT_EQ(res.initial_energy, energy(st.flow, st.prior, data));
}

TEST(Train, Deterministic) {
  const auto data = small_data();
  const auto cfg = small_train(30);
  const auto a = train(cfg, data, initial_state(small_flow(), small_prior(), cfg, data));
  const auto b = train(cfg, data, initial_state(small_flow(), small_prior(), cfg, data));
  EXPECT_TRUE(same_params(a.final_state.flow.params(), b.final_state.flow.params()));
  EXPECT_TRUE(same_params(a.final_state.prior.params(), b.final_state.prior.params()));
  EXPECT_EQ(a.final_energy, b.final_energy);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto data = small_data();
  const auto full_cfg = small_train(40);
  const auto st0 = initial_state(small_flow(), small_prior(), full_cfg, data);
  const auto full = train(full_cfg, data, st0);

  auto half_cfg = small_train(17);
  const auto half = train(half_cfg, data, st0);
  EXPECT_EQ(half.final_state.iteration, 17u);
  const auto resumed = train(full_cfg, data, half.final_state);

  EXPECT_EQ(resumed.final_state.iteration, 40u);
  EXPECT_TRUE(same_params(full.final_state.flow.params(), resumed.final_state.flow.params()));
  EXPECT_TRUE(same_params(full.final_state.prior.params(), resumed.final_state.prior.params()));
  EXPECT_EQ(full.final_energy, resumed.final_energy);
  EXPECT_EQ(full.final_state.adam.step, resumed.final_state.adam.step);
  // Minibatch losses line up iteration by iteration.
  for (const auto& h : resumed.history) {
    if (std::isnan(h.loss)) continue;
    EXPECT_EQ(h.loss, full.history[h.iteration].loss) << h.iteration;
  }
}

TEST(Train, EnergyImprovesAndBestIsTracked) {
  const auto data = small_data(5);
  auto cfg = small_train(150);
  const auto res = train(cfg, data, initial_state(small_flow(), small_prior(), cfg, data));
  EXPECT_GE(res.best_energy, res.initial_energy);
  EXPECT_GE(res.best_energy, res.final_energy);
  EXPECT_GT(res.final_energy, res.initial_energy);
  EXPECT_NEAR(energy(res.best_flow, res.best_prior, data), res.best_energy, 1e-12);
  // History: one entry per update plus a closing energy entry.
  ASSERT_EQ(res.history.size(), 151u);
  EXPECT_TRUE(std::isnan(res.history.back().loss));
  EXPECT_EQ(*res.history.back().energy, res.final_energy);
  EXPECT_TRUE(res.history[10].energy.has_value());
  EXPECT_FALSE(res.history[11].energy.has_value());
}

TEST(Train, DivergenceKeepsLastFiniteState) {
  const auto data = small_data();
  auto cfg = small_train(20);
  cfg.lr = 1e20;  // measured: the first update overflows the prior
  auto st = initial_state(small_flow(), small_prior(), cfg, data);
  try {
    train(cfg, data, st);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    ASSERT_NE(e.last_finite_state(), nullptr);
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
    for (const auto& [k, v] : e.last_finite_state()->flow.params()) EXPECT_TRUE(v.all_finite()) << k;
    EXPECT_EQ(e.iteration(), 1u);
    EXPECT_EQ(e.last_finite_state()->iteration, 1u);
  }
}

TEST(Train, NonFiniteDataIsRejected) {
  auto data = small_data();
  const auto cfg = small_train(5);
  const auto st = initial_state(small_flow(), small_prior(), cfg, data);
  data.x(5, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train(cfg, data, st), NumericalError);
}

TEST(Train, RejectsBadConfig) {
  const auto data = small_data();
  auto cfg = small_train(5);
  const auto st = initial_state(small_flow(), small_prior(), cfg, data);
  cfg.batch = 0;
  EXPECT_THROW(train(cfg, data, st), ConfigError);
  cfg = small_train(5);
  cfg.lr = 0.0;
  EXPECT_THROW(train(cfg, data, st), ConfigError);
  SynthConfig c3;
  c3.segments = 5;
  c3.samples_per_segment = 10;
  c3.dim = 2;
  EXPECT_THROW(train(small_train(5), generate_dataset(c3, 1), st), ConfigError);
}
