#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "iflow/common.hpp"
#include "iflow/flow.hpp"
#include "iflow/made.hpp"
#include "oracles.hpp"

using namespace iflow;

namespace {

FlowConfig small_config(std::size_t layers, std::size_t bins = 8) {
  FlowConfig c;
  c.layers = layers;
  c.bins = bins;
  c.hidden = 16;
  c.hidden_layers = 2;
  return c;
}

FlowModel random_model(std::size_t dim, std::size_t layers, std::uint64_t seed, double scale = 0.5) {
  FlowModel m(dim, small_config(layers), seed);
  randomize_params(m.params(), seed + 1000, scale);
  return m;
}

Matrix random_points(std::size_t rows, std::size_t cols, std::uint64_t seed, double spread) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-spread, spread);
  Matrix x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

Vector forward_point(const FlowModel& m, const Vector& x) { return flow_forward(m, x.transpose()).z.row(0).transpose(); }

}  // namespace

TEST(Made, OutputBlockDependsOnlyOnEarlierInputs) {
  MadeShape s;
  s.inputs = 4;
  s.hidden = 12;
  s.hidden_layers = 2;
  s.outputs_per_input = 3;
  MaskedMlp net(s, "m.");
  ParamMap params;
  Rng rng(1);
  net.initialise(params, rng, std::vector<double>(12, 0.0));
  randomize_params(params, 2, 1.0);
  const Matrix x = random_points(1, 4, 3, 2.0);
  const Matrix base = net.evaluate(params, x);
  for (Eigen::Index j = 0; j < 4; ++j) {
    Matrix xp = x;
    xp(0, j) += 0.7;
    const Matrix moved = net.evaluate(params, xp);
    for (Eigen::Index d = 0; d < 4; ++d) {
      const double change = (moved.block(0, d * 3, 1, 3) - base.block(0, d * 3, 1, 3)).cwiseAbs().maxCoeff();
      if (d <= j) {
        EXPECT_EQ(change, 0.0) << "output block " << d << " moved with input " << j;
      }
    }
  }
  // The last block does see the first input.
  Matrix xp = x;
  xp(0, 0) += 0.7;
  EXPECT_GT((net.evaluate(params, xp) - base).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Made, GraphMatchesPlainEvaluation) {
  MadeShape s;
  s.inputs = 3;
  s.hidden = 10;
  s.hidden_layers = 2;
  s.outputs_per_input = 5;
  MaskedMlp net(s, "m.");
  ParamMap params;
  Rng rng(4);
  net.initialise(params, rng, std::vector<double>(15, 0.1));
  randomize_params(params, 5, 0.8);
  const Matrix x = random_points(7, 3, 6, 2.0);
  ad::Graph g;
  g.set_output(net.graph(g, g.input("x")));
  ad::Bindings b = params;
  b["x"] = to_array(x);
  EXPECT_LT((to_matrix(ad::evaluate(g, b)) - net.evaluate(params, x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Flow, FreshModelIsIdentity) {
  FlowModel m(3, FlowConfig{}, 7);
  const Matrix x = random_points(50, 3, 8, 7.0);
  const auto out = flow_forward(m, x);
  EXPECT_LT((out.z - x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(out.log_abs_det.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((flow_inverse(m, x) - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Flow, LayerPermutationsAlternate) {
  FlowModel m(3, small_config(3), 1);
  EXPECT_EQ(m.layers()[0].permutation, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(m.layers()[1].permutation, (std::vector<std::size_t>{2, 1, 0}));
  EXPECT_EQ(m.layers()[2].permutation, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Flow, SingleLayerLogDetMatchesJacobian) {
  const auto m = random_model(2, 1, 11);
  const Matrix pts = random_points(20, 2, 12, 4.0);
  for (Eigen::Index r = 0; r < pts.rows(); ++r) {
    const Vector x = pts.row(r).transpose();
    const Matrix j = oracle::fd_jacobian([&](const Vector& v) { return forward_point(m, v); }, x, 1e-6);
    const double ld = flow_forward(m, x.transpose()).log_abs_det(0);
    EXPECT_NEAR(ld, std::log(std::abs(j.determinant())), 1e-5);
  }
}

TEST(Flow, DeterminantMatchesJacobianUpToDim4) {
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto m = random_model(n, 3, 20 + n);
    const Matrix pts = random_points(10, n, 30 + n, 4.0);
    for (Eigen::Index r = 0; r < pts.rows(); ++r) {
      const Vector x = pts.row(r).transpose();
      const double det = std::abs(
          oracle::fd_jacobian([&](const Vector& v) { return forward_point(m, v); }, x, 1e-6).determinant());
      const double ours = std::exp(flow_forward(m, x.transpose()).log_abs_det(0));
      EXPECT_NEAR(ours / det, 1.0, 1e-4) << "n=" << n;
    }
  }
}

TEST(Flow, StandardizationEntersLogDet) {
  FlowModel m(2, small_config(1), 3);
  m.set_standardization({1.0, -2.0}, {2.0, 0.5});
  const Matrix x = random_points(5, 2, 4, 3.0);
  const auto out = flow_forward(m, x);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    EXPECT_NEAR(out.z(r, 0), (x(r, 0) - 1.0) / 2.0, 1e-12);
    EXPECT_NEAR(out.z(r, 1), (x(r, 1) + 2.0) / 0.5, 1e-12);
    EXPECT_NEAR(out.log_abs_det(r), -std::log(2.0) - std::log(0.5), 1e-12);
  }
  EXPECT_LT((flow_inverse(m, out.z) - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Flow, TwoLayerLogDetComposes) {
  const auto both = random_model(2, 2, 40);
  // First layer alone.
  FlowModel first(2, small_config(1), 0);
  for (auto& [k, v] : first.params()) v = both.params().at(k);
  // Second layer alone: identity first layer, copied second layer.
  FlowModel second(2, small_config(2), 0);
  for (auto& [k, v] : second.params()) {
    if (k.rfind("flow.l1.", 0) == 0) v = both.params().at(k);
  }
  const Matrix x = random_points(30, 2, 41, 4.0);
  const auto a = flow_forward(first, x);
  const auto b = flow_forward(second, a.z);
  const auto full = flow_forward(both, x);
  EXPECT_LT((full.z - b.z).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((full.log_abs_det - a.log_abs_det - b.log_abs_det).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Flow, RoundTrip) {
  for (std::size_t n : {1, 2, 3, 5}) {
    // Larger weight scales drive log|det| below -40, where the map is no
    // longer injective in double precision and no inverse can succeed.
    const auto m = random_model(n, 4, 50 + n, 0.25);
    const Matrix x = random_points(1000, n, 60 + n, 6.0);
    const Matrix z = flow_forward(m, x).z;
    EXPECT_LT((flow_inverse(m, z) - x).cwiseAbs().maxCoeff(), 1e-6) << "n=" << n;
    EXPECT_LT((flow_forward(m, flow_inverse(m, x)).z - x).cwiseAbs().maxCoeff(), 1e-6) << "n=" << n;
  }
}

TEST(Flow, AutoregressiveStructure) {
  // One layer with the identity permutation: z_d depends on x_1..x_d only and
  // is increasing in x_d.
  const auto m = random_model(3, 1, 70);
  const Matrix pts = random_points(20, 3, 71, 4.0);
  for (Eigen::Index r = 0; r < pts.rows(); ++r) {
    const Vector x = pts.row(r).transpose();
    const Matrix j = oracle::fd_jacobian([&](const Vector& v) { return forward_point(m, v); }, x, 1e-6);
    for (Eigen::Index d = 0; d < 3; ++d) {
      EXPECT_GT(j(d, d), 0.0);
      for (Eigen::Index k = d + 1; k < 3; ++k) EXPECT_EQ(j(d, k), 0.0);
    }
  }
}

TEST(Flow, IdentityBeyondTailBound) {
  const auto m = random_model(1, 1, 80);
  for (double v : {-9.0, -5.5, 5.5, 12.0}) {
    Matrix x(1, 1);
    x(0, 0) = v;
    const auto out = flow_forward(m, x);
    EXPECT_EQ(out.z(0, 0), v);
    EXPECT_EQ(out.log_abs_det(0), 0.0);
  }
}

TEST(Flow, WidthMismatchFails) {
  FlowModel m(2, small_config(1), 1);
  EXPECT_THROW(flow_forward(m, Matrix::Zero(3, 3)), std::invalid_argument);
  EXPECT_THROW(flow_inverse(m, Matrix::Zero(3, 1)), std::invalid_argument);
}
