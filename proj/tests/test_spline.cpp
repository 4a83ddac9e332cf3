#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "iflow/common.hpp"
#include "iflow/spline.hpp"
#include "oracles.hpp"

using namespace iflow;
using namespace iflow::spline;

namespace {

std::vector<double> random_raw(std::mt19937_64& rng, std::size_t bins, double spread = 2.0) {
  return oracle::random_vector(rng, params_per_dim(bins), -spread, spread);
}

}  // namespace

TEST(Spline, IdentityParametersGiveIdentity) {
  const auto p = SplineParams::identity(3, 8, 5.0);
  const std::vector<double> x = {-4.3, 0.0, 2.71};
  const auto out = rq_spline_forward(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out.values[i], x[i], 1e-12);
  EXPECT_NEAR(out.log_abs_det, 0.0, 1e-12);
  const auto back = rq_spline_inverse(out.values, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back.values[i], x[i], 1e-12);
  EXPECT_NEAR(back.log_abs_det, 0.0, 1e-12);
}

TEST(Spline, IdentityOutsideTailBound) {
  std::mt19937_64 rng(1);
  const auto kn = make_knots(random_raw(rng, 8), 8, 5.0);
  for (double x : {-100.0, -5.0000001, 5.0000001, 7.5}) {
    const auto [y, ld] = forward_scalar(x, kn);
    EXPECT_EQ(y, x);
    EXPECT_EQ(ld, 0.0);
    EXPECT_EQ(inverse_scalar(x, kn).first, x);
  }
}

TEST(Spline, KnotsSpanTheBoxWithMinimumBinSize) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto raw = random_raw(rng, 6, 30.0);  // extreme logits push bins to the floor
    const auto kn = make_knots(raw, 6, 5.0);
    EXPECT_EQ(kn.xs.front(), -5.0);
    EXPECT_EQ(kn.xs.back(), 5.0);
    EXPECT_EQ(kn.ys.front(), -5.0);
    EXPECT_EQ(kn.ys.back(), 5.0);
    EXPECT_EQ(kn.ds.front(), 1.0);
    EXPECT_EQ(kn.ds.back(), 1.0);
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_GE(kn.xs[k + 1] - kn.xs[k], 1e-3 * 10.0 / 6.0 - 1e-12);
      EXPECT_GE(kn.ys[k + 1] - kn.ys[k], 1e-3 * 10.0 / 6.0 - 1e-12);
      EXPECT_GT(kn.ds[k], 0.0);
    }
  }
}

TEST(Spline, NonFiniteParametersFail) {
  std::vector<double> raw(params_per_dim(4), 0.0);
  raw[3] = std::nan("");
  EXPECT_THROW(make_knots(raw, 4, 5.0), NumericalError);
  const auto kn = make_knots(std::vector<double>(params_per_dim(4), 0.0), 4, 5.0);
  EXPECT_THROW(forward_scalar(std::numeric_limits<double>::infinity(), kn), NumericalError);
}

TEST(Spline, FourBinsMatchDenseOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto raw = random_raw(rng, 4);
    const auto kn = make_knots(raw, 4, 5.0);
    const oracle::DenseSpline ref(raw, 4, 5.0);
    for (int i = 0; i <= 400; ++i) {
      const double x = -6.0 + 12.0 * i / 400.0;
      const auto [y, ld] = forward_scalar(x, kn);
      const auto [yr, dr] = ref(x);
      EXPECT_NEAR(y, yr, 1e-10) << "x=" << x;
      EXPECT_NEAR(ld, std::log(dr), 1e-10) << "x=" << x;
    }
  }
}

TEST(Spline, LogDerivativeMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  const auto kn = make_knots(random_raw(rng, 8), 8, 5.0);
  for (double x = -4.9; x < 4.9; x += 0.173) {
    const double h = 1e-6;
    const double fd = (forward_scalar(x + h, kn).first - forward_scalar(x - h, kn).first) / (2 * h);
    EXPECT_NEAR(forward_scalar(x, kn).second, std::log(fd), 1e-6);
  }
}

TEST(Spline, RoundTrip1000Points) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  double worst = 0.0, worst_ld = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto kn = make_knots(random_raw(rng, 8, 3.0), 8, 5.0);
    for (int i = 0; i < 100; ++i) {
      const double x = u(rng);
      const auto [y, ld] = forward_scalar(x, kn);
      const auto [xb, ldb] = inverse_scalar(y, kn);
      worst = std::max(worst, std::abs(xb - x));
      worst_ld = std::max(worst_ld, std::abs(ld + ldb));
    }
  }
  EXPECT_LT(worst, 1e-8);
  EXPECT_LT(worst_ld, 1e-8);
}

TEST(Spline, ExactlyOneAdmissibleRoot) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-4.99, 4.99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto kn = make_knots(random_raw(rng, 5, 3.0), 5, 5.0);
    for (int i = 0; i < 50; ++i) {
      const double y = u(rng);
      const std::size_t k = find_bin(kn.ys, y);
      const auto r = inverse_roots(y, kn, k);
      auto ok = [](double t) { return std::isfinite(t) && t > 1e-9 && t < 1.0 - 1e-9; };
      const int admissible = int(ok(r.first)) + int(ok(r.second));
      // Either one root lies in (0, 1), or the solution sits on a bin edge.
      const bool on_edge = std::abs(r.first) < 1e-9 || std::abs(r.first - 1.0) < 1e-9;
      if (!on_edge) {
        EXPECT_EQ(admissible, 1) << "y=" << y << " roots " << r.first << ", " << r.second;
      }
      // The selected root reproduces y.
      const double x = inverse_scalar(y, kn).first;
      EXPECT_NEAR(forward_scalar(x, kn).first, y, 1e-10);
    }
  }
}

TEST(Spline, StrictlyIncreasing) {
  std::mt19937_64 rng(7);
  const auto kn = make_knots(random_raw(rng, 8, 4.0), 8, 5.0);
  double prev = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 10000; ++i) {
    const double y = forward_scalar(-6.0 + 12.0 * i / 10000.0, kn).first;
    EXPECT_GT(y, prev);
    prev = y;
  }
}

TEST(Spline, ContinuousAtTailBound) {
  std::mt19937_64 rng(8);
  const auto kn = make_knots(random_raw(rng, 8), 8, 5.0);
  for (double b : {-5.0, 5.0}) {
    const double eps = 1e-10;
    const auto in = forward_scalar(b - std::copysign(eps, b), kn);
    const auto out = forward_scalar(b + std::copysign(eps, b), kn);
    EXPECT_NEAR(in.first, out.first, 1e-8);
    EXPECT_NEAR(in.second, out.second, 1e-8);  // boundary derivative is 1
  }
}

TEST(SplineGraph, MatchesScalarImplementation) {
  std::mt19937_64 rng(9);
  const std::size_t dims = 3, bins = 6, batch = 40;
  const std::size_t p = params_per_dim(bins);
  std::uniform_real_distribution<double> ux(-6.0, 6.0), ur(-2.0, 2.0);
  ad::Array x(batch, dims), raw(batch, dims * p);
  for (auto& v : x.values()) v = ux(rng);
  for (auto& v : raw.values()) v = ur(rng);
  ad::Graph g;
  auto nodes = rq_spline_graph(g, g.input("x"), g.input("raw"), dims, bins, 5.0);
  ad::Bindings b{{"x", x}, {"raw", raw}};
  const auto ev = ad::forward(g, b);
  const auto& y = ev.value(nodes.y);
  const auto& ld = ev.value(nodes.log_det);
  for (std::size_t r = 0; r < batch; ++r) {
    double ld_sum = 0.0;
    for (std::size_t i = 0; i < dims; ++i) {
      std::vector<double> block(raw.data().begin() + static_cast<long>(r * dims * p + i * p),
                                raw.data().begin() + static_cast<long>(r * dims * p + (i + 1) * p));
      const auto [ys, lds] = forward_scalar(x(r, i), make_knots(block, bins, 5.0));
      EXPECT_NEAR(y(r, i), ys, 1e-12);
      ld_sum += lds;
    }
    EXPECT_NEAR(ld(r, 0), ld_sum, 1e-11);
  }
}

TEST(SplineGraph, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const std::size_t dims = 2, bins = 4, batch = 5;
  ad::Array x(batch, dims), raw(batch, dims * params_per_dim(bins));
  std::uniform_real_distribution<double> ux(-4.0, 4.0), ur(-1.5, 1.5);
  for (auto& v : x.values()) v = ux(rng);
  for (auto& v : raw.values()) v = ur(rng);
  ad::Graph g;
  auto nodes = rq_spline_graph(g, g.input("x"), g.input("raw"), dims, bins, 5.0);
  g.set_output(ad::sum(ad::square(nodes.y)) + ad::sum(nodes.log_det));
  const auto r = ad::check_gradient(g, {{"x", x}, {"raw", raw}}, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-5) << r.worst_input << "[" << r.worst_index << "]";
}
