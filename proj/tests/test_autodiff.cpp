#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "iflow/autodiff.hpp"
#include "iflow/error.hpp"

using namespace iflow;
using namespace iflow::ad;

namespace {

Array random_array(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Array a(r, c);
  for (auto& v : a.values()) v = d(rng);
  return a;
}

// Scalar loss sum(w * f(x)) so every element's gradient is exercised with a
// distinct weight.
struct UnaryCase {
  const char* name;
  std::function<Node(Node)> op;
  double lo, hi;
};

}  // namespace

TEST(Array, ShapeMustMatchData) {
  EXPECT_THROW(Array({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  Array a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(a(1, 2), 6.0);
  EXPECT_EQ(a.shape_string(), "(2x3)");
}

TEST(Evaluate, MatmulWithIdentity) {
  Graph g;
  g.set_output(matmul(g.constant(Array::identity(3)), g.input("a")));
  std::mt19937_64 rng(3);
  Bindings b{{"a", random_array(rng, 3, 3, -2, 2)}};
  EXPECT_EQ(evaluate(g, b), b["a"]);
}

TEST(Evaluate, SumOfSquares) {
  Graph g;
  g.set_output(sum(square(g.input("x"))));
  EXPECT_DOUBLE_EQ(evaluate(g, {{"x", Array::row({3.0, 4.0})}}).item(), 25.0);
}

TEST(Evaluate, SoftmaxRowsSumToOne) {
  Graph g;
  g.set_output(softmax(g.input("x")));
  std::mt19937_64 rng(5);
  const auto y = evaluate(g, {{"x", random_array(rng, 4, 6, -30, 30)}});
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += y(r, c);
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Evaluate, IsPure) {
  Graph g;
  auto x = g.input("x");
  g.set_output(sum(softplus(matmul(x, g.input("w"))) * sigmoid(x)));
  std::mt19937_64 rng(9);
  Bindings b{{"x", random_array(rng, 5, 5, -3, 3)}, {"w", random_array(rng, 5, 5, -1, 1)}};
  const Array first = evaluate(g, b);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(evaluate(g, b), first);
}

TEST(Evaluate, UnboundInputFails) {
  Graph g;
  g.set_output(sum(g.input("x") + g.input("y")));
  EXPECT_THROW(evaluate(g, {{"x", Array::scalar(1.0)}}), std::invalid_argument);
  EXPECT_THROW(gradient(g, {{"x", Array::scalar(1.0)}}), std::invalid_argument);
}

TEST(Evaluate, ShapeMismatchNamesTheNode) {
  Graph g;
  g.set_output(sum((g.input("a") + g.input("b")).named("bad_add")));
  try {
    evaluate(g, {{"a", Array(2, 3)}, {"b", Array(3, 2)}});
    FAIL() << "expected a shape error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("bad_add"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, NonFiniteNamesTheNode) {
  Graph g;
  g.set_output(sum(log(g.input("x")).named("the_log")));
  try {
    evaluate(g, {{"x", Array::row({1.0, -1.0})}});
    FAIL() << "expected a non-finite error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("the_log"), std::string::npos) << e.what();
  }
}

TEST(Gradient, SoftplusAtZeroIsHalf) {
  Graph g;
  g.set_output(sum(softplus(g.input("x"))));
  EXPECT_DOUBLE_EQ(gradient(g, {{"x", Array::scalar(0.0)}}).grads.at("x").item(), 0.5);
}

TEST(Gradient, SquareProduct) {
  Graph g;
  auto x = g.input("x");
  g.set_output(sum(x * x));
  EXPECT_DOUBLE_EQ(gradient(g, {{"x", Array::scalar(3.0)}}).grads.at("x").item(), 6.0);
}

TEST(Gradient, RequiresScalarOutput) {
  Graph g;
  g.set_output(exp(g.input("x")));
  EXPECT_THROW(gradient(g, {{"x", Array::row({1.0, 2.0})}}), NumericalError);
}

TEST(Gradient, ShapesMatchInputs) {
  Graph g;
  g.set_output(sum(matmul(g.input("a"), g.input("b")) + g.input("c")));
  std::mt19937_64 rng(1);
  const auto r = gradient(g, {{"a", random_array(rng, 2, 3, -1, 1)},
                              {"b", random_array(rng, 3, 4, -1, 1)},
                              {"c", random_array(rng, 1, 4, -1, 1)}});
  EXPECT_EQ(r.grads.at("a").shape_string(), "(2x3)");
  EXPECT_EQ(r.grads.at("b").shape_string(), "(3x4)");
  EXPECT_EQ(r.grads.at("c").shape_string(), "(1x4)");
  for (double v : r.grads.at("c").data()) EXPECT_DOUBLE_EQ(v, 2.0);  // broadcast over 2 rows
}

TEST(Gradient, KinksUseRightDerivative) {
  Graph g;
  auto x = g.input("x");
  g.set_output(sum(relu(x)) + sum(leaky_relu(x, 0.1)) + sum(max_const(x, 0.0)));
  EXPECT_DOUBLE_EQ(gradient(g, {{"x", Array::scalar(0.0)}}).grads.at("x").item(), 3.0);
}

TEST(CheckGradient, SoftplusNode) {
  Graph g;
  g.set_output(sum(softplus(g.input("x"))));
  std::mt19937_64 rng(2);
  const auto r = check_gradient(g, {{"x", random_array(rng, 1, 8, -3, 3)}}, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-7);
  EXPECT_FALSE(r.nonsmooth);
}

TEST(CheckGradient, FlagsReluKink) {
  Graph g;
  g.set_output(sum(relu(g.input("x"))));
  const auto r = check_gradient(g, {{"x", Array::row({0.0, 1.0})}}, 1e-5);
  EXPECT_TRUE(r.nonsmooth);
  ASSERT_FALSE(r.kink_nodes.empty());
}

TEST(CheckGradient, InputFilter) {
  Graph g;
  g.set_output(sum(g.input("a") * g.input("b")));
  const auto r = check_gradient(g, {{"a", Array::scalar(2.0)}, {"b", Array::scalar(3.0)}}, 1e-5, {"a"});
  EXPECT_EQ(r.worst_input.empty() ? std::string("a") : r.worst_input, "a");
  EXPECT_THROW(check_gradient(g, {{"a", Array::scalar(2.0)}, {"b", Array::scalar(3.0)}}, 0.0),
               std::invalid_argument);
}

// Every primitive against central differences at 100 random smooth points.
TEST(Property, PrimitiveGradientsMatchFiniteDifferences) {
  const std::vector<UnaryCase> unary = {
      {"neg", [](Node a) { return -a; }, -2, 2},
      {"log", [](Node a) { return log(a); }, 0.5, 3},
      {"exp", [](Node a) { return exp(a); }, -2, 2},
      {"square", [](Node a) { return square(a); }, -2, 2},
      {"sqrt", [](Node a) { return sqrt(a); }, 0.5, 3},
      {"softplus", [](Node a) { return softplus(a); }, -4, 4},
      {"sigmoid", [](Node a) { return sigmoid(a); }, -4, 4},
      {"relu", [](Node a) { return relu(a); }, -2, 2},
      {"leaky_relu", [](Node a) { return leaky_relu(a, 0.2); }, -2, 2},
      {"softmax", [](Node a) { return softmax(a); }, -1, 1},
      {"max_const", [](Node a) { return max_const(a, 0.3); }, -2, 2},
      {"add_const", [](Node a) { return a + 1.5; }, -2, 2},
      {"mul_const", [](Node a) { return a * -2.5; }, -2, 2},
      {"sum", [](Node a) { return sum(a); }, -2, 2},
      {"mean", [](Node a) { return mean(a); }, -2, 2},
      {"sum_rows", [](Node a) { return sum_rows(a); }, -2, 2},
      {"reshape_cols", [](Node a) { return reshape_cols(a, 2); }, -2, 2},
      {"columns", [](Node a) { return columns(a, {3, 0, 0}); }, -2, 2},
  };
  std::mt19937_64 rng(2024);
  for (const auto& c : unary) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      auto y = c.op(g.input("x"));
      g.set_output(sum(y * g.input("w")));
      Bindings b{{"x", random_array(rng, 3, 4, c.lo, c.hi)}};
      // Keep away from kinks: relu/leaky at 0, max_const at 0.3.
      for (auto& v : b["x"].values()) {
        if (std::abs(v) < 1e-3 || std::abs(v - 0.3) < 1e-3) v += 0.01;
      }
      Graph h;
      h.set_output(c.op(h.input("x")));
      const auto shape = evaluate(h, b);
      b["w"] = random_array(rng, shape.rows(), shape.cols(), 0.5, 3.0);
      const auto r = check_gradient(g, b, 1e-5, {"x"});
      EXPECT_FALSE(r.nonsmooth) << c.name;
      worst = std::max(worst, r.max_relative_error);
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }

  struct BinaryCase {
    const char* name;
    std::function<Node(Node, Node)> op;
    std::size_t ar, ac, br, bc;
  };
  const std::vector<BinaryCase> binary = {
      {"add", [](Node a, Node b) { return a + b; }, 3, 4, 1, 4},
      {"sub", [](Node a, Node b) { return a - b; }, 3, 4, 3, 1},
      {"mul", [](Node a, Node b) { return a * b; }, 3, 4, 3, 4},
      {"div", [](Node a, Node b) { return a / b; }, 3, 4, 1, 1},
      {"matmul", [](Node a, Node b) { return matmul(a, b); }, 3, 4, 4, 2},
      {"concat_cols", [](Node a, Node b) { return concat_cols(a, b); }, 3, 4, 3, 2},
  };
  for (const auto& c : binary) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      auto y = c.op(g.input("a"), g.input("b"));
      g.set_output(sum(y * g.input("w")));
      Bindings b{{"a", random_array(rng, c.ar, c.ac, -2, 2)}, {"b", random_array(rng, c.br, c.bc, 0.5, 2)}};
      Graph h;
      h.set_output(c.op(h.input("a"), h.input("b")));
      const auto shape = evaluate(h, b);
      b["w"] = random_array(rng, shape.rows(), shape.cols(), 0.5, 3.0);
      worst = std::max(worst, check_gradient(g, b, 1e-5, {"a", "b"}).max_relative_error);
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}

TEST(Property, GradientIsLinear) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Bindings b{{"x", random_array(rng, 4, 3, -2, 2)}, {"w", random_array(rng, 3, 3, -1, 1)}};
    auto build = [](Graph& g, int which) {
      auto x = g.input("x");
      auto w = g.input("w");
      Node f1 = sum(softplus(matmul(x, w)));
      Node f2 = sum(square(sigmoid(x) - 0.3) * 2.0) + mean(exp(matmul(x, w) * 0.1));
      if (which == 1) return f1;
      if (which == 2) return f2;
      return f1 + f2;
    };
    Graph g1, g2, g3;
    g1.set_output(build(g1, 1));
    g2.set_output(build(g2, 2));
    g3.set_output(build(g3, 3));
    const auto r1 = gradient(g1, b), r2 = gradient(g2, b), r3 = gradient(g3, b);
    for (const auto& name : {"x", "w"}) {
      const auto& a = r1.grads.at(name);
      const auto& c = r2.grads.at(name);
      const auto& s = r3.grads.at(name);
      for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], a[i] + c[i], 1e-12 * (1 + std::abs(s[i])));
    }
  }
}

TEST(Selectors, BinOneHotAndInRange) {
  Graph g;
  auto oh = bin_onehot(g.input("x"), g.input("k"));
  g.set_output(oh);
  Bindings b{{"x", Array::column({-1.0, 0.0, 0.5, 2.0, -5.0})},
             {"k", Array({5, 3}, {-1, 0, 1, -1, 0, 1, -1, 0, 1, -1, 0, 1, -1, 0, 1})}};
  const auto y = evaluate(g, b);
  // bins [-1,0), [0,1]; values outside clamp to the end bins
  const double want[5][2] = {{1, 0}, {0, 1}, {0, 1}, {0, 1}, {1, 0}};
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(y(r, c), want[r][c]) << r;

  Graph h;
  h.set_output(in_range(h.input("x"), 1.0));
  const auto m = evaluate(h, {{"x", Array::row({-2.0, -1.0, 0.0, 1.0, 1.5})}});
  EXPECT_EQ(m, Array::row({0, 1, 1, 1, 0}));
}
