#pragma once

// Reference computations used only by tests. Each is written independently of
// the library code it checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

// Composite Simpson rule on [a, b] with n (even) intervals.
inline double simpson(const std::function<double(double)>& f, double a, double b, long n) {
  if (n % 2) ++n;
  const double h = (b - a) / static_cast<double>(n);
  double s = f(a) + f(b);
  for (long i = 1; i < n; ++i) s += f(a + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

// Central-difference Jacobian of f: R^n -> R^n at x.
inline Eigen::MatrixXd fd_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h) {
  const auto n = x.size();
  Eigen::MatrixXd j(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::VectorXd xp = x, xm = x;
    xp(c) += h;
    xm(c) -= h;
    j.col(c) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

// Best total weight over all n! permutations.
inline double brute_force_max_assignment(const Eigen::MatrixXd& w) {
  std::vector<int> p(static_cast<std::size_t>(w.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += w(static_cast<Eigen::Index>(i), p[i]);
    best = std::max(best, s);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

// Jarque-Bera statistic; chi-square with 2 dof under normality, so
// p = exp(-JB / 2).
inline double jarque_bera_p(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - m;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const double skew = m3 / std::pow(m2, 1.5);
  const double kurt = m4 / (m2 * m2);
  const double jb = n / 6.0 * (skew * skew + 0.25 * (kurt - 3.0) * (kurt - 3.0));
  return std::exp(-jb / 2.0);
}

// Rational-quadratic spline by direct construction. Knots come from the raw
// layout [K widths | K heights | K-1 derivatives]; on each bin the map is
// P(t)/Q(t) with quadratic P and Q(t) = 1 + c t (1 - t), where (p0, p1, p2, c)
// solve the linear system fixed by the end values and end slopes.
struct DenseSpline {
  std::vector<double> xs, ys, ds;
  double bound;

  DenseSpline(const std::vector<double>& raw, int K, double B) : bound(B) {
    auto bins = [&](int off) {
      std::vector<double> e(static_cast<std::size_t>(K));
      double mx = raw[static_cast<std::size_t>(off)];
      for (int i = 0; i < K; ++i) mx = std::max(mx, raw[static_cast<std::size_t>(off + i)]);
      double z = 0.0;
      for (int i = 0; i < K; ++i) z += e[static_cast<std::size_t>(i)] = std::exp(raw[static_cast<std::size_t>(off + i)] - mx);
      for (auto& v : e) v = 2.0 * B * (1e-3 / K + (1.0 - 1e-3) * v / z);
      return e;
    };
    const auto w = bins(0), h = bins(K);
    xs = {-B};
    ys = {-B};
    for (int k = 0; k < K; ++k) {
      xs.push_back(xs.back() + w[static_cast<std::size_t>(k)]);
      ys.push_back(ys.back() + h[static_cast<std::size_t>(k)]);
    }
    xs.back() = B;
    ys.back() = B;
    ds = {1.0};
    for (int k = 1; k < K; ++k) ds.push_back(1e-3 + std::log1p(std::exp(raw[static_cast<std::size_t>(2 * K + k - 1)])));
    ds.push_back(1.0);
  }

  // (y, dy/dx)
  std::pair<double, double> operator()(double x) const {
    if (x <= -bound || x >= bound) return {x, 1.0};
    std::size_t k = 0;
    while (k + 2 < xs.size() && x >= xs[k + 1]) ++k;
    const double w = xs[k + 1] - xs[k];
    const double y0 = ys[k], y1 = ys[k + 1];
    const double D0 = ds[k] * w, D1 = ds[k + 1] * w;  // slopes in t units
    Eigen::Matrix4d a;
    Eigen::Vector4d rhs;
    a << 1, 0, 0, 0,  //
        1, 1, 1, 0,   //
        0, 1, 0, -y0, //
        0, 1, 2, y1;
    rhs << y0, y1, D0, D1;
    const Eigen::Vector4d p = a.fullPivLu().solve(rhs);
    const double t = (x - xs[k]) / w;
    const double P = p(0) + p(1) * t + p(2) * t * t;
    const double dP = p(1) + 2.0 * p(2) * t;
    const double Q = 1.0 + p(3) * t * (1.0 - t);
    const double dQ = p(3) * (1.0 - 2.0 * t);
    return {P / Q, (dP * Q - P * dQ) / (Q * Q) / w};
  }
};

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace oracle
