#pragma once

// Monotone rational-quadratic splines with linear tails.
//
// On [-B, B] the map interpolates K+1 knots (x_k, y_k) with positive knot
// derivatives d_k. Within bin k, with xi = (x - x_k) / w_k, s_k = h_k / w_k,
//
//   y = y_k + h_k [s_k xi^2 + d_k xi (1 - xi)] / [s_k + (d_{k+1} + d_k - 2 s_k) xi (1 - xi)]
//
// Outside [-B, B] the map is the identity; d_0 = d_K = 1 so value and slope
// are continuous at the boundary.
//
// Raw (unnormalised) parameters per dimension are laid out as
//   [K widths | K heights | K-1 interior derivatives].

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "iflow/autodiff.hpp"
#include "iflow/error.hpp"

namespace iflow::spline {

// Total mass reserved for the minimum bin size: each bin gets at least
// kMinBinMass / K of the 2B interval.
inline constexpr double kMinBinMass = 1e-3;
inline constexpr double kMinDerivative = 1e-3;

inline constexpr std::size_t params_per_dim(std::size_t bins) { return 3 * bins - 1; }

// Raw derivative value that normalises to exactly 1.
inline double identity_raw_derivative() { return std::log(std::expm1(1.0 - kMinDerivative)); }

struct SplineParams {
  std::size_t bins = 8;
  double tail_bound = 5.0;
  std::vector<double> raw;  // dims * params_per_dim(bins)

  std::size_t dims() const { return raw.size() / params_per_dim(bins); }

  std::span<const double> dim(std::size_t i) const {
    const auto p = params_per_dim(bins);
    return std::span<const double>(raw).subspan(i * p, p);
  }

  // Parameters whose spline is the identity on every dimension.
  static SplineParams identity(std::size_t dims, std::size_t bins, double tail_bound) {
    SplineParams sp;
    sp.bins = bins;
    sp.tail_bound = tail_bound;
    sp.raw.assign(dims * params_per_dim(bins), 0.0);
    const double d = identity_raw_derivative();
    for (std::size_t i = 0; i < dims; ++i)
      for (std::size_t k = 0; k + 1 < bins; ++k) sp.raw[i * params_per_dim(bins) + 2 * bins + k] = d;
    return sp;
  }
};

// Normalised knots of one dimension.
struct Knots {
  std::vector<double> xs;  // K+1 ascending, xs[0] = -B, xs[K] = B
  std::vector<double> ys;
  std::vector<double> ds;  // K+1 positive, ds[0] = ds[K] = 1
  double tail_bound = 0.0;

  std::size_t bins() const { return xs.size() - 1; }
};

namespace detail {

inline std::vector<double> normalised_bins(std::span<const double> raw, double total) {
  const std::size_t k = raw.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : raw) mx = std::max(mx, v);
  std::vector<double> out(k);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += (out[i] = std::exp(raw[i] - mx));
  const double min_frac = kMinBinMass / static_cast<double>(k);
  for (auto& v : out) v = total * (min_frac + (1.0 - kMinBinMass) * v / z);
  return out;
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

inline Knots make_knots(std::span<const double> raw, std::size_t bins, double tail_bound) {
  if (raw.size() != params_per_dim(bins)) {
    throw std::invalid_argument("make_knots: expected " + std::to_string(params_per_dim(bins)) +
                                " raw values");
  }
  for (double v : raw) {
    if (!std::isfinite(v)) throw NumericalError("spline parameters contain a non-finite value");
  }
  const double span = 2.0 * tail_bound;
  const auto widths = detail::normalised_bins(raw.subspan(0, bins), span);
  const auto heights = detail::normalised_bins(raw.subspan(bins, bins), span);
  Knots kn;
  kn.tail_bound = tail_bound;
  kn.xs.resize(bins + 1);
  kn.ys.resize(bins + 1);
  kn.ds.assign(bins + 1, 1.0);
  kn.xs[0] = kn.ys[0] = -tail_bound;
  for (std::size_t k = 0; k < bins; ++k) {
    kn.xs[k + 1] = kn.xs[k] + widths[k];
    kn.ys[k + 1] = kn.ys[k] + heights[k];
  }
  kn.xs[bins] = kn.ys[bins] = tail_bound;
  for (std::size_t k = 1; k < bins; ++k) {
    kn.ds[k] = kMinDerivative + detail::softplus(raw[2 * bins + k - 1]);
  }
  return kn;
}

inline std::size_t find_bin(const std::vector<double>& edges, double v) {
  const std::size_t bins = edges.size() - 1;
  std::size_t k = 0;
  while (k + 1 < bins && edges[k + 1] <= v) ++k;
  return k;
}

// Returns (y, log dy/dx) for a scalar input.
inline std::pair<double, double> forward_scalar(double x, const Knots& kn) {
  if (!std::isfinite(x)) throw NumericalError("spline input is not finite");
  const double b = kn.tail_bound;
  if (x < -b || x > b) return {x, 0.0};
  const std::size_t k = find_bin(kn.xs, x);
  const double w = kn.xs[k + 1] - kn.xs[k];
  const double h = kn.ys[k + 1] - kn.ys[k];
  const double s = h / w;
  const double d0 = kn.ds[k];
  const double d1 = kn.ds[k + 1];
  const double t = (x - kn.xs[k]) / w;
  const double tt = t * (1.0 - t);
  const double den = s + (d1 + d0 - 2.0 * s) * tt;
  const double y = kn.ys[k] + h * (s * t * t + d0 * tt) / den;
  const double num_d = s * s * (d1 * t * t + 2.0 * s * tt + d0 * (1.0 - t) * (1.0 - t));
  if (!(num_d > 0.0) || !(den > 0.0)) {
    throw std::logic_error("rational-quadratic spline produced a non-positive derivative");
  }
  return {y, std::log(num_d) - 2.0 * std::log(den)};
}

struct QuadraticRoots {
  double a = 0.0, b = 0.0, c = 0.0;
  double first = 0.0;   // (-b + sqrt(disc)) / (2a), evaluated stably
  double second = 0.0;  // (-b - sqrt(disc)) / (2a); infinite when a == 0
};

// Both roots of the quadratic in xi solved when inverting bin k at y.
inline QuadraticRoots inverse_roots(double y, const Knots& kn, std::size_t k) {
  const double w = kn.xs[k + 1] - kn.xs[k];
  const double h = kn.ys[k + 1] - kn.ys[k];
  const double s = h / w;
  const double d0 = kn.ds[k];
  const double d1 = kn.ds[k + 1];
  const double dy = y - kn.ys[k];
  const double sum = d1 + d0 - 2.0 * s;
  QuadraticRoots r;
  r.a = h * (s - d0) + dy * sum;
  r.b = h * d0 - dy * sum;
  r.c = -s * dy;
  const double disc = std::max(0.0, r.b * r.b - 4.0 * r.a * r.c);
  const double sq = std::sqrt(disc);
  r.first = (2.0 * r.c) / (-r.b - sq);
  r.second = r.a != 0.0 ? (-r.b - sq) / (2.0 * r.a) : std::numeric_limits<double>::infinity();
  return r;
}

// Returns (x, log dx/dy) for a scalar output.
inline std::pair<double, double> inverse_scalar(double y, const Knots& kn) {
  if (!std::isfinite(y)) throw NumericalError("spline input is not finite");
  const double b = kn.tail_bound;
  if (y < -b || y > b) return {y, 0.0};
  const std::size_t k = find_bin(kn.ys, y);
  const auto roots = inverse_roots(y, kn, k);
  constexpr double tol = 1e-9;
  const auto admissible = [](double t) { return std::isfinite(t) && t >= -tol && t <= 1.0 + tol; };
  double t = 0.0;
  if (admissible(roots.first)) {
    t = roots.first;
  } else if (admissible(roots.second)) {
    t = roots.second;
  } else {
    throw std::logic_error("rational-quadratic inverse found no root inside the bin");
  }
  t = std::clamp(t, 0.0, 1.0);
  const double x = kn.xs[k] + t * (kn.xs[k + 1] - kn.xs[k]);
  const auto [y_check, logd] = forward_scalar(x, kn);
  (void)y_check;
  return {x, -logd};
}

struct SplineOutput {
  std::vector<double> values;
  double log_abs_det = 0.0;
};

inline SplineOutput rq_spline_forward(std::span<const double> x, const SplineParams& params) {
  if (x.size() != params.dims()) throw std::invalid_argument("rq_spline_forward: dimension mismatch");
  SplineOutput out;
  out.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto kn = make_knots(params.dim(i), params.bins, params.tail_bound);
    const auto [y, ld] = forward_scalar(x[i], kn);
    out.values[i] = y;
    out.log_abs_det += ld;
  }
  return out;
}

inline SplineOutput rq_spline_inverse(std::span<const double> y, const SplineParams& params) {
  if (y.size() != params.dims()) throw std::invalid_argument("rq_spline_inverse: dimension mismatch");
  SplineOutput out;
  out.values.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto kn = make_knots(params.dim(i), params.bins, params.tail_bound);
    const auto [x, ld] = inverse_scalar(y[i], kn);
    out.values[i] = x;
    out.log_abs_det += ld;
  }
  return out;
}

// ---- differentiable form ----------------------------------------------------

struct SplineNodes {
  ad::Node y;        // batch x dims
  ad::Node log_det;  // batch x 1
};

// Records the batched spline on x (batch x dims) with raw parameters
// (batch x dims*params_per_dim(bins)) into the graph.
inline SplineNodes rq_spline_graph(ad::Graph& g, ad::Node x, ad::Node raw, std::size_t dims,
                                   std::size_t bins, double tail_bound) {
  using namespace ad;
  const std::size_t p = params_per_dim(bins);
  const double span = 2.0 * tail_bound;
  const double min_frac = kMinBinMass / static_cast<double>(bins);

  Node r = reshape_cols(raw, p);  // (batch*dims) x p
  std::vector<std::size_t> idx_w(bins), idx_h(bins), idx_d(bins - 1);
  for (std::size_t k = 0; k < bins; ++k) {
    idx_w[k] = k;
    idx_h[k] = bins + k;
  }
  for (std::size_t k = 0; k + 1 < bins; ++k) idx_d[k] = 2 * bins + k;

  Node wf = softmax(columns(r, idx_w)) * (1.0 - kMinBinMass) + min_frac;
  Node hf = softmax(columns(r, idx_h)) * (1.0 - kMinBinMass) + min_frac;

  // Strictly-lower cumulative sums: left[:, k] = sum_{j<k} frac[:, j].
  Array lower(bins, bins);
  for (std::size_t j = 0; j < bins; ++j)
    for (std::size_t k = j + 1; k < bins; ++k) lower(j, k) = 1.0;
  Array edges(bins, bins + 1);
  for (std::size_t j = 0; j < bins; ++j)
    for (std::size_t k = j + 1; k <= bins; ++k) edges(j, k) = 1.0;
  Node lower_c = g.constant(lower, "cumsum_lower");
  Node edges_c = g.constant(edges, "cumsum_edges");

  Node x_left = matmul(wf, lower_c) * span - tail_bound;
  Node y_left = matmul(hf, lower_c) * span - tail_bound;
  Node x_knots = matmul(wf, edges_c) * span - tail_bound;
  Node widths = wf * span;
  Node heights = hf * span;

  // Knot derivatives with boundary values pinned to 1.
  Array embed(bins - 1, bins + 1);
  for (std::size_t k = 0; k + 1 < bins; ++k) embed(k, k + 1) = 1.0;
  Array ends(1, bins + 1);
  ends(0, 0) = 1.0;
  ends(0, bins) = 1.0;
  Node interior = softplus(columns(r, idx_d)) + kMinDerivative;
  Node dfull = matmul(interior, g.constant(embed, "deriv_embed")) + g.constant(ends, "deriv_ends");
  std::vector<std::size_t> lo(bins), hi(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    lo[k] = k;
    hi[k] = k + 1;
  }
  Node d_left = columns(dfull, lo);
  Node d_right = columns(dfull, hi);

  Node xr = reshape_cols(x, 1);
  Node inside = in_range(xr, tail_bound);
  Node outside = 1.0 - inside;
  Node xin = inside * xr;
  Node onehot = bin_onehot(xin, x_knots);
  auto select = [&](Node v) { return sum_rows(onehot * v); };

  Node xk = select(x_left);
  Node wk = select(widths);
  Node yk = select(y_left);
  Node hk = select(heights);
  Node dk = select(d_left);
  Node dk1 = select(d_right);

  Node t = (xin - xk) / wk;
  Node s = hk / wk;
  Node one_minus_t = 1.0 - t;
  Node tt = t * one_minus_t;
  Node t2 = square(t);
  Node num = hk * (s * t2 + dk * tt);
  Node den = (s + (dk1 + dk - 2.0 * s) * tt).named("spline_denominator");
  Node y_in = yk + num / den;
  Node deriv_num = dk1 * t2 + 2.0 * s * tt + dk * square(one_minus_t);
  Node logd = 2.0 * log(s) + log(deriv_num).named("spline_log_derivative") - 2.0 * log(den);

  Node y = inside * y_in + outside * xr;
  Node ld = inside * logd;
  return {reshape_cols(y, dims), sum_rows(reshape_cols(ld, dims))};
}

}  // namespace iflow::spline
