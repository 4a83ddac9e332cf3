#pragma once

// Synthetic nonstationary-Gaussian benchmark: M segments of L i.i.d. samples,
// per-segment Gaussian sources, and an invertible leaky-relu MLP mixing.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iflow/common.hpp"
#include "iflow/error.hpp"

namespace iflow {

struct SynthConfig {
  std::size_t segments = 40;            // M
  std::size_t samples_per_segment = 1000;  // L
  std::size_t dim = 5;                  // n
  std::size_t mixing_depth = 2;         // number of weight matrices; 0 = no mixing
  double mixing_slope = 0.2;
  double mean_low = -5.0;
  double mean_high = 5.0;
  double var_low = 0.5;
  double var_high = 3.0;
  double max_condition = 1e4;
};

struct SegmentGaussians {
  Matrix variance;  // M x n
  Matrix mean;      // M x n

  std::size_t segments() const { return static_cast<std::size_t>(variance.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(variance.cols()); }

  Matrix xi() const { return (-0.5 * variance.array().inverse()).matrix(); }
  Matrix eta() const { return (mean.array() / variance.array()).matrix(); }

  static SegmentGaussians from_natural(const Matrix& xi, const Matrix& eta) {
    SegmentGaussians g;
    g.variance = (-0.5 * xi.array().inverse()).matrix();
    g.mean = (eta.array() * g.variance.array()).matrix();
    return g;
  }
};

inline SegmentGaussians sample_true_params(std::size_t segments, std::size_t dim, std::uint64_t seed,
                                           const SynthConfig& ranges = {}) {
  if (segments == 0 || dim == 0) throw std::invalid_argument("sample_true_params: M and n must be >= 1");
  Rng rng(mix_seed(seed, kTagTrueParams));
  std::uniform_real_distribution<double> var(ranges.var_low, ranges.var_high);
  std::uniform_real_distribution<double> mu(ranges.mean_low, ranges.mean_high);
  SegmentGaussians g;
  g.variance.resize(static_cast<Eigen::Index>(segments), static_cast<Eigen::Index>(dim));
  g.mean.resize(g.variance.rows(), g.variance.cols());
  for (Eigen::Index s = 0; s < g.variance.rows(); ++s) {
    for (Eigen::Index i = 0; i < g.variance.cols(); ++i) {
      g.variance(s, i) = var(rng);
      g.mean(s, i) = mu(rng);
    }
  }
  return g;
}

struct Sources {
  Matrix z;                        // (M*L) x n
  Matrix u;                        // (M*L) x M one-hot
  std::vector<std::size_t> segment;  // per row
};

inline Matrix one_hot(const std::vector<std::size_t>& segment, std::size_t segments) {
  Matrix u = Matrix::Zero(static_cast<Eigen::Index>(segment.size()), static_cast<Eigen::Index>(segments));
  for (std::size_t r = 0; r < segment.size(); ++r) {
    u(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(segment[r])) = 1.0;
  }
  return u;
}

inline Sources generate_sources(const SegmentGaussians& params, std::size_t samples_per_segment,
                                std::uint64_t seed) {
  if (samples_per_segment == 0) throw std::invalid_argument("generate_sources: L must be >= 1");
  Rng rng(mix_seed(seed, kTagSources));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t m = params.segments();
  const auto n = static_cast<Eigen::Index>(params.dim());
  Sources out;
  out.z.resize(static_cast<Eigen::Index>(m * samples_per_segment), n);
  out.segment.resize(m * samples_per_segment);
  std::size_t row = 0;
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t l = 0; l < samples_per_segment; ++l, ++row) {
      out.segment[row] = s;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto si = static_cast<Eigen::Index>(s);
        out.z(static_cast<Eigen::Index>(row), i) =
            params.mean(si, i) + std::sqrt(params.variance(si, i)) * normal(rng);
      }
    }
  }
  out.u = one_hot(out.segment, m);
  return out;
}

// x = W_D leaky(W_{D-1} ... leaky(W_1 z)); the last layer has no activation.
struct MixingNet {
  std::vector<Matrix> weights;  // each n x n, applied as h <- W h
  double slope = 0.2;

  std::size_t depth() const { return weights.size(); }

  Matrix mix(const Matrix& z) const {
    Matrix h = z;  // rows are samples
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = h * weights[l].transpose();
      if (l + 1 < weights.size()) h = h.unaryExpr([s = slope](double v) { return v >= 0.0 ? v : s * v; });
    }
    return h;
  }

  Matrix unmix(const Matrix& x) const {
    Matrix h = x;
    for (std::size_t k = weights.size(); k-- > 0;) {
      if (k + 1 < weights.size()) h = h.unaryExpr([s = slope](double v) { return v >= 0.0 ? v : v / s; });
      h = h * weights[k].inverse().transpose();
    }
    return h;
  }
};

inline double condition_number(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return std::numeric_limits<double>::infinity();
  const double smin = sv(sv.size() - 1);
  return smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
}

// Standard-normal weight matrices, each resampled until its condition number
// is below max_condition.
inline MixingNet make_mixing_net(std::size_t dim, std::size_t depth, std::uint64_t seed,
                                 double slope = 0.2, double max_condition = 1e4,
                                 std::size_t budget = 10000) {
  if (depth == 0) throw std::invalid_argument("make_mixing_net: depth must be >= 1");
  if (!(slope > 0.0)) throw std::invalid_argument("make_mixing_net: leaky slope must be positive");
  Rng rng(mix_seed(seed, kTagMixing));
  std::normal_distribution<double> normal(0.0, 1.0);
  MixingNet net;
  net.slope = slope;
  const auto n = static_cast<Eigen::Index>(dim);
  for (std::size_t l = 0; l < depth; ++l) {
    bool accepted = false;
    for (std::size_t attempt = 0; attempt < budget; ++attempt) {
      Matrix w(n, n);
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c) w(r, c) = normal(rng);
      if (condition_number(w) < max_condition) {
        net.weights.push_back(std::move(w));
        accepted = true;
        break;
      }
    }
    if (!accepted) throw NumericalError("make_mixing_net: no well-conditioned matrix within the resampling budget");
  }
  return net;
}

struct DatasetMeta {
  std::uint64_t seed = 1;
  std::size_t segments = 0;
  std::size_t samples_per_segment = 0;
  std::size_t dim = 0;
  std::size_t aux_dim = 0;
  std::size_t mixing_depth = 0;
  std::string fingerprint;
};

struct SyntheticDataset {
  Matrix x;       // (M*L) x n
  Matrix u;       // (M*L) x m, m = M
  Matrix z_true;  // (M*L) x n
  std::vector<std::size_t> segment_index;
  SegmentGaussians truth;
  MixingNet mixing;
  DatasetMeta meta;

  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

inline SyntheticDataset generate_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  SyntheticDataset ds;
  ds.truth = sample_true_params(cfg.segments, cfg.dim, seed, cfg);
  auto src = generate_sources(ds.truth, cfg.samples_per_segment, seed);
  ds.z_true = std::move(src.z);
  ds.u = std::move(src.u);
  ds.segment_index = std::move(src.segment);
  ds.mixing.slope = cfg.mixing_slope;
  if (cfg.mixing_depth > 0) {
    ds.mixing = make_mixing_net(cfg.dim, cfg.mixing_depth, seed, cfg.mixing_slope, cfg.max_condition);
  }
  ds.x = ds.mixing.mix(ds.z_true);
  ds.meta.seed = seed;
  ds.meta.segments = cfg.segments;
  ds.meta.samples_per_segment = cfg.samples_per_segment;
  ds.meta.dim = cfg.dim;
  ds.meta.aux_dim = cfg.segments;
  ds.meta.mixing_depth = cfg.mixing_depth;
  return ds;
}

// ---- variability condition ---------------------------------------------------

struct AssumptionReport {
  bool rank_ok = false;
  double condition_number = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> segments;  // u^0 first, then the nk compared segments
};

// lambda(u^s) stacked per dimension as (xi_1, eta_1, xi_2, eta_2, ...).
inline Vector natural_vector(const SegmentGaussians& p, std::size_t s) {
  const auto n = static_cast<Eigen::Index>(p.dim());
  const Matrix xi = p.xi();
  const Matrix eta = p.eta();
  Vector v(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v(2 * i) = xi(static_cast<Eigen::Index>(s), i);
    v(2 * i + 1) = eta(static_cast<Eigen::Index>(s), i);
  }
  return v;
}

inline double l_matrix_condition(const SegmentGaussians& p, const std::vector<std::size_t>& chosen) {
  const auto nk = static_cast<Eigen::Index>(chosen.size() - 1);
  const Vector base = natural_vector(p, chosen[0]);
  Matrix l(nk, nk);
  for (Eigen::Index c = 0; c < nk; ++c) l.col(c) = natural_vector(p, chosen[c + 1]) - base;
  return condition_number(l);
}

// Checks that nk+1 segments exist whose natural-parameter differences form an
// invertible nk x nk matrix (condition number below 1e8). Tries the first
// nk+1 segments, then other subsets up to a fixed search budget.
inline AssumptionReport check_assumption_L(const SegmentGaussians& p, double max_condition = 1e8,
                                           std::size_t search_budget = 20000) {
  constexpr std::size_t k = 2;
  const std::size_t nk = p.dim() * k;
  const std::size_t m = p.segments();
  if (m < nk + 1) {
    throw ConfigError("check_assumption_L: need at least nk+1 = " + std::to_string(nk + 1) +
                      " distinct segments for an nk x nk variability matrix, have " + std::to_string(m));
  }
  AssumptionReport best;
  std::vector<std::size_t> idx(nk + 1);
  for (std::size_t i = 0; i <= nk; ++i) idx[i] = i;
  best.segments = idx;
  std::size_t tried = 0;
  while (true) {
    const double cond = l_matrix_condition(p, idx);
    if (!(cond >= best.condition_number)) {
      best.condition_number = cond;
      best.segments = idx;
    }
    if (cond < max_condition) break;
    if (++tried >= search_budget) break;
    // next combination of nk+1 out of m, lexicographic
    bool advanced = false;
    for (std::size_t i = nk + 1; i-- > 0;) {
      if (idx[i] < m - (nk + 1) + i) {
        ++idx[i];
        for (std::size_t j = i + 1; j <= nk; ++j) idx[j] = idx[j - 1] + 1;
        advanced = true;
        break;
      }
    }
    if (!advanced) break;
  }
  best.rank_ok = best.condition_number < max_condition;
  return best;
}

}  // namespace iflow
