#pragma once

// Identifiability measurements between true sources and recovered latents.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "iflow/common.hpp"
#include "iflow/hungarian.hpp"
#include "iflow/prior.hpp"

namespace iflow {

struct CorrelationMatrix {
  Matrix abs_corr;     // n x n, |pearson(A[:, i], B[:, j])|
  Matrix signed_corr;  // n x n
  std::vector<std::string> warnings;
};

// Constant columns yield a zero entry and a warning.
inline CorrelationMatrix pearson_corr_matrix(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("pearson_corr_matrix: sample counts differ");
  if (a.rows() < 2) throw std::invalid_argument("pearson_corr_matrix: need at least 2 samples");
  const Matrix ac = a.rowwise() - a.colwise().mean();
  const Matrix bc = b.rowwise() - b.colwise().mean();
  const Vector an = ac.colwise().norm();
  const Vector bn = bc.colwise().norm();
  CorrelationMatrix out;
  out.signed_corr = Matrix::Zero(a.cols(), b.cols());
  for (Eigen::Index i = 0; i < a.cols(); ++i) {
    if (an(i) == 0.0) out.warnings.push_back("column " + std::to_string(i) + " of the first input is constant");
  }
  for (Eigen::Index j = 0; j < b.cols(); ++j) {
    if (bn(j) == 0.0) out.warnings.push_back("column " + std::to_string(j) + " of the second input is constant");
  }
  for (Eigen::Index i = 0; i < a.cols(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      if (an(i) == 0.0 || bn(j) == 0.0) continue;
      out.signed_corr(i, j) = std::clamp(ac.col(i).dot(bc.col(j)) / (an(i) * bn(j)), -1.0, 1.0);
    }
  }
  out.abs_corr = out.signed_corr.cwiseAbs();
  return out;
}

struct MccReport {
  double mcc = 0.0;
  std::vector<std::size_t> assignment;  // true source i -> latent assignment[i]
  std::vector<int> signs;
  std::vector<double> per_pair_corr;
  Matrix corr_matrix;
  std::vector<std::string> warnings;
};

inline MccReport mcc(const Matrix& z_true, const Matrix& z_hat) {
  if (z_true.rows() != z_hat.rows() || z_true.cols() != z_hat.cols()) {
    throw std::invalid_argument("mcc: shapes of true and recovered latents differ");
  }
  const auto corr = pearson_corr_matrix(z_true, z_hat);
  const auto a = max_weight_assignment(corr.abs_corr);
  MccReport r;
  r.corr_matrix = corr.abs_corr;
  r.warnings = corr.warnings;
  r.assignment = a.row_to_col;
  const auto n = static_cast<std::size_t>(z_true.cols());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const auto jj = static_cast<Eigen::Index>(a.row_to_col[i]);
    r.per_pair_corr.push_back(corr.abs_corr(ii, jj));
    r.signs.push_back(corr.signed_corr(ii, jj) < 0.0 ? -1 : 1);
    s += corr.abs_corr(ii, jj);
  }
  r.mcc = n ? s / static_cast<double>(n) : 0.0;
  return r;
}

struct AffineFit {
  double r_squared = 0.0;           // macro average over the 2n target statistics
  std::vector<double> per_target;   // r^2 of each target column
  Matrix a;                         // 2n x 2n: T(z_true) ~ T(z_hat) a^T + c
  Vector c;                         // 2n
  std::size_t rank = 0;
  std::vector<std::string> warnings;
};

// Least-squares fit of the true sufficient statistics (z_i^2, z_i) on an
// affine function of the recovered ones.
inline AffineFit affine_equivalence_residual(const Matrix& z_true, const Matrix& z_hat) {
  if (z_true.rows() != z_hat.rows() || z_true.cols() != z_hat.cols()) {
    throw std::invalid_argument("affine_equivalence_residual: shapes differ");
  }
  const Eigen::Index k = 2 * z_true.cols();
  if (z_true.rows() < k + 1) {
    throw std::invalid_argument("affine_equivalence_residual: need at least 2n+1 samples");
  }
  const Matrix target = sufficient_stats_batch(z_true);
  const Matrix stats = sufficient_stats_batch(z_hat);
  // Standardise regressors for conditioning; undone when reporting A and c.
  const Vector mu = stats.colwise().mean();
  Vector sd = ((stats.rowwise() - mu.transpose()).colwise().norm() /
               std::sqrt(static_cast<double>(stats.rows())))
                  .transpose();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (sd(j) == 0.0) sd(j) = 1.0;
  }
  Matrix design(stats.rows(), k + 1);
  design.leftCols(k) = (stats.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array();
  design.col(k).setOnes();

  AffineFit fit;
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  fit.rank = static_cast<std::size_t>(qr.rank());
  if (qr.rank() < k + 1) {
    fit.warnings.push_back("rank-deficient regression (rank " + std::to_string(qr.rank()) + " of " +
                           std::to_string(k + 1) + ")");
  }
  const Matrix coef = qr.solve(target);  // (k+1) x k
  const Matrix resid = target - design * coef;
  fit.per_target.resize(static_cast<std::size_t>(k));
  double total = 0.0;
  for (Eigen::Index j = 0; j < k; ++j) {
    const double mean = target.col(j).mean();
    const double ss_tot = (target.col(j).array() - mean).square().sum();
    const double ss_res = resid.col(j).squaredNorm();
    const double r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
    fit.per_target[static_cast<std::size_t>(j)] = r2;
    total += r2;
  }
  fit.r_squared = total / static_cast<double>(k);
  // Back to unstandardised coordinates: target = stats * A^T + c.
  fit.a = (coef.topRows(k).array().colwise() / sd.array()).matrix().transpose();
  fit.c = coef.row(k).transpose() - fit.a * mu;
  return fit;
}

struct DimensionSeries {
  std::size_t source = 0;
  std::size_t latent = 0;
  int sign = 1;
  double corr = 0.0;
  std::vector<double> truth;      // standardised true source
  std::vector<double> recovered;  // standardised, sign-corrected latent
};

inline std::vector<DimensionSeries> per_dimension_report(const Matrix& z_true, const Matrix& z_hat,
                                                         const MccReport& match) {
  std::vector<DimensionSeries> out;
  auto standardise = [](const Vector& v) {
    const double m = v.mean();
    const double sd = std::sqrt((v.array() - m).square().mean());
    std::vector<double> s(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) s[static_cast<std::size_t>(i)] = sd > 0.0 ? (v(i) - m) / sd : 0.0;
    return s;
  };
  for (std::size_t i = 0; i < match.assignment.size(); ++i) {
    DimensionSeries d;
    d.source = i;
    d.latent = match.assignment[i];
    d.sign = match.signs[i];
    d.truth = standardise(z_true.col(static_cast<Eigen::Index>(i)));
    d.recovered = standardise(static_cast<double>(d.sign) * z_hat.col(static_cast<Eigen::Index>(d.latent)));
    double s = 0.0;
    for (std::size_t r = 0; r < d.truth.size(); ++r) s += d.truth[r] * d.recovered[r];
    d.corr = d.truth.empty() ? 0.0 : s / static_cast<double>(d.truth.size());
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace iflow
