#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "iflow/autodiff.hpp"

namespace iflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ParamMap = ad::Bindings;
using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from (seed, tag).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seed stream tags; one per consumer so that streams never overlap.
enum SeedTag : std::uint64_t {
  kTagTrueParams = 1,
  kTagSources = 2,
  kTagMixing = 3,
  kTagFlowInit = 4,
  kTagPriorInit = 5,
  kTagBatches = 6,
};

inline ad::Array to_array(const Matrix& m) {
  ad::Array out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  return out;
}

inline Matrix to_matrix(const ad::Array& a) {
  Matrix out(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a(r, c);
  return out;
}

inline std::vector<double> column_of(const ad::Array& a, std::size_t c) {
  std::vector<double> out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) out[r] = a(r, c);
  return out;
}

// PyTorch-style default initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ad::Array uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Array out(rows, cols);
  for (auto& v : out.values()) v = dist(rng);
  return out;
}

// Overwrites every parameter with U(-scale, scale) draws; used to obtain
// non-trivial random models.
inline void randomize_params(ParamMap& params, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& [name, arr] : params) {
    for (auto& v : arr.values()) v = dist(rng);
  }
}

}  // namespace iflow
