#pragma once

// Masked autoregressive MLP. Output block i (params_per_output values) only
// sees inputs 0..i-1; block 0 therefore reduces to its trainable bias.

#include <cstddef>
#include <string>
#include <vector>

#include "iflow/autodiff.hpp"
#include "iflow/common.hpp"

namespace iflow {

struct MadeShape {
  std::size_t inputs = 2;
  std::size_t hidden = 64;
  std::size_t hidden_layers = 2;
  std::size_t outputs_per_input = 1;
  double leaky_slope = 0.01;
};

class MaskedMlp {
 public:
  MaskedMlp() = default;

  MaskedMlp(const MadeShape& shape, std::string prefix) : shape_(shape), prefix_(std::move(prefix)) {
    const std::size_t n = shape.inputs;
    const std::size_t span = n > 1 ? n - 1 : 1;
    std::vector<std::size_t> in_deg(n), out_deg(n * shape.outputs_per_input);
    for (std::size_t i = 0; i < n; ++i) in_deg[i] = i + 1;
    for (std::size_t o = 0; o < out_deg.size(); ++o) out_deg[o] = o / shape.outputs_per_input + 1;
    std::vector<std::size_t> hid_deg(shape.hidden);
    for (std::size_t h = 0; h < shape.hidden; ++h) hid_deg[h] = h % span + 1;

    std::vector<std::size_t> prev = in_deg;
    for (std::size_t l = 0; l < shape.hidden_layers; ++l) {
      ad::Array m(prev.size(), hid_deg.size());
      for (std::size_t a = 0; a < prev.size(); ++a)
        for (std::size_t b = 0; b < hid_deg.size(); ++b) m(a, b) = hid_deg[b] >= prev[a] ? 1.0 : 0.0;
      masks_.push_back(std::move(m));
      prev = hid_deg;
    }
    ad::Array m(prev.size(), out_deg.size());
    for (std::size_t a = 0; a < prev.size(); ++a)
      for (std::size_t b = 0; b < out_deg.size(); ++b) m(a, b) = out_deg[b] > prev[a] ? 1.0 : 0.0;
    masks_.push_back(std::move(m));
  }

  const MadeShape& shape() const { return shape_; }
  std::size_t layer_count() const { return masks_.size(); }
  std::size_t output_width() const { return shape_.inputs * shape_.outputs_per_input; }
  const ad::Array& mask(std::size_t l) const { return masks_.at(l); }

  std::string weight_name(std::size_t l) const { return prefix_ + "w" + std::to_string(l); }
  std::string bias_name(std::size_t l) const { return prefix_ + "b" + std::to_string(l); }

  // Hidden layers get the default uniform init; the output layer gets zero
  // weights and the supplied bias row.
  void initialise(ParamMap& params, Rng& rng, const std::vector<double>& output_bias) const {
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      const auto& m = masks_[l];
      if (l + 1 < masks_.size()) {
        params[weight_name(l)] = uniform_init(m.rows(), m.cols(), m.rows(), rng);
        params[bias_name(l)] = uniform_init(1, m.cols(), m.rows(), rng);
      } else {
        params[weight_name(l)] = ad::Array(m.rows(), m.cols());
        params[bias_name(l)] = ad::Array({1, m.cols()}, output_bias);
      }
    }
  }

  ad::Node graph(ad::Graph& g, ad::Node x) const {
    ad::Node h = x;
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      ad::Node w = g.input(weight_name(l)) * g.constant(masks_[l], prefix_ + "mask" + std::to_string(l));
      h = ad::matmul(h, w) + g.input(bias_name(l));
      if (l + 1 < masks_.size()) h = ad::leaky_relu(h, shape_.leaky_slope);
    }
    return h;
  }

  // Plain evaluation on a row-per-sample batch.
  Matrix evaluate(const ParamMap& params, const Matrix& x) const {
    Matrix h = x;
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      const Matrix w = to_matrix(params.at(weight_name(l))).cwiseProduct(to_matrix(masks_[l]));
      const Matrix b = to_matrix(params.at(bias_name(l)));
      Matrix next = h * w;
      next.rowwise() += b.row(0);
      if (l + 1 < masks_.size()) {
        const double s = shape_.leaky_slope;
        next = next.unaryExpr([s](double v) { return v >= 0.0 ? v : s * v; });
      }
      h = std::move(next);
    }
    return h;
  }

 private:
  MadeShape shape_;
  std::string prefix_;
  std::vector<ad::Array> masks_;
};

}  // namespace iflow
