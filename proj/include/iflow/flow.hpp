#pragma once

// The bijection h: x -> z. A fixed per-dimension standardisation followed by
// a stack of masked-autoregressive rational-quadratic spline layers. Odd
// layers condition in reversed coordinate order, so the order flips between
// consecutive layers; outputs always stay in the original order.
//
// x -> z is the single-pass direction (training only needs h(x) and its
// log-determinant). z -> x inverts one coordinate at a time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "iflow/autodiff.hpp"
#include "iflow/common.hpp"
#include "iflow/made.hpp"
#include "iflow/spline.hpp"

namespace iflow {

struct FlowConfig {
  std::size_t layers = 10;
  std::size_t bins = 8;
  double tail_bound = 5.0;
  std::size_t hidden = 64;
  std::size_t hidden_layers = 2;
  double leaky_slope = 0.01;
  bool standardize = true;
};

struct FlowLayer {
  std::vector<std::size_t> permutation;  // conditioning order: spline input j is x[permutation[j]], undone after the spline
  MaskedMlp conditioner;
};

class FlowModel {
 public:
  FlowModel() = default;

  // Identity-initialised model: every spline starts as y = x.
  FlowModel(std::size_t dim, const FlowConfig& cfg, std::uint64_t seed)
      : dim_(dim), cfg_(cfg), shift_(dim, 0.0), scale_(dim, 1.0) {
    if (dim == 0) throw std::invalid_argument("FlowModel: dimension must be positive");
    if (cfg.bins < 2) throw std::invalid_argument("FlowModel: need at least 2 bins");
    if (!(cfg.tail_bound > 0.0)) throw std::invalid_argument("FlowModel: tail bound must be positive");
    Rng rng(mix_seed(seed, kTagFlowInit));
    const auto identity = spline::SplineParams::identity(dim, cfg.bins, cfg.tail_bound);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      FlowLayer layer;
      layer.permutation.resize(dim);
      std::iota(layer.permutation.begin(), layer.permutation.end(), std::size_t{0});
      if (l % 2 == 1) std::reverse(layer.permutation.begin(), layer.permutation.end());
      MadeShape shape;
      shape.inputs = dim;
      shape.hidden = cfg.hidden;
      shape.hidden_layers = cfg.hidden_layers;
      shape.outputs_per_input = spline::params_per_dim(cfg.bins);
      shape.leaky_slope = cfg.leaky_slope;
      layer.conditioner = MaskedMlp(shape, "flow.l" + std::to_string(l) + ".");
      layer.conditioner.initialise(params_, rng, identity.raw);
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t dim() const { return dim_; }
  const FlowConfig& config() const { return cfg_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  const std::vector<double>& shift() const { return shift_; }
  const std::vector<double>& scale() const { return scale_; }

  void set_standardization(std::vector<double> shift, std::vector<double> scale) {
    if (shift.size() != dim_ || scale.size() != dim_) {
      throw std::invalid_argument("set_standardization: dimension mismatch");
    }
    for (double s : scale) {
      if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("standardization scale must be positive");
    }
    shift_ = std::move(shift);
    scale_ = std::move(scale);
  }

  // Uses per-column mean and standard deviation when standardisation is on.
  void fit_standardization(const Matrix& x) {
    if (!cfg_.standardize) return;
    std::vector<double> mu(dim_), sd(dim_);
    for (std::size_t j = 0; j < dim_; ++j) {
      const auto col = x.col(static_cast<Eigen::Index>(j));
      mu[j] = col.mean();
      const double var = (col.array() - mu[j]).square().mean();
      sd[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    set_standardization(std::move(mu), std::move(sd));
  }

  double standardization_log_det() const {
    double s = 0.0;
    for (double v : scale_) s -= std::log(v);
    return s;
  }

 private:
  std::size_t dim_ = 0;
  FlowConfig cfg_;
  std::vector<FlowLayer> layers_;
  ParamMap params_;
  std::vector<double> shift_;
  std::vector<double> scale_;
};

struct FlowNodes {
  ad::Node z;        // batch x dim
  ad::Node log_det;  // batch x 1
};

// Records h(x) into the graph; conditioner weights are graph inputs bound by
// their parameter names.
inline FlowNodes flow_graph(ad::Graph& g, const FlowModel& model, ad::Node x) {
  using namespace ad;
  const std::size_t n = model.dim();
  const auto& cfg = model.config();
  std::vector<double> inv(n);
  for (std::size_t j = 0; j < n; ++j) inv[j] = 1.0 / model.scale()[j];
  Node h = (x - g.constant(Array::row(model.shift()), "std_shift")) *
           g.constant(Array::row(inv), "std_inv_scale");
  Node log_det = g.scalar(model.standardization_log_det());
  for (const auto& layer : model.layers()) {
    bool identity_perm = true;
    for (std::size_t j = 0; j < n; ++j) identity_perm = identity_perm && layer.permutation[j] == j;
    if (!identity_perm) h = columns(h, layer.permutation);
    Node raw = layer.conditioner.graph(g, h);
    auto sp = spline::rq_spline_graph(g, h, raw, n, cfg.bins, cfg.tail_bound);
    h = sp.y;
    if (!identity_perm) {
      std::vector<std::size_t> back(n);
      for (std::size_t j = 0; j < n; ++j) back[layer.permutation[j]] = j;
      h = columns(h, back);
    }
    log_det = log_det + sp.log_det;
  }
  // A zero-layer model still yields one log-det entry per row.
  if (model.layers().empty()) log_det = log_det + sum_rows(h * 0.0);
  return {h, log_det.named("log_abs_det")};
}

struct FlowOutput {
  Matrix z;
  Vector log_abs_det;
};

inline FlowOutput flow_forward(const FlowModel& model, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != model.dim()) {
    throw std::invalid_argument("flow_forward: expected width " + std::to_string(model.dim()) +
                                ", got " + std::to_string(x.cols()));
  }
  ad::Graph g;
  auto nodes = flow_graph(g, model, g.input("x"));
  ad::Bindings b = model.params();
  b["x"] = to_array(x);
  const auto ev = ad::forward(g, b);
  FlowOutput out;
  out.z = to_matrix(ev.value(nodes.z));
  out.log_abs_det = to_matrix(ev.value(nodes.log_det)).col(0);
  return out;
}

// Inverts one layer. Both y and the result are in original coordinate order;
// the permutation only decides the conditioning order inside the layer.
inline Matrix invert_layer(const FlowModel& model, const FlowLayer& layer, const Matrix& y) {
  const auto n = static_cast<Eigen::Index>(model.dim());
  const auto& cfg = model.config();
  const std::size_t p = spline::params_per_dim(cfg.bins);
  Matrix yp(y.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) yp.col(j) = y.col(static_cast<Eigen::Index>(layer.permutation[j]));
  Matrix xp = Matrix::Zero(y.rows(), n);
  for (Eigen::Index d = 0; d < n; ++d) {
    const Matrix raw = layer.conditioner.evaluate(model.params(), xp);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      std::vector<double> block(p);
      for (std::size_t q = 0; q < p; ++q) block[q] = raw(r, static_cast<Eigen::Index>(d * p + q));
      const auto kn = spline::make_knots(block, cfg.bins, cfg.tail_bound);
      xp(r, d) = spline::inverse_scalar(yp(r, d), kn).first;
    }
  }
  Matrix x(y.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) x.col(static_cast<Eigen::Index>(layer.permutation[j])) = xp.col(j);
  return x;
}

inline Matrix flow_inverse(const FlowModel& model, const Matrix& z) {
  if (static_cast<std::size_t>(z.cols()) != model.dim()) {
    throw std::invalid_argument("flow_inverse: expected width " + std::to_string(model.dim()) +
                                ", got " + std::to_string(z.cols()));
  }
  Matrix h = z;
  for (auto it = model.layers().rbegin(); it != model.layers().rend(); ++it) {
    h = invert_layer(model, *it, h);
  }
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    h.col(j) = h.col(j).array() * model.scale()[j] + model.shift()[j];
  }
  return h;
}

}  // namespace iflow
