#pragma once

// Conditionally factorised Gaussian-form exponential-family prior with
// sufficient statistics T(z_i) = (z_i^2, z_i) and natural parameters
// lambda(u) = (xi, eta), plus the negative log conditional likelihood that
// training minimises.
//
// The lambda network's last-layer nonlinearity is applied to all 2n outputs
// (the first n are the xi slots and are negated afterwards). With the default
// softplus this makes eta non-negative; EtaHead::Linear leaves the eta slots
// unconstrained instead.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "iflow/autodiff.hpp"
#include "iflow/common.hpp"
#include "iflow/error.hpp"
#include "iflow/flow.hpp"

namespace iflow {

enum class Activation { Softplus, ReluEps, SigmoidX5 };
enum class EtaHead { Activated, Linear };

inline constexpr double kReluEps = 1e-5;
inline constexpr double kXiCeiling = -1e-6;  // xi is clamped to at most this value

inline Activation parse_activation(const std::string& tag) {
  if (tag == "softplus") return Activation::Softplus;
  if (tag == "relu+eps" || tag == "relu_eps") return Activation::ReluEps;
  if (tag == "sigmoid×5" || tag == "sigmoidx5" || tag == "sigmoid*5" || tag == "sigmoid_x5") {
    return Activation::SigmoidX5;
  }
  throw ConfigError("unknown natural-parameter activation '" + tag +
                    "' (expected softplus, relu+eps or sigmoidx5)");
}

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Softplus: return "softplus";
    case Activation::ReluEps: return "relu+eps";
    case Activation::SigmoidX5: return "sigmoidx5";
  }
  return "?";
}

inline EtaHead parse_eta_head(const std::string& tag) {
  if (tag == "activated") return EtaHead::Activated;
  if (tag == "linear") return EtaHead::Linear;
  throw ConfigError("unknown eta head '" + tag + "' (expected activated or linear)");
}

inline std::string eta_head_name(EtaHead h) { return h == EtaHead::Linear ? "linear" : "activated"; }

struct PriorConfig {
  std::size_t hidden = 64;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::Softplus;
  EtaHead eta_head = EtaHead::Activated;
  double leaky_slope = 0.01;
};

// MLP lambda_theta: R^m -> R^{2n}. Raw output columns [0, n) feed xi,
// [n, 2n) feed eta.
class LambdaNet {
 public:
  LambdaNet() = default;

  LambdaNet(std::size_t aux_dim, std::size_t latent_dim, const PriorConfig& cfg, std::uint64_t seed)
      : m_(aux_dim), n_(latent_dim), cfg_(cfg) {
    if (aux_dim == 0 || latent_dim == 0) throw std::invalid_argument("LambdaNet: dimensions must be positive");
    Rng rng(mix_seed(seed, kTagPriorInit));
    std::size_t fan_in = m_;
    for (std::size_t l = 0; l <= cfg.hidden_layers; ++l) {
      const std::size_t out = l == cfg.hidden_layers ? 2 * n_ : cfg.hidden;
      params_[weight_name(l)] = uniform_init(fan_in, out, fan_in, rng);
      params_[bias_name(l)] = uniform_init(1, out, fan_in, rng);
      fan_in = out;
    }
  }

  std::size_t aux_dim() const { return m_; }
  std::size_t latent_dim() const { return n_; }
  const PriorConfig& config() const { return cfg_; }
  PriorConfig& config() { return cfg_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  static std::string weight_name(std::size_t l) { return "prior.w" + std::to_string(l); }
  static std::string bias_name(std::size_t l) { return "prior.b" + std::to_string(l); }

  ad::Node raw_graph(ad::Graph& g, ad::Node u) const {
    ad::Node h = u;
    for (std::size_t l = 0; l <= cfg_.hidden_layers; ++l) {
      h = ad::matmul(h, g.input(weight_name(l))) + g.input(bias_name(l));
      if (l < cfg_.hidden_layers) h = ad::leaky_relu(h, cfg_.leaky_slope);
    }
    return h.named("lambda_raw");
  }

 private:
  std::size_t m_ = 0;
  std::size_t n_ = 0;
  PriorConfig cfg_;
  ParamMap params_;
};

struct NaturalParamNodes {
  ad::Node xi;   // batch x n, strictly negative
  ad::Node eta;  // batch x n
};

inline ad::Node apply_activation(ad::Node raw, Activation a) {
  switch (a) {
    case Activation::Softplus: return ad::softplus(raw);
    case Activation::ReluEps: return ad::relu(raw) + kReluEps;
    case Activation::SigmoidX5: return ad::sigmoid(raw) * 5.0;
  }
  throw ConfigError("unknown activation");
}

inline NaturalParamNodes natural_param_graph(ad::Graph& g, const LambdaNet& net, ad::Node u) {
  const std::size_t n = net.latent_dim();
  ad::Node raw = net.raw_graph(g, u);
  ad::Node xi_raw = g.column_range(raw, 0, n);
  ad::Node eta_raw = g.column_range(raw, n, n);
  ad::Node xi = -ad::max_const(apply_activation(xi_raw, net.config().activation), -kXiCeiling);
  ad::Node eta = net.config().eta_head == EtaHead::Linear
                     ? eta_raw
                     : apply_activation(eta_raw, net.config().activation);
  return {xi.named("xi"), eta.named("eta")};
}

struct NaturalParams {
  Matrix xi;   // batch x n
  Matrix eta;  // batch x n
};

inline NaturalParams natural_params(const LambdaNet& net, const Matrix& u) {
  if (static_cast<std::size_t>(u.cols()) != net.aux_dim()) {
    throw std::invalid_argument("natural_params: expected u width " + std::to_string(net.aux_dim()));
  }
  ad::Graph g;
  auto nodes = natural_param_graph(g, net, g.input("u"));
  ad::Bindings b = net.params();
  b["u"] = to_array(u);
  const auto ev = ad::forward(g, b);
  return {to_matrix(ev.value(nodes.xi)), to_matrix(ev.value(nodes.eta))};
}

// log Z(u) = sum_i [ log sqrt(-pi / xi_i) - eta_i^2 / (4 xi_i) ], per row.
inline ad::Node log_normalizer_graph(ad::Node xi, ad::Node eta) {
  ad::Node neg_xi = -xi;
  ad::Node terms = ad::log(neg_xi) * -0.5 + ad::square(eta) / (neg_xi * 4.0) +
                   0.5 * std::log(std::numbers::pi);
  return ad::sum_rows(terms).named("log_normalizer");
}

inline Vector log_normalizer(const NaturalParams& p) {
  if (p.xi.rows() != p.eta.rows() || p.xi.cols() != p.eta.cols()) {
    throw std::invalid_argument("log_normalizer: xi and eta shapes differ");
  }
  Vector out(p.xi.rows());
  for (Eigen::Index r = 0; r < p.xi.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.xi.cols(); ++i) {
      const double xi = p.xi(r, i);
      const double eta = p.eta(r, i);
      if (!(xi < 0.0)) {
        throw NumericalError("log_normalizer: xi must be strictly negative (row " + std::to_string(r) +
                             ", dim " + std::to_string(i) + ")");
      }
      s += std::log(std::sqrt(-std::numbers::pi / xi)) - eta * eta / (4.0 * xi);
    }
    out(r) = s;
  }
  return out;
}

// Per-sample n x 2 matrix with rows (z_i^2, z_i).
inline Matrix sufficient_stats(const Vector& z) {
  Matrix t(z.size(), 2);
  t.col(0) = z.array().square();
  t.col(1) = z;
  return t;
}

// Batch form: row r holds (z_1^2, z_1, z_2^2, z_2, ...).
inline Matrix sufficient_stats_batch(const Matrix& z) {
  Matrix t(z.rows(), 2 * z.cols());
  for (Eigen::Index i = 0; i < z.cols(); ++i) {
    t.col(2 * i) = z.col(i).array().square();
    t.col(2 * i + 1) = z.col(i);
  }
  return t;
}

struct ObjectiveNodes {
  ad::Node z;               // batch x n
  ad::Node log_det;         // batch x 1
  ad::Node log_normalizer;  // batch x 1
  ad::Node trace;           // batch x 1, trace(T(z) lambda(u)^T)
  ad::Node log_likelihood;  // batch x 1
  ad::Node loss;            // 1 x 1, -mean log-likelihood
};

// Builds the objective over graph inputs "x" and "u"; output is the loss.
inline ObjectiveNodes objective_graph(ad::Graph& g, const FlowModel& flow, const LambdaNet& net) {
  if (flow.dim() != net.latent_dim()) {
    throw std::invalid_argument("objective: flow dim " + std::to_string(flow.dim()) +
                                " does not match prior latent dim " + std::to_string(net.latent_dim()));
  }
  ObjectiveNodes o;
  auto fl = flow_graph(g, flow, g.input("x"));
  auto lam = natural_param_graph(g, net, g.input("u"));
  o.z = fl.z;
  o.log_det = fl.log_det;
  o.log_normalizer = log_normalizer_graph(lam.xi, lam.eta);
  o.trace = ad::sum_rows(lam.xi * ad::square(fl.z) + lam.eta * fl.z).named("trace");
  o.log_likelihood = (o.trace - o.log_normalizer + o.log_det).named("log_likelihood");
  o.loss = (-ad::mean(o.log_likelihood)).named("loss");
  g.set_output(o.loss);
  return o;
}

inline ad::Bindings objective_bindings(const FlowModel& flow, const LambdaNet& net, const Matrix& x,
                                       const Matrix& u) {
  ad::Bindings b = flow.params();
  for (const auto& [k, v] : net.params()) b[k] = v;
  b["x"] = to_array(x);
  b["u"] = to_array(u);
  return b;
}

inline Vector log_likelihood(const FlowModel& flow, const LambdaNet& net, const Matrix& x,
                             const Matrix& u) {
  if (x.rows() != u.rows()) throw std::invalid_argument("log_likelihood: x and u row counts differ");
  ad::Graph g;
  auto o = objective_graph(g, flow, net);
  const auto b = objective_bindings(flow, net, x, u);
  const auto ev = ad::forward(g, b);
  return to_matrix(ev.value(o.log_likelihood)).col(0);
}

inline double loss(const FlowModel& flow, const LambdaNet& net, const Matrix& x, const Matrix& u) {
  if (x.rows() != u.rows()) throw std::invalid_argument("loss: x and u row counts differ");
  ad::Graph g;
  objective_graph(g, flow, net);
  return ad::evaluate(g, objective_bindings(flow, net, x, u)).item();
}

}  // namespace iflow
