#pragma once

// Adam over the union of flow and prior parameters, minimising the negative
// log conditional likelihood on shuffled minibatches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iflow/autodiff.hpp"
#include "iflow/common.hpp"
#include "iflow/error.hpp"
#include "iflow/flow.hpp"
#include "iflow/prior.hpp"
#include "iflow/synth.hpp"

namespace iflow {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  ParamMap m;
  ParamMap v;
};

// One bias-corrected Adam update of every entry of params. Gradients for
// names not in params are ignored; a missing gradient counts as zero.
inline void adam_step(ParamMap& params, const std::map<std::string, ad::Array>& grads, AdamState& st) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) continue;
    if (!g.all_finite()) throw NumericalError("adam_step: non-finite gradient for parameter '" + name + "'");
  }
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(st.beta1, t);
  const double c2 = 1.0 - std::pow(st.beta2, t);
  for (auto& [name, p] : params) {
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.size() != p.size()) m = ad::Array(p.rows(), p.cols());
    if (v.size() != p.size()) v = ad::Array(p.rows(), p.cols());
    const auto git = grads.find(name);
    const ad::Array* g = git == grads.end() ? nullptr : &git->second;
    if (g && g->size() != p.size()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

struct TrainConfig {
  std::size_t batch = 64;
  double lr = 1e-3;
  std::size_t iterations = 3000;
  std::size_t eval_every = 500;
  std::uint64_t seed = 1;
};

struct HistoryEntry {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::optional<double> energy;
};

// Everything needed to continue a run bit-identically.
struct TrainState {
  FlowModel flow;
  LambdaNet prior;
  AdamState adam;
  std::size_t iteration = 0;  // updates applied so far
};

struct TrainResult {
  TrainState final_state;
  FlowModel best_flow;
  LambdaNet best_prior;
  double best_energy = -std::numeric_limits<double>::infinity();
  double initial_energy = 0.0;
  double final_energy = 0.0;
  std::vector<HistoryEntry> history;
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::size_t iteration, std::shared_ptr<TrainState> last)
      : NumericalError(what), iteration_(iteration), last_finite_(std::move(last)) {}
  std::size_t iteration() const { return iteration_; }
  const TrainState* last_finite_state() const { return last_finite_.get(); }

 private:
  std::size_t iteration_;
  std::shared_ptr<TrainState> last_finite_;
};

// Identity-initialised flow (with standardisation fitted to the data) and a
// freshly initialised lambda network.
inline TrainState initial_state(const FlowConfig& fcfg, const PriorConfig& pcfg, const TrainConfig& tcfg,
                                const SyntheticDataset& data) {
  TrainState st;
  st.flow = FlowModel(data.meta.dim, fcfg, tcfg.seed);
  st.flow.fit_standardization(data.x);
  st.prior = LambdaNet(static_cast<std::size_t>(data.u.cols()), data.meta.dim, pcfg, tcfg.seed);
  st.adam.lr = tcfg.lr;
  return st;
}

// Minibatch schedule as a pure function of (seed, iteration): sample
// position p = iteration * batch + j is element p mod N of the permutation
// for epoch p / N.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {}

  std::vector<std::size_t> batch(std::size_t iteration) {
    std::vector<std::size_t> out(batch_);
    for (std::size_t j = 0; j < batch_; ++j) {
      const std::size_t pos = iteration * batch_ + j;
      const std::size_t epoch = pos / n_;
      if (epoch != epoch_ || perm_.empty()) load(epoch);
      out[j] = perm_[pos % n_];
    }
    return out;
  }

 private:
  void load(std::size_t epoch) {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng rng(mix_seed(mix_seed(seed_, kTagBatches), epoch));
    std::shuffle(perm_.begin(), perm_.end(), rng);
    epoch_ = epoch;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

namespace detail {

inline ParamMap merged_params(const TrainState& st) {
  ParamMap p = st.flow.params();
  for (const auto& [k, v] : st.prior.params()) p[k] = v;
  return p;
}

inline void split_params(const ParamMap& merged, TrainState& st) {
  for (auto& [k, v] : st.flow.params()) v = merged.at(k);
  for (auto& [k, v] : st.prior.params()) v = merged.at(k);
}

}  // namespace detail

// Mean log conditional likelihood over a dataset.
inline double energy(const FlowModel& flow, const LambdaNet& net, const SyntheticDataset& data) {
  return log_likelihood(flow, net, data.x, data.u).mean();
}

// Runs until state.iteration == cfg.iterations. History holds one entry per
// update with the minibatch loss before that update; entries at the starting
// iteration and at multiples of eval_every also carry the full-data energy.
// A closing entry (loss NaN) carries the final energy.
inline TrainResult train(const TrainConfig& cfg, const SyntheticDataset& data, TrainState state) {
  if (cfg.batch == 0) throw ConfigError("train: batch size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (state.flow.dim() != data.meta.dim || state.prior.aux_dim() != static_cast<std::size_t>(data.u.cols())) {
    throw ConfigError("train: model dimensions do not match the dataset");
  }
  if (!data.x.allFinite() || !data.u.allFinite()) throw NumericalError("train: dataset contains non-finite values");
  state.adam.lr = cfg.lr;

  ad::Graph graph;
  objective_graph(graph, state.flow, state.prior);

  ad::Bindings full = detail::merged_params(state);
  ParamMap params = detail::merged_params(state);
  BatchSchedule schedule(data.size(), cfg.batch, cfg.seed);

  TrainResult res;
  auto eval_energy = [&](const ParamMap& p) {
    full = p;
    full["x"] = to_array(data.x);
    full["u"] = to_array(data.u);
    return -ad::evaluate(graph, full).item();
  };
  auto snapshot = [&](const ParamMap& p) {
    auto s = std::make_shared<TrainState>(state);
    detail::split_params(p, *s);
    return s;
  };

  auto record_best = [&](double e, const ParamMap& p) {
    if (e > res.best_energy) {
      res.best_energy = e;
      TrainState tmp = state;
      detail::split_params(p, tmp);
      res.best_flow = std::move(tmp.flow);
      res.best_prior = std::move(tmp.prior);
    }
  };

  res.initial_energy = eval_energy(params);
  record_best(res.initial_energy, params);
  const std::size_t first = state.iteration;

  ad::Bindings bind = params;
  while (state.iteration < cfg.iterations) {
    HistoryEntry h;
    h.iteration = state.iteration;
    const bool eval_here = cfg.eval_every > 0 ? state.iteration % cfg.eval_every == 0 : state.iteration == 0;
    try {
      if (eval_here) {
        h.energy = state.iteration == first ? res.initial_energy : eval_energy(params);
        record_best(*h.energy, params);
      }
      const auto rows = schedule.batch(state.iteration);
      for (const auto& [k, v] : params) bind[k] = v;
      bind["x"] = to_array(gather_rows(data.x, rows));
      bind["u"] = to_array(gather_rows(data.u, rows));
      auto gr = ad::gradient(graph, bind);
      if (!std::isfinite(gr.value)) throw NumericalError("loss is not finite");
      h.loss = gr.value;
      adam_step(params, gr.grads, state.adam);
    } catch (const NumericalError& e) {
      throw DivergenceError("training diverged at iteration " + std::to_string(state.iteration) + ": " + e.what(),
                            state.iteration, snapshot(params));
    }
    res.history.push_back(h);
    state.iteration += 1;
  }
  detail::split_params(params, state);
  try {
    res.final_energy = eval_energy(params);
  } catch (const NumericalError& e) {
    throw DivergenceError("training diverged at iteration " + std::to_string(state.iteration) + ": " + e.what(),
                          state.iteration, snapshot(params));
  }
  record_best(res.final_energy, params);
  HistoryEntry last;
  last.iteration = state.iteration;
  last.loss = std::numeric_limits<double>::quiet_NaN();
  last.energy = res.final_energy;
  res.history.push_back(last);
  res.final_state = std::move(state);
  return res;
}

}  // namespace iflow
