#pragma once

// Evaluation reports, the single-seed experiment pipeline and multi-seed sweeps.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "iflow/config.hpp"
#include "iflow/eval.hpp"
#include "iflow/flow.hpp"
#include "iflow/io.hpp"
#include "iflow/prior.hpp"
#include "iflow/synth.hpp"
#include "iflow/train.hpp"

namespace iflow {

struct EvalReport {
  MccReport mcc;
  double energy = 0.0;
  AffineFit affine;
  std::optional<AssumptionReport> assumption;  // needs the true parameters
  std::vector<std::string> warnings;
  std::string fingerprint;
};

inline EvalReport evaluate_model(const FlowModel& flow, const LambdaNet& net, const SyntheticDataset& data) {
  EvalReport r;
  const Matrix z_hat = flow_forward(flow, data.x).z;
  r.mcc = mcc(data.z_true, z_hat);
  r.energy = energy(flow, net, data);
  r.affine = affine_equivalence_residual(data.z_true, z_hat);
  r.warnings = r.mcc.warnings;
  r.warnings.insert(r.warnings.end(), r.affine.warnings.begin(), r.affine.warnings.end());
  if (data.truth.segments() > 0) {
    try {
      r.assumption = check_assumption_L(data.truth);
    } catch (const ConfigError& e) {
      r.warnings.push_back(e.what());
    }
  }
  return r;
}

inline Json to_json(const EvalReport& r) {
  Json j;
  j["fingerprint"] = r.fingerprint;
  j["mcc"] = r.mcc.mcc;
  j["assignment"] = r.mcc.assignment;
  j["signs"] = r.mcc.signs;
  j["per_pair_corr"] = r.mcc.per_pair_corr;
  Json cm = Json::array();
  for (Eigen::Index i = 0; i < r.mcc.corr_matrix.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(r.mcc.corr_matrix.cols()));
    for (Eigen::Index k = 0; k < r.mcc.corr_matrix.cols(); ++k) row[static_cast<std::size_t>(k)] = r.mcc.corr_matrix(i, k);
    cm.push_back(row);
  }
  j["corr_matrix"] = cm;
  j["energy"] = r.energy;
  j["affine_r_squared"] = r.affine.r_squared;
  j["affine_per_target_r_squared"] = r.affine.per_target;
  j["affine_rank"] = r.affine.rank;
  if (r.assumption) {
    j["assumption_L"] = {{"rank_ok", r.assumption->rank_ok},
                         {"condition_number", r.assumption->condition_number},
                         {"segments", r.assumption->segments}};
  } else {
    j["assumption_L"] = nullptr;
  }
  j["warnings"] = r.warnings;
  return j;
}

// Splits each segment into its leading (1 - fraction) share for training and
// the remainder for scoring.
inline std::pair<SyntheticDataset, SyntheticDataset> split_holdout(const SyntheticDataset& ds, double fraction) {
  const std::size_t L = ds.meta.samples_per_segment;
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(L)));
  if (held == 0 || held >= L) throw ConfigError("holdout fraction leaves an empty split");
  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    (r % L < L - held ? train_rows : test_rows).push_back(r);
  }
  auto take = [&](const std::vector<std::size_t>& rows, std::size_t per_segment) {
    SyntheticDataset out;
    out.x = gather_rows(ds.x, rows);
    out.u = gather_rows(ds.u, rows);
    out.z_true = gather_rows(ds.z_true, rows);
    for (auto r : rows) out.segment_index.push_back(ds.segment_index[r]);
    out.truth = ds.truth;
    out.mixing = ds.mixing;
    out.meta = ds.meta;
    out.meta.samples_per_segment = per_segment;
    return out;
  };
  return {take(train_rows, L - held), take(test_rows, held)};
}

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double mcc = std::numeric_limits<double>::quiet_NaN();
  double mcc_initial = std::numeric_limits<double>::quiet_NaN();
  double energy = std::numeric_limits<double>::quiet_NaN();
  double energy_initial = std::numeric_limits<double>::quiet_NaN();
  double r_squared = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
};

struct RunArtifacts {
  SyntheticDataset data;
  TrainResult result;
  SeedResult summary;
};

// Generate, train and score one seed. The config seed is replaced by `seed`.
inline RunArtifacts run_seed(ExperimentConfig cfg, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.seed = seed;
  cfg.train.seed = seed;
  RunArtifacts a;
  a.data = generate_dataset(cfg.synth, seed);
  a.data.meta.fingerprint = fingerprint(cfg);
  SyntheticDataset train_set = a.data, score_set;
  const bool holdout = cfg.eval.holdout_fraction > 0.0;
  if (holdout) std::tie(train_set, score_set) = split_holdout(a.data, cfg.eval.holdout_fraction);
  const SyntheticDataset& scored = holdout ? score_set : train_set;

  TrainState st = initial_state(cfg.flow, cfg.prior, cfg.train, train_set);
  a.summary.seed = seed;
  a.summary.mcc_initial = mcc(scored.z_true, flow_forward(st.flow, scored.x).z).mcc;
  a.result = train(cfg.train, train_set, std::move(st));
  const auto& fin = a.result.final_state;
  const Matrix z_hat = flow_forward(fin.flow, scored.x).z;
  a.summary.mcc = mcc(scored.z_true, z_hat).mcc;
  a.summary.r_squared = affine_equivalence_residual(scored.z_true, z_hat).r_squared;
  a.summary.energy_initial = a.result.initial_energy;
  a.summary.energy = a.result.final_energy;
  a.summary.ok = true;
  a.summary.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return a;
}

struct SweepSummary {
  std::string fingerprint;
  std::string activation;
  std::vector<std::uint64_t> seeds;
  std::vector<SeedResult> runs;  // in seed order
  std::size_t failures = 0;
  double mcc_mean = std::numeric_limits<double>::quiet_NaN();
  double mcc_std = std::numeric_limits<double>::quiet_NaN();
  double energy_mean = std::numeric_limits<double>::quiet_NaN();
  double energy_std = std::numeric_limits<double>::quiet_NaN();
};

// Mean and sample standard deviation (N-1 divisor; 0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() == 1) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

inline std::size_t default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs every seed (in parallel when workers > 1). Results are stored by seed
// position, so the summary does not depend on scheduling.
inline SweepSummary sweep(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                          std::size_t workers = default_workers()) {
  if (seeds.empty()) throw ConfigError("sweep: empty seed range");
  SweepSummary s;
  s.fingerprint = fingerprint(cfg);
  s.activation = activation_name(cfg.prior.activation);
  s.seeds = seeds;
  s.runs.resize(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        s.runs[i] = run_seed(cfg, seeds[i]).summary;
      } catch (const std::exception& e) {
        s.runs[i] = SeedResult{};
        s.runs[i].seed = seeds[i];
        s.runs[i].error = e.what();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, seeds.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<double> m, e;
  for (const auto& r : s.runs) {
    if (!r.ok) {
      ++s.failures;
      continue;
    }
    m.push_back(r.mcc);
    e.push_back(r.energy);
  }
  std::tie(s.mcc_mean, s.mcc_std) = mean_std(m);
  std::tie(s.energy_mean, s.energy_std) = mean_std(e);
  return s;
}

inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const SweepSummary& s) {
  Json j;
  j["fingerprint"] = s.fingerprint;
  j["activation"] = s.activation;
  j["seeds"] = s.seeds;
  j["failures"] = s.failures;
  j["mcc_mean"] = json_number(s.mcc_mean);
  j["mcc_std"] = json_number(s.mcc_std);
  j["energy_mean"] = json_number(s.energy_mean);
  j["energy_std"] = json_number(s.energy_std);
  Json runs = Json::array();
  for (const auto& r : s.runs) {
    Json x{{"seed", r.seed},
           {"ok", r.ok},
           {"mcc", json_number(r.mcc)},
           {"mcc_initial", json_number(r.mcc_initial)},
           {"energy", json_number(r.energy)},
           {"energy_initial", json_number(r.energy_initial)},
           {"r_squared", json_number(r.r_squared)},
           {"wall_time", r.wall_time}};
    if (!r.ok) x["error"] = r.error;
    runs.push_back(x);
  }
  j["runs"] = runs;
  return j;
}

inline SweepSummary sweep_from_json(const Json& j) {
  SweepSummary s;
  auto num = [](const Json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  try {
    s.fingerprint = j.at("fingerprint").get<std::string>();
    s.activation = j.at("activation").get<std::string>();
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.failures = j.at("failures").get<std::size_t>();
    s.mcc_mean = num(j.at("mcc_mean"));
    s.mcc_std = num(j.at("mcc_std"));
    s.energy_mean = num(j.at("energy_mean"));
    s.energy_std = num(j.at("energy_std"));
    for (const auto& x : j.at("runs")) {
      SeedResult r;
      r.seed = x.at("seed").get<std::uint64_t>();
      r.ok = x.at("ok").get<bool>();
      r.mcc = num(x.at("mcc"));
      r.mcc_initial = num(x.at("mcc_initial"));
      r.energy = num(x.at("energy"));
      r.energy_initial = num(x.at("energy_initial"));
      r.r_squared = num(x.at("r_squared"));
      r.wall_time = x.at("wall_time").get<double>();
      if (x.contains("error")) r.error = x.at("error").get<std::string>();
      s.runs.push_back(r);
    }
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed sweep summary: ") + e.what());
  }
  return s;
}

inline std::string sweep_csv(const SweepSummary& s) {
  std::string out = "# fingerprint=" + s.fingerprint + " activation=" + s.activation + "\nseed,mcc,energy,wall_time\n";
  auto cell = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
  for (const auto& r : s.runs) {
    out += std::to_string(r.seed) + "," + cell(r.mcc) + "," + cell(r.energy) + "," + cell(r.wall_time) + "\n";
  }
  return out;
}

}  // namespace iflow
