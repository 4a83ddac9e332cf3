#pragma once

// On-disk formats.
//
// Dataset (CSV, "%.17g" numbers):
//   # iflow-dataset v1
//   # M=<segments> L=<samples per segment> n=<dim> m=<aux dim> seed=<seed> depth=<mixing depth>
//   # fingerprint=<hex>
//   segment,z1..zn,x1..xn
//   <one row per sample, segment-major order>
// u is the one-hot encoding of the segment column. A sidecar <file>.meta.json
// holds the true per-segment variances and means and the mixing weights.
//
// Checkpoint (JSON, format "iflow-checkpoint", version 1): config, fingerprint,
// iteration, flow {dim, shift, scale, params}, prior {aux_dim, latent_dim,
// params}, adam {lr, beta1, beta2, eps, step, m, v}. Arrays are
// {"shape": [r, c], "data": [...]} in row-major order.
//
// History (CSV): iteration,loss,energy with empty cells for missing values.

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iflow/config.hpp"
#include "iflow/error.hpp"
#include "iflow/synth.hpp"
#include "iflow/train.hpp"

namespace iflow {

inline constexpr int kCheckpointVersion = 1;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json(const std::string& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw IoError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// ---- arrays -----------------------------------------------------------------

inline Json array_to_json(const ad::Array& a) {
  return Json{{"shape", {a.rows(), a.cols()}}, {"data", a.values()}};
}

inline ad::Array array_from_json(const Json& j) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    auto data = j.at("data").get<std::vector<double>>();
    if (shape.size() != 2) throw IoError("array shape must have two entries");
    return ad::Array({shape[0], shape[1]}, std::move(data));
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed array: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("malformed array: ") + e.what());
  }
}

inline Json matrix_to_json(const Matrix& m) { return array_to_json(to_array(m)); }
inline Matrix matrix_from_json(const Json& j) { return to_matrix(array_from_json(j)); }

inline Json params_to_json(const ParamMap& p) {
  Json j = Json::object();
  for (const auto& [k, v] : p) j[k] = array_to_json(v);
  return j;
}

inline ParamMap params_from_json(const Json& j) {
  ParamMap p;
  for (const auto& [k, v] : j.items()) p[k] = array_from_json(v);
  return p;
}

// ---- dataset ----------------------------------------------------------------

inline std::string dataset_meta_path(const std::string& path) { return path + ".meta.json"; }

inline void write_dataset(const std::string& path, const SyntheticDataset& ds) {
  const std::size_t n = ds.meta.dim;
  std::string out;
  out += "# iflow-dataset v1\n";
  out += "# M=" + std::to_string(ds.meta.segments) + " L=" + std::to_string(ds.meta.samples_per_segment) +
         " n=" + std::to_string(n) + " m=" + std::to_string(ds.meta.aux_dim) +
         " seed=" + std::to_string(ds.meta.seed) + " depth=" + std::to_string(ds.meta.mixing_depth) + "\n";
  out += "# fingerprint=" + ds.meta.fingerprint + "\n";
  out += "segment";
  for (std::size_t i = 1; i <= n; ++i) out += ",z" + std::to_string(i);
  for (std::size_t i = 1; i <= n; ++i) out += ",x" + std::to_string(i);
  out += "\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const auto rr = static_cast<Eigen::Index>(r);
    out += std::to_string(ds.segment_index[r]);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) out += "," + format_double(ds.z_true(rr, i));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) out += "," + format_double(ds.x(rr, i));
    out += "\n";
  }
  write_text(path, out);

  Json meta;
  meta["format"] = "iflow-dataset-meta";
  meta["fingerprint"] = ds.meta.fingerprint;
  meta["variance"] = matrix_to_json(ds.truth.variance);
  meta["mean"] = matrix_to_json(ds.truth.mean);
  meta["mixing_slope"] = ds.mixing.slope;
  Json w = Json::array();
  for (const auto& m : ds.mixing.weights) w.push_back(matrix_to_json(m));
  meta["mixing_weights"] = w;
  write_text(dataset_meta_path(path), meta.dump(2) + "\n");
}

inline SyntheticDataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset '" + path + "'");
  SyntheticDataset ds;
  std::string line;
  std::size_t M = 0, L = 0, n = 0, m = 0, depth = 0;
  unsigned long long seed = 0;
  bool have_dims = false;
  while (std::getline(in, line)) {
    if (line.rfind("# M=", 0) == 0) {
      if (std::sscanf(line.c_str(), "# M=%zu L=%zu n=%zu m=%zu seed=%llu depth=%zu", &M, &L, &n, &m, &seed,
                      &depth) != 6) {
        throw IoError("malformed dataset header in '" + path + "'");
      }
      have_dims = true;
    } else if (line.rfind("# fingerprint=", 0) == 0) {
      ds.meta.fingerprint = line.substr(14);
    } else if (line.rfind("#", 0) == 0) {
      continue;
    } else {
      break;  // column header
    }
  }
  if (!have_dims || line.rfind("segment", 0) != 0) throw IoError("'" + path + "' is not an iflow dataset");
  const std::size_t rows = M * L;
  ds.z_true.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  ds.x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  ds.segment_index.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) throw IoError("dataset '" + path + "' is truncated at row " + std::to_string(r));
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col == 0) {
          ds.segment_index[r] = std::stoul(cell);
        } else {
          vals.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw IoError("bad value '" + cell + "' in dataset '" + path + "' row " + std::to_string(r));
      }
      ++col;
    }
    if (vals.size() != 2 * n || ds.segment_index[r] >= M) {
      throw IoError("malformed row " + std::to_string(r) + " in dataset '" + path + "'");
    }
    for (std::size_t i = 0; i < n; ++i) {
      ds.z_true(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = vals[i];
      ds.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = vals[n + i];
    }
  }
  ds.u = one_hot(ds.segment_index, m);
  ds.meta.segments = M;
  ds.meta.samples_per_segment = L;
  ds.meta.dim = n;
  ds.meta.aux_dim = m;
  ds.meta.seed = seed;
  ds.meta.mixing_depth = depth;

  if (std::filesystem::exists(dataset_meta_path(path))) {
    const Json meta = read_json(dataset_meta_path(path));
    try {
      ds.truth.variance = matrix_from_json(meta.at("variance"));
      ds.truth.mean = matrix_from_json(meta.at("mean"));
      ds.mixing.slope = meta.at("mixing_slope").get<double>();
      for (const auto& w : meta.at("mixing_weights")) ds.mixing.weights.push_back(matrix_from_json(w));
    } catch (const Json::exception& e) {
      throw IoError("malformed dataset metadata: " + std::string(e.what()));
    }
  }
  return ds;
}

// ---- checkpoint -------------------------------------------------------------

struct Checkpoint {
  ExperimentConfig config;
  TrainState state;
};

inline Json checkpoint_to_json(const ExperimentConfig& cfg, const TrainState& st) {
  Json j;
  j["format"] = "iflow-checkpoint";
  j["version"] = kCheckpointVersion;
  j["fingerprint"] = fingerprint(cfg);
  j["config"] = to_json(cfg);
  j["iteration"] = st.iteration;
  j["flow"] = {{"dim", st.flow.dim()},
               {"shift", st.flow.shift()},
               {"scale", st.flow.scale()},
               {"params", params_to_json(st.flow.params())}};
  j["prior"] = {{"aux_dim", st.prior.aux_dim()},
                {"latent_dim", st.prior.latent_dim()},
                {"params", params_to_json(st.prior.params())}};
  j["adam"] = {{"lr", st.adam.lr},
               {"beta1", st.adam.beta1},
               {"beta2", st.adam.beta2},
               {"eps", st.adam.eps},
               {"step", st.adam.step},
               {"m", params_to_json(st.adam.m)},
               {"v", params_to_json(st.adam.v)}};
  return j;
}

inline void replace_params(ParamMap& target, const ParamMap& loaded, const std::string& what) {
  for (auto& [k, v] : target) {
    const auto it = loaded.find(k);
    if (it == loaded.end()) throw IoError(what + " parameter '" + k + "' missing from checkpoint");
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
      throw IoError(what + " parameter '" + k + "' has shape " + it->second.shape_string() + ", expected " +
                    v.shape_string());
    }
    v = it->second;
  }
  if (loaded.size() != target.size()) throw IoError(what + " checkpoint has unexpected extra parameters");
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format") != "iflow-checkpoint") throw IoError("not an iflow checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw IoError("unsupported checkpoint version " + j.at("version").dump());
    }
    Checkpoint c;
    c.config = config_from_json(j.at("config"));
    const auto& f = j.at("flow");
    const auto dim = f.at("dim").get<std::size_t>();
    c.state.flow = FlowModel(dim, c.config.flow, c.config.seed);
    c.state.flow.set_standardization(f.at("shift").get<std::vector<double>>(),
                                     f.at("scale").get<std::vector<double>>());
    replace_params(c.state.flow.params(), params_from_json(f.at("params")), "flow");
    const auto& p = j.at("prior");
    c.state.prior = LambdaNet(p.at("aux_dim").get<std::size_t>(), p.at("latent_dim").get<std::size_t>(),
                              c.config.prior, c.config.seed);
    replace_params(c.state.prior.params(), params_from_json(p.at("params")), "prior");
    const auto& a = j.at("adam");
    c.state.adam.lr = a.at("lr").get<double>();
    c.state.adam.beta1 = a.at("beta1").get<double>();
    c.state.adam.beta2 = a.at("beta2").get<double>();
    c.state.adam.eps = a.at("eps").get<double>();
    c.state.adam.step = a.at("step").get<std::uint64_t>();
    c.state.adam.m = params_from_json(a.at("m"));
    c.state.adam.v = params_from_json(a.at("v"));
    c.state.iteration = j.at("iteration").get<std::size_t>();
    return c;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
}

inline void write_checkpoint(const std::string& path, const ExperimentConfig& cfg, const TrainState& st) {
  write_text(path, checkpoint_to_json(cfg, st).dump() + "\n");
}

inline Checkpoint read_checkpoint(const std::string& path) { return checkpoint_from_json(read_json(path)); }

// ---- history ----------------------------------------------------------------

inline std::string history_csv(const std::vector<HistoryEntry>& h, const std::string& fp) {
  std::string out = "# fingerprint=" + fp + "\niteration,loss,energy\n";
  for (const auto& e : h) {
    out += std::to_string(e.iteration) + ",";
    if (std::isfinite(e.loss)) out += format_double(e.loss);
    out += ",";
    if (e.energy) out += format_double(*e.energy);
    out += "\n";
  }
  return out;
}

}  // namespace iflow
