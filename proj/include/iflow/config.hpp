#pragma once

// Experiment configuration as JSON. Layout:
//
//   { "preset": "paper" | "desk",
//     "seed": 1,
//     "output_dir": "runs",
//     "synth": {...}, "flow": {...}, "prior": {...}, "train": {...}, "eval": {...} }
//
// A preset fills every field first; explicit keys then override it. Unknown
// keys anywhere are an error.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iflow/error.hpp"
#include "iflow/flow.hpp"
#include "iflow/prior.hpp"
#include "iflow/synth.hpp"
#include "iflow/train.hpp"

namespace iflow {

using Json = nlohmann::json;

struct EvalConfig {
  double holdout_fraction = 0.0;  // 0 = score on the training data
};

struct ExperimentConfig {
  std::string preset = "paper";
  std::uint64_t seed = 1;
  std::string output_dir = "runs";
  SynthConfig synth;
  FlowConfig flow;
  PriorConfig prior;
  TrainConfig train;
  EvalConfig eval;
};

// Full scale: M=40, L=1000, n=5, 10 flow layers.
inline ExperimentConfig paper_preset() {
  ExperimentConfig c;
  c.preset = "paper";
  c.synth.segments = 40;
  c.synth.samples_per_segment = 1000;
  c.synth.dim = 5;
  c.flow.layers = 10;
  c.flow.bins = 8;
  c.train.iterations = 20000;
  c.train.eval_every = 1000;
  return c;
}

// Small enough to train in seconds on one core.
inline ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.preset = "desk";
  c.synth.segments = 10;
  c.synth.samples_per_segment = 500;
  c.synth.dim = 2;
  c.flow.layers = 5;
  c.flow.bins = 8;
  c.train.iterations = 3000;
  c.train.eval_every = 500;
  return c;
}

inline ExperimentConfig preset_config(const std::string& name) {
  if (name == "paper") return paper_preset();
  if (name == "desk") return desk_preset();
  throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["synth"] = {{"segments", c.synth.segments},
                {"samples_per_segment", c.synth.samples_per_segment},
                {"dim", c.synth.dim},
                {"mixing_depth", c.synth.mixing_depth},
                {"mixing_slope", c.synth.mixing_slope},
                {"mean_low", c.synth.mean_low},
                {"mean_high", c.synth.mean_high},
                {"var_low", c.synth.var_low},
                {"var_high", c.synth.var_high},
                {"max_condition", c.synth.max_condition}};
  j["flow"] = {{"layers", c.flow.layers},
               {"bins", c.flow.bins},
               {"tail_bound", c.flow.tail_bound},
               {"hidden", c.flow.hidden},
               {"hidden_layers", c.flow.hidden_layers},
               {"leaky_slope", c.flow.leaky_slope},
               {"standardize", c.flow.standardize}};
  j["prior"] = {{"hidden", c.prior.hidden},
                {"hidden_layers", c.prior.hidden_layers},
                {"activation", activation_name(c.prior.activation)},
                {"eta_head", eta_head_name(c.prior.eta_head)},
                {"leaky_slope", c.prior.leaky_slope}};
  j["train"] = {{"batch", c.train.batch},
                {"lr", c.train.lr},
                {"iterations", c.train.iterations},
                {"eval_every", c.train.eval_every}};
  j["eval"] = {{"holdout_fraction", c.eval.holdout_fraction}};
  return j;
}

namespace detail {

template <typename T>
T json_get(const Json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config key '" + path + "' has the wrong type (got " + std::string(j.type_name()) + ")");
  }
}

inline std::size_t json_count(const Json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw ConfigError("config key '" + path + "' must be a non-negative integer");
  }
  return j.get<std::size_t>();
}

inline double json_real(const Json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("config key '" + path + "' must be a number");
  return j.get<double>();
}

inline void check_keys(const Json& j, const std::string& section, const std::vector<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || a == k;
    if (!ok) {
      throw ConfigError("unknown config key '" + (section.empty() ? k : section + "." + k) + "'");
    }
  }
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.synth.segments == 0 || c.synth.samples_per_segment == 0 || c.synth.dim == 0) {
    throw ConfigError("synth.segments, synth.samples_per_segment and synth.dim must be >= 1");
  }
  if (!(c.synth.var_low > 0.0) || c.synth.var_high < c.synth.var_low) {
    throw ConfigError("synth variance range must satisfy 0 < var_low <= var_high");
  }
  if (c.synth.mean_high < c.synth.mean_low) throw ConfigError("synth mean range is empty");
  if (!(c.synth.mixing_slope > 0.0)) throw ConfigError("synth.mixing_slope must be positive");
  if (c.flow.bins < 2) throw ConfigError("flow.bins must be >= 2");
  if (!(c.flow.tail_bound > 0.0)) throw ConfigError("flow.tail_bound must be positive");
  if (c.flow.hidden == 0 || c.prior.hidden == 0) throw ConfigError("hidden widths must be >= 1");
  if (c.train.batch == 0) throw ConfigError("train.batch must be >= 1");
  if (!(c.train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(c.eval.holdout_fraction >= 0.0 && c.eval.holdout_fraction < 1.0)) {
    throw ConfigError("eval.holdout_fraction must be in [0, 1)");
  }
}

// Overlays the keys present in j onto c.
inline void apply_json(ExperimentConfig& c, const Json& j) {
  using namespace detail;
  check_keys(j, "", {"preset", "seed", "output_dir", "synth", "flow", "prior", "train", "eval"});
  if (j.contains("seed")) c.seed = json_count(j["seed"], "seed");
  if (j.contains("output_dir")) c.output_dir = json_get<std::string>(j["output_dir"], "output_dir");
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    check_keys(s, "synth",
               {"segments", "samples_per_segment", "dim", "mixing_depth", "mixing_slope", "mean_low", "mean_high",
                "var_low", "var_high", "max_condition"});
    if (s.contains("segments")) c.synth.segments = json_count(s["segments"], "synth.segments");
    if (s.contains("samples_per_segment")) {
      c.synth.samples_per_segment = json_count(s["samples_per_segment"], "synth.samples_per_segment");
    }
    if (s.contains("dim")) c.synth.dim = json_count(s["dim"], "synth.dim");
    if (s.contains("mixing_depth")) c.synth.mixing_depth = json_count(s["mixing_depth"], "synth.mixing_depth");
    if (s.contains("mixing_slope")) c.synth.mixing_slope = json_real(s["mixing_slope"], "synth.mixing_slope");
    if (s.contains("mean_low")) c.synth.mean_low = json_real(s["mean_low"], "synth.mean_low");
    if (s.contains("mean_high")) c.synth.mean_high = json_real(s["mean_high"], "synth.mean_high");
    if (s.contains("var_low")) c.synth.var_low = json_real(s["var_low"], "synth.var_low");
    if (s.contains("var_high")) c.synth.var_high = json_real(s["var_high"], "synth.var_high");
    if (s.contains("max_condition")) c.synth.max_condition = json_real(s["max_condition"], "synth.max_condition");
  }
  if (j.contains("flow")) {
    const auto& f = j["flow"];
    check_keys(f, "flow", {"layers", "bins", "tail_bound", "hidden", "hidden_layers", "leaky_slope", "standardize"});
    if (f.contains("layers")) c.flow.layers = json_count(f["layers"], "flow.layers");
    if (f.contains("bins")) c.flow.bins = json_count(f["bins"], "flow.bins");
    if (f.contains("tail_bound")) c.flow.tail_bound = json_real(f["tail_bound"], "flow.tail_bound");
    if (f.contains("hidden")) c.flow.hidden = json_count(f["hidden"], "flow.hidden");
    if (f.contains("hidden_layers")) c.flow.hidden_layers = json_count(f["hidden_layers"], "flow.hidden_layers");
    if (f.contains("leaky_slope")) c.flow.leaky_slope = json_real(f["leaky_slope"], "flow.leaky_slope");
    if (f.contains("standardize")) c.flow.standardize = json_get<bool>(f["standardize"], "flow.standardize");
  }
  if (j.contains("prior")) {
    const auto& p = j["prior"];
    check_keys(p, "prior", {"hidden", "hidden_layers", "activation", "eta_head", "leaky_slope"});
    if (p.contains("hidden")) c.prior.hidden = json_count(p["hidden"], "prior.hidden");
    if (p.contains("hidden_layers")) c.prior.hidden_layers = json_count(p["hidden_layers"], "prior.hidden_layers");
    if (p.contains("activation")) {
      c.prior.activation = parse_activation(json_get<std::string>(p["activation"], "prior.activation"));
    }
    if (p.contains("eta_head")) c.prior.eta_head = parse_eta_head(json_get<std::string>(p["eta_head"], "prior.eta_head"));
    if (p.contains("leaky_slope")) c.prior.leaky_slope = json_real(p["leaky_slope"], "prior.leaky_slope");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"batch", "lr", "iterations", "eval_every"});
    if (t.contains("batch")) c.train.batch = json_count(t["batch"], "train.batch");
    if (t.contains("lr")) c.train.lr = json_real(t["lr"], "train.lr");
    if (t.contains("iterations")) c.train.iterations = json_count(t["iterations"], "train.iterations");
    if (t.contains("eval_every")) c.train.eval_every = json_count(t["eval_every"], "train.eval_every");
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, "eval", {"holdout_fraction"});
    if (e.contains("holdout_fraction")) c.eval.holdout_fraction = json_real(e["holdout_fraction"], "eval.holdout_fraction");
  }
  c.train.seed = c.seed;
}

inline ExperimentConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::string preset = "paper";
  if (j.contains("preset")) preset = detail::json_get<std::string>(j["preset"], "preset");
  ExperimentConfig c = preset_config(preset);
  apply_json(c, j);
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

// Applies "section.key=value" overrides. The value is read as JSON when it
// parses, otherwise as a string.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::parse_error&) {
    value = raw;
  }
  Json patch = Json::object();
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    patch[key] = value;
  } else {
    patch[key.substr(0, dot)] = Json::object({{key.substr(dot + 1), value}});
  }
  if (patch.contains("preset")) {
    // Re-expanding a preset keeps the non-preset identity fields.
    const auto seed = c.seed;
    const auto out = c.output_dir;
    c = preset_config(detail::json_get<std::string>(patch["preset"], "preset"));
    c.seed = seed;
    c.output_dir = out;
    c.train.seed = seed;
    return;
  }
  apply_json(c, patch);
  validate(c);
}

// FNV-1a 64 over the canonical serialisation, output_dir excluded.
inline std::string fingerprint(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace iflow
