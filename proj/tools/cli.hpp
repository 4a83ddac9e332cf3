#pragma once

// iflow command line: generate, train, eval, sweep, plot.
//
// Exit codes: 0 ok, 1 usage or config error, 2 numerical failure, 3 I/O error.
// Relative output directories resolve against $IFLOW_OUTPUT_ROOT when set.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iflow/iflow.hpp"

namespace iflow::cli {

enum ExitCode { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

struct ConfigFlags {
  std::string config_path;
  std::string preset;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::optional<double> lr;
  std::optional<std::string> activation;
  std::optional<std::string> output_dir;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON config file");
    app->add_option("--preset", preset, "paper or desk (applied before the config file)");
    app->add_option("--set", sets, "override a config field, e.g. --set flow.bins=4")->take_all();
    app->add_option("--seed", seed, "random seed");
    app->add_option("--iterations", iterations, "training iterations");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--activation", activation, "softplus, relu+eps or sigmoidx5");
    app->add_option("--output-dir", output_dir, "output directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = preset.empty() ? paper_preset() : preset_config(preset);
    if (!config_path.empty()) {
      const std::string text = read_text(config_path);
      Json j;
      try {
        j = Json::parse(text);
      } catch (const Json::parse_error& e) {
        throw ConfigError("config '" + config_path + "' is not valid JSON: " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config must be a JSON object");
      if (j.contains("preset")) c = preset_config(j["preset"].get<std::string>());
      apply_json(c, j);
    }
    for (const auto& s : sets) apply_override(c, s);
    if (seed) apply_override(c, "seed=" + std::to_string(*seed));
    if (iterations) apply_override(c, "train.iterations=" + std::to_string(*iterations));
    if (lr) apply_override(c, "train.lr=" + format_double(*lr));
    if (activation) {
      c.prior.activation = parse_activation(*activation);
    }
    if (output_dir) c.output_dir = *output_dir;
    validate(c);
    return c;
  }
};

inline std::filesystem::path output_root(const ExperimentConfig& c) {
  std::filesystem::path p(c.output_dir);
  if (p.is_absolute()) return p;
  if (const char* env = std::getenv("IFLOW_OUTPUT_ROOT"); env && *env) return std::filesystem::path(env) / p;
  return p;
}

inline std::vector<std::uint64_t> parse_seed_range(const std::string& spec) {
  std::vector<std::uint64_t> out;
  auto parse_u = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad seed '" + s + "' in seed range '" + spec + "'");
    }
    return std::stoull(s);
  };
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) {
      out.push_back(parse_u(part));
      continue;
    }
    const auto a = parse_u(part.substr(0, colon));
    const auto b = parse_u(part.substr(colon + 1));
    for (auto s = a; s <= b; ++s) out.push_back(s);
  }
  if (out.empty()) throw ConfigError("seed range '" + spec + "' is empty");
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

inline std::string file_tag(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return s;
}

// Adopts the dataset's structural fields so the fingerprint describes what
// was actually trained on.
inline void adopt_dataset_shape(ExperimentConfig& c, const SyntheticDataset& ds, std::ostream& err) {
  if (c.synth.dim != ds.meta.dim || c.synth.segments != ds.meta.segments ||
      c.synth.samples_per_segment != ds.meta.samples_per_segment) {
    err << "note: using dataset shape M=" << ds.meta.segments << " L=" << ds.meta.samples_per_segment
        << " n=" << ds.meta.dim << " instead of the configured one\n";
  }
  c.synth.dim = ds.meta.dim;
  c.synth.segments = ds.meta.segments;
  c.synth.samples_per_segment = ds.meta.samples_per_segment;
  c.synth.mixing_depth = ds.meta.mixing_depth;
}

inline int cmd_generate(const ConfigFlags& flags, const std::string& out_flag, std::ostream& out) {
  const ExperimentConfig c = flags.resolve();
  SyntheticDataset ds = generate_dataset(c.synth, c.seed);
  ds.meta.fingerprint = fingerprint(c);
  const std::string path = out_flag.empty()
                               ? (output_root(c) / ("dataset_seed" + std::to_string(c.seed) + ".csv")).string()
                               : out_flag;
  write_dataset(path, ds);
  out << "wrote " << ds.size() << " rows to " << path << "\n";
  return kOk;
}

inline int cmd_train(const ConfigFlags& flags, const std::string& data_path, const std::string& resume,
                     std::ostream& out, std::ostream& err) {
  const SyntheticDataset ds = read_dataset(data_path);
  ExperimentConfig c;
  TrainState st;
  if (!resume.empty()) {
    Checkpoint ck = read_checkpoint(resume);
    c = ck.config;
    // Only the run length and destination may change on resume.
    if (flags.iterations) c.train.iterations = *flags.iterations;
    for (const auto& s : flags.sets) {
      if (s.rfind("train.iterations=", 0) != 0 && s.rfind("output_dir=", 0) != 0) {
        throw ConfigError("only train.iterations and output_dir can be changed when resuming");
      }
      apply_override(c, s);
    }
    if (flags.output_dir) c.output_dir = *flags.output_dir;
    if (ck.state.flow.dim() != ds.meta.dim || ck.state.prior.aux_dim() != ds.meta.aux_dim) {
      throw ConfigError("checkpoint does not match the dataset shape");
    }
    st = std::move(ck.state);
  } else {
    c = flags.resolve();
    adopt_dataset_shape(c, ds, err);
    st = initial_state(c.flow, c.prior, c.train, ds);
  }
  const std::string fp = fingerprint(c);
  const auto dir = output_root(c);
  try {
    TrainResult r = train(c.train, ds, std::move(st));
    write_checkpoint((dir / "checkpoint.json").string(), c, r.final_state);
    TrainState best = r.final_state;
    best.flow = r.best_flow;
    best.prior = r.best_prior;
    write_checkpoint((dir / "best.json").string(), c, best);
    write_text((dir / "history.csv").string(), history_csv(r.history, fp));
    out << "iterations " << r.final_state.iteration << "  energy " << format_double(r.initial_energy) << " -> "
        << format_double(r.final_energy) << "  best " << format_double(r.best_energy) << "\n";
    out << "wrote " << (dir / "checkpoint.json").string() << "\n";
  } catch (const DivergenceError& e) {
    if (const auto* last = e.last_finite_state()) {
      write_checkpoint((dir / "last_finite.json").string(), c, *last);
      err << "last finite state saved to " << (dir / "last_finite.json").string() << "\n";
    }
    throw;
  }
  return kOk;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& data_path, bool force,
                    const std::string& out_flag, std::ostream& out, std::ostream& err) {
  const Checkpoint ck = read_checkpoint(ckpt_path);
  const SyntheticDataset ds = read_dataset(data_path);
  const auto& s = ck.config.synth;
  if (s.dim != ds.meta.dim || s.segments != ds.meta.segments) {
    const std::string msg = "checkpoint was trained with n=" + std::to_string(s.dim) + ", M=" +
                            std::to_string(s.segments) + " but the dataset has n=" + std::to_string(ds.meta.dim) +
                            ", M=" + std::to_string(ds.meta.segments);
    if (!force) throw ConfigError(msg + " (use --force to evaluate anyway)");
    err << "warning: " << msg << "\n";
  }
  if (ck.state.flow.dim() != ds.meta.dim || ck.state.prior.aux_dim() != ds.meta.aux_dim) {
    throw ConfigError("model and dataset dimensions are incompatible; cannot evaluate");
  }
  EvalReport rep = evaluate_model(ck.state.flow, ck.state.prior, ds);
  rep.fingerprint = fingerprint(ck.config);
  Json j = to_json(rep);
  j["dataset_fingerprint"] = ds.meta.fingerprint;
  const std::string path =
      out_flag.empty() ? (std::filesystem::path(ckpt_path).parent_path() / "report.json").string() : out_flag;
  write_text(path, j.dump(2) + "\n");
  out << "mcc " << format_double(rep.mcc.mcc) << "  energy " << format_double(rep.energy) << "  r2 "
      << format_double(rep.affine.r_squared) << "\n";
  for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
  out << "wrote " << path << "\n";
  return kOk;
}

inline int cmd_sweep(const ConfigFlags& flags, const std::string& seeds_spec, const std::string& activations,
                     std::size_t workers, std::ostream& out) {
  const ExperimentConfig base = flags.resolve();
  const auto seeds = parse_seed_range(seeds_spec);
  std::vector<std::string> acts = split_list(activations);
  if (acts.empty()) acts.push_back(activation_name(base.prior.activation));
  for (const auto& a : acts) parse_activation(a);  // fail before any training
  const auto dir = output_root(base);
  std::string table = "activation,seeds,failures,mcc_mean,mcc_std,energy_mean,energy_std\n";
  out << "activation  mcc (mean +- std)  energy (mean +- std)  failures\n";
  for (const auto& a : acts) {
    ExperimentConfig c = base;
    c.prior.activation = parse_activation(a);
    const SweepSummary s = sweep(c, seeds, workers == 0 ? default_workers() : workers);
    const std::string tag = file_tag(s.activation);
    write_text((dir / ("sweep_" + tag + ".json")).string(), to_json(s).dump(2) + "\n");
    write_text((dir / ("sweep_" + tag + ".csv")).string(), sweep_csv(s));
    char line[256];
    std::snprintf(line, sizeof line, "%-10s  %.4f +- %.4f  %.4f +- %.4f  %zu\n", s.activation.c_str(), s.mcc_mean,
                  s.mcc_std, s.energy_mean, s.energy_std, s.failures);
    out << line;
    table += s.activation + "," + std::to_string(seeds.size()) + "," + std::to_string(s.failures) + "," +
             format_double(s.mcc_mean) + "," + format_double(s.mcc_std) + "," + format_double(s.energy_mean) +
             "," + format_double(s.energy_std) + "\n";
  }
  write_text((dir / "sweep_summary.csv").string(), "# fingerprint=" + fingerprint(base) + "\n" + table);
  out << "wrote sweep results to " << dir.string() << "\n";
  return kOk;
}

inline int cmd_plot(const std::string& data_path, const std::string& ckpt_path,
                    const std::vector<std::string>& sweep_paths, const std::string& kind, const std::string& out_dir,
                    std::ostream& out) {
  const bool want_scatter = kind == "all" || kind == "scatter";
  const bool want_sweep = kind == "all" || kind == "sweep";
  const bool want_dims = kind == "all" || kind == "dims";
  if (!want_scatter && !want_sweep && !want_dims) {
    throw ConfigError("unknown plot kind '" + kind + "' (expected scatter, sweep, dims or all)");
  }
  std::filesystem::path dir(out_dir);
  if (out_dir.empty()) {
    const char* env = std::getenv("IFLOW_OUTPUT_ROOT");
    dir = env && *env ? std::filesystem::path(env) : std::filesystem::path(".");
  }
  std::size_t written = 0;
  std::optional<SyntheticDataset> ds;
  std::optional<Checkpoint> ck;
  if (!data_path.empty()) ds = read_dataset(data_path);
  if (!ckpt_path.empty()) ck = read_checkpoint(ckpt_path);

  if ((want_scatter || want_dims) && ds) {
    // Without a checkpoint the recovered latents are the observations.
    const Matrix z_hat = ck ? flow_forward(ck->state.flow, ds->x).z : ds->x;
    const std::string fp = ck ? fingerprint(ck->config) : ds->meta.fingerprint;
    if (want_scatter) {
      if (ds->meta.dim != 2) {
        if (kind == "scatter") throw ConfigError("scatter plots need n = 2, dataset has n = " + std::to_string(ds->meta.dim));
        out << "skipping scatter plot: n = " << ds->meta.dim << "\n";
      } else {
        write_text((dir / "scatter.svg").string(),
                   plot::scatter_triple(ds->z_true, ds->x, z_hat, ds->segment_index, ds->meta.segments, fp));
        ++written;
      }
    }
    if (want_dims) {
      const auto m = mcc(ds->z_true, z_hat);
      write_text((dir / "dimensions.svg").string(),
                 plot::dimension_panels(per_dimension_report(ds->z_true, z_hat, m), fp));
      ++written;
    }
  } else if (kind == "scatter" || kind == "dims") {
    throw ConfigError("--data is required for " + kind + " plots");
  }
  if (want_sweep && !sweep_paths.empty()) {
    std::vector<SweepSummary> sweeps;
    for (const auto& p : sweep_paths) sweeps.push_back(sweep_from_json(read_json(p)));
    write_text((dir / "sweep.svg").string(), plot::sweep_charts(sweeps, sweeps.front().fingerprint));
    ++written;
  } else if (kind == "sweep") {
    throw ConfigError("--sweep is required for sweep plots");
  }
  if (written == 0) throw ConfigError("nothing to plot; pass --data and/or --sweep");
  out << "wrote " << written << " figure(s) to " << dir.string() << "\n";
  return kOk;
}

// Parses and dispatches; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"iflow: identifiable flows on synthetic nonstationary sources"};
  app.require_subcommand(1);
  ConfigFlags gen_flags, train_flags, sweep_flags;
  std::string gen_out, data, resume, ckpt, eval_out, seeds = "1:10", activations, plot_kind = "all", plot_out;
  std::vector<std::string> sweep_files;
  bool force = false;
  std::size_t workers = 0;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen_flags.attach(gen);
  gen->add_option("-o,--out", gen_out, "dataset path (default <output-dir>/dataset_seed<seed>.csv)");

  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  train_flags.attach(tr);
  tr->add_option("-d,--data", data, "dataset file")->required();
  tr->add_option("--resume", resume, "continue from a checkpoint");

  auto* ev = app.add_subcommand("eval", "score a checkpoint against a dataset");
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("-d,--data", data, "dataset file")->required();
  ev->add_flag("--force", force, "evaluate even if n or M differ from the training config");
  ev->add_option("-o,--out", eval_out, "report path (default: report.json next to the checkpoint)");

  auto* sw = app.add_subcommand("sweep", "train over a seed range for each activation");
  sweep_flags.attach(sw);
  sw->add_option("--seeds", seeds, "seed range a:b (inclusive) or a comma list");
  sw->add_option("--activations", activations, "comma list, e.g. softplus,relu+eps,sigmoidx5");
  sw->add_option("--workers", workers, "parallel runs (default: number of processors)");

  auto* pl = app.add_subcommand("plot", "write SVG figures");
  pl->add_option("-d,--data", data, "dataset file");
  pl->add_option("--checkpoint", ckpt, "checkpoint used to recover latents");
  pl->add_option("--sweep", sweep_files, "sweep summary JSON files")->take_all();
  pl->add_option("--kind", plot_kind, "scatter, sweep, dims or all");
  pl->add_option("-o,--out", plot_out, "output directory (default: $IFLOW_OUTPUT_ROOT or .)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_flags, gen_out, out);
    if (tr->parsed()) return cmd_train(train_flags, data, resume, out, err);
    if (ev->parsed()) return cmd_eval(ckpt, data, force, eval_out, out, err);
    if (sw->parsed()) return cmd_sweep(sweep_flags, seeds, activations, workers, out);
    if (pl->parsed()) return cmd_plot(data, ckpt, sweep_files, plot_kind, plot_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  }
  return kUsage;
}

}  // namespace iflow::cli
