#pragma once

// The four subcommands. Each returns a process exit code:
//   0 success, 1 failed property or sweep cell, 2 invalid config or usage,
//   3 numeric abort.

#include "psgd/errors.hpp"
#include "psgd/experiment/config.hpp"
#include "psgd/experiment/io.hpp"
#include "psgd/experiment/run.hpp"
#include "psgd/instrumentation.hpp"
#include "psgd/verify.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace psgd::experiment {

enum ExitCode : int { kOk = 0, kFailed = 1, kUsage = 2, kAborted = 3 };

inline constexpr const char* kOutputRootEnv = "PSGD_OUTPUT_ROOT";

struct CommandOptions {
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

// A YAML config, or a manifest.json whose embedded config is re-run.
inline ResolvedConfig load_config(const std::string& path, const CommandOptions& opt) {
  const std::string text = read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    Json j;
    try {
      j = Json::parse(text);
    } catch (const Json::exception& e) {
      throw ConfigError("'" + path + "' is not a valid manifest: " + e.what());
    }
    if (!j.contains("config") || !j["config"].is_string()) {
      throw ConfigError("manifest '" + path + "' has no 'config' text");
    }
    return resolve(parse_config_text(j["config"].get<std::string>()), opt.seed);
  }
  return resolve(parse_config_text(text), opt.seed);
}

inline std::filesystem::path output_dir(const std::string& command, const ResolvedConfig& rc,
                                        const CommandOptions& opt) {
  std::filesystem::path dir;
  if (opt.out_dir) {
    dir = *opt.out_dir;
  } else {
    const char* env = std::getenv(kOutputRootEnv);
    const std::filesystem::path root = env && *env ? env : "runs";
    dir = root / command / (rc.config.name + "-" + rc.hash.substr(0, 12));
  }
  std::filesystem::create_directories(dir);
  return dir;
}

namespace detail {

template <typename F>
int guarded(const CommandOptions& opt, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    *opt.err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    *opt.err << "invalid setting: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    *opt.err << "numeric abort: " << e.what() << "\n";
    return kAborted;
  } catch (const std::exception& e) {
    *opt.err << "error: " << e.what() << "\n";
    return kFailed;
  }
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, const CommandOptions& opt = {}) {
  return detail::guarded(opt, [&] {
    const auto rc = load_config(config_path, opt);
    const auto& c = rc.config;
    const Setup setup = build_setup(c);
    make_train_config(c, setup).validate();
    const auto dir = output_dir("train", rc, opt);

    auto jsonl = open_output(dir / "trajectory.jsonl");
    const StepObserver write = [&](const ParamVector&, const StepTrace& s) {
      jsonl << trace_json(s, rc.hash, c.seed).dump() << "\n";
    };
    const RunOutcome r = execute(c, setup, write);
    jsonl.close();

    const auto& traj = r.trajectory;
    const std::string status = traj.aborted ? "aborted" : "ok";
    {
      auto out = open_output(dir / "summary.csv");
      CsvWriter csv(out);
      csv.row(summary_columns());
      auto row = [&](const std::string& scope, const Summary& s, std::optional<double> val,
                     std::optional<double> core_val) {
        std::vector<std::string> f{rc.hash, std::to_string(c.seed), scope, status};
        const auto rest = summary_fields(s);
        f.insert(f.end(), rest.begin(), rest.end());
        f.push_back(csv_number(val));
        f.push_back(csv_number(core_val));
        csv.row(f);
      };
      row("all", traj.summary, r.validation_loss, r.core_validation_loss);
      for (const auto& [phase, s] : traj.phases) row(phase, s, std::nullopt, std::nullopt);
    }
    write_manifest(dir, {"train", rc, status, traj.abort_reason, {"trajectory.jsonl", "summary.csv"}});

    auto& o = *opt.out;
    o << "run " << c.name << " (" << rc.hash.substr(0, 12) << ") -> " << dir.string() << "\n";
    o << "  steps " << traj.summary.steps;
    if (traj.summary.final_loss) o << ", final loss " << *traj.summary.final_loss;
    if (traj.summary.final_grad_norm) o << ", final ||grad f|| " << *traj.summary.final_grad_norm;
    if (r.validation_loss) o << ", validation loss " << *r.validation_loss;
    if (r.core_validation_loss) o << ", core validation loss " << *r.core_validation_loss;
    o << "\n";
    if (traj.aborted) {
      *opt.err << "numeric abort: " << traj.abort_reason << " (partial trajectory kept)\n";
      return int(kAborted);
    }
    return int(kOk);
  });
}

inline void print_report(std::ostream& o, const verify::SuiteReport& r) {
  o << (r.passed() ? "PASS " : "FAIL ") << r.suite << " (" << verify::detail::fmt(r.seconds) << " s)\n";
  for (const auto& p : r.properties) {
    o << "  " << (p.passed ? "ok   " : "FAIL ") << p.name << ": " << verify::detail::fmt(p.measured) << " "
      << p.relation << " " << verify::detail::fmt(p.bound);
    if (!p.detail.empty()) o << "  [" << p.detail << "]";
    o << "\n";
  }
}

inline int cmd_verify(const std::string& suite, const CommandOptions& opt = {}) {
  std::vector<const verify::SuiteInfo*> chosen;
  if (suite == "all") {
    for (const auto& s : verify::registry()) chosen.push_back(&s);
  } else if (const auto* s = verify::find_suite(suite)) {
    chosen.push_back(s);
  } else {
    *opt.err << "unknown suite '" << suite << "'; available:";
    for (const auto& s : verify::registry()) *opt.err << " " << s.name;
    *opt.err << " all\n";
    return kUsage;
  }
  return detail::guarded(opt, [&] {
    bool ok = true;
    for (const auto* s : chosen) {
      const auto r = s->run();
      print_report(*opt.out, r);
      ok = ok && r.passed();
    }
    return ok ? int(kOk) : int(kFailed);
  });
}

struct MeasureArm {
  std::string name;
  std::vector<FigureRow> rows;
  std::optional<double> validation_loss;
  bool aborted = false;
};

inline const std::vector<std::string>& measure_columns() {
  static const std::vector<std::string> cols{"config_hash", "seed",     "arm",     "t",     "phase",
                                             "overlap",     "sim_sq",   "align_sq", "c_sim", "c_align",
                                             "cosine"};
  return cols;
}

// Both arms of a scenario train from the same start and are probed at every
// iterate with the same kind of mask: a fresh neuron-dropout mask for the
// dropout scenario, the core mask for the ATS scenario, with the dropped
// coordinates zeroed for the gradient.
inline int cmd_measure(const std::string& config_path, const CommandOptions& opt = {}) {
  return detail::guarded(opt, [&] {
    const auto rc = load_config(config_path, opt);
    const auto& c = rc.config;
    if (!c.measure) throw ConfigError("missing required key 'measure'");
    const auto& m = *c.measure;
    const Setup setup = build_setup(c);
    TrainConfig cfg = make_train_config(c, setup);
    cfg.validate();
    const auto dir = output_dir("measure", rc, opt);

    std::optional<Mask> core;
    std::optional<NeuronIncidence> inc;
    if (m.scenario == "ats") {
      core = core_of(c, setup);
    } else {
      if (c.model.kind != "mlp") throw ConfigError("'measure.scenario: dropout' needs 'model.kind: mlp'");
      inc = neuron_incidence(*setup.net);
    }

    auto run_arm = [&](const std::string& name) {
      MeasureArm arm{name, {}, std::nullopt, false};
      Rng probe_rng(derive_seed(c.seed, kProbe));
      MaskStrategy probe_masks = core ? MaskStrategy::fixed(*core) : MaskStrategy::neuron_dropout(m.keep, *inc);
      const StepObserver probe = [&](const ParamVector& x, const StepTrace& s) {
        const Mask p = probe_masks.next(s.t, x.size(), nullptr, probe_rng);
        arm.rows.push_back(probe_criteria(*setup.problem, x, p, ZeroComplement{}, m.exact, probe_rng, s.t, s.phase));
      };
      Trajectory traj;
      if (name == "ats") {
        traj = run_ats(*setup.problem, setup.x0, *core, cfg, probe);
      } else if (name == "dropout") {
        traj = run_partial_sgd(*setup.problem, setup.x0, MaskStrategy::neuron_dropout(m.keep, *inc), ZeroComplement{},
                               cfg, probe);
      } else {
        traj = run_partial_sgd(*setup.problem, setup.x0, MaskStrategy::all_ones(), NoPerturbation{}, cfg, probe);
      }
      arm.aborted = traj.aborted;
      if (!traj.aborted) arm.validation_loss = dataset_loss(setup.net->graph, traj.final_point, setup.data->validation);
      return arm;
    };

    std::vector<MeasureArm> arms;
    if (m.scenario == "ats") {
      arms.push_back(run_arm("ats"));
      arms.push_back(run_arm("standard"));
    } else {
      arms.push_back(run_arm("dropout"));
      arms.push_back(run_arm("no_dropout"));
    }

    std::vector<std::string> outputs;
    for (const auto& arm : arms) {
      const std::string file = "measure_" + arm.name + ".csv";
      auto out = open_output(dir / file);
      CsvWriter csv(out);
      csv.row(measure_columns());
      for (const auto& r : arm.rows) {
        csv.row({rc.hash, std::to_string(c.seed), arm.name, std::to_string(r.t), r.phase, csv_number(r.overlap),
                 csv_number(r.sim_sq), csv_number(r.align_sq), csv_number(r.c_sim), csv_number(r.c_align),
                 csv_number(r.cosine)});
      }
      outputs.push_back(file);
    }

    bool aborted = false;
    {
      auto out = open_output(dir / "measure_summary.csv");
      CsvWriter csv(out);
      csv.row({"config_hash", "seed", "arm", "status", "tail_from", "median_overlap", "median_sim_sq",
               "median_align_sq", "median_c_sim", "median_c_align", "mean_overlap", "validation_loss"});
      for (const auto& arm : arms) {
        const auto n = arm.rows.size();
        const auto from = n - static_cast<std::size_t>(std::ceil(m.tail * static_cast<double>(n)));
        auto get = [](auto field) { return [field](const FigureRow& r) { return r.*field; }; };
        csv.row({rc.hash, std::to_string(c.seed), arm.name, arm.aborted ? "aborted" : "ok", std::to_string(from),
                 csv_number(series_median(arm.rows, get(&FigureRow::overlap), from)),
                 csv_number(series_median(arm.rows, get(&FigureRow::sim_sq), from)),
                 csv_number(series_median(arm.rows, get(&FigureRow::align_sq), from)),
                 csv_number(series_median(arm.rows, get(&FigureRow::c_sim), from)),
                 csv_number(series_median(arm.rows, get(&FigureRow::c_align), from)),
                 csv_number(series_mean(arm.rows, get(&FigureRow::overlap), from)), csv_number(arm.validation_loss)});
        aborted = aborted || arm.aborted;
        *opt.out << arm.name << ": " << n << " probes, median overlap (last " << (n - from) << ") "
                 << csv_number(series_median(arm.rows, get(&FigureRow::overlap), from)) << "\n";
      }
    }
    outputs.push_back("measure_summary.csv");
    write_manifest(dir, {"measure", rc, aborted ? "aborted" : "ok", "", outputs});
    *opt.out << "measure " << c.name << " (" << rc.hash.substr(0, 12) << ") -> " << dir.string() << "\n";
    return aborted ? int(kAborted) : int(kOk);
  });
}

struct SweepRow {
  std::size_t cell = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> values;
  std::string hash;
  std::string status = "ok";
  Summary summary;
  std::optional<double> validation_loss;
  std::optional<double> core_validation_loss;
  std::optional<std::int64_t> steps_to_threshold;
  std::optional<std::int64_t> bound_T;
  std::optional<bool> within_bound;
};

// Runs one (cell, seed) pair. Steps-to-threshold is the first T with
// (1/T) sum_{t<T} alpha_t^2 ||p_t (.) grad f(x~_t)||^2 below the threshold.
inline void run_sweep_cell(const std::string& base_yaml, const SweepSpec& sweep, SweepRow& row) {
  try {
    YAML::Node node = load_yaml_text(base_yaml);
    node.remove("sweep");
    for (std::size_t k = 0; k < sweep.grid.size(); ++k) set_dotted(node, sweep.grid[k].first, row.values[k]);
    node["seed"] = row.seed;
    const auto rc = resolve(parse_config(load_yaml_text(YAML::Dump(node))));
    row.hash = rc.hash;
    const auto& c = rc.config;
    const Setup setup = build_setup(c);
    const auto threshold = sweep.threshold ? sweep.threshold : c.optimizer.epsilon;
    double running = 0.0;
    const StepObserver track = [&](const ParamVector&, const StepTrace& s) {
      const double b = s.geometry.masked_perturbed_norm;
      running += s.alpha * s.alpha * b * b;
      const double mean = running / static_cast<double>(s.t + 1);
      if (threshold && !row.steps_to_threshold && mean < *threshold) row.steps_to_threshold = s.t + 1;
    };
    const RunOutcome r = execute(c, setup, track);
    row.summary = r.trajectory.summary;
    row.validation_loss = r.validation_loss;
    row.core_validation_loss = r.core_validation_loss;
    row.bound_T = iteration_bound(c, setup);
    if (row.bound_T && row.steps_to_threshold) row.within_bound = *row.steps_to_threshold <= *row.bound_T;
    if (row.bound_T && !row.steps_to_threshold && c.optimizer.steps >= *row.bound_T) row.within_bound = false;
    if (r.trajectory.aborted) row.status = "aborted: " + r.trajectory.abort_reason;
  } catch (const std::exception& e) {
    row.status = std::string("failed: ") + e.what();
  }
}

inline int cmd_sweep(const std::string& config_path, const CommandOptions& opt = {}) {
  return detail::guarded(opt, [&] {
    const auto rc = load_config(config_path, opt);
    const auto& c = rc.config;
    if (!c.sweep) throw ConfigError("missing required key 'sweep'");
    const auto& sweep = *c.sweep;
    // Fail fast on a grid key that does not parse, before any cell runs.
    {
      YAML::Node node = load_yaml_text(rc.canonical);
      node.remove("sweep");
      for (const auto& [key, values] : sweep.grid) set_dotted(node, key, values.front());
      parse_config(load_yaml_text(YAML::Dump(node)));
    }
    const auto dir = output_dir("sweep", rc, opt);

    std::vector<std::vector<std::string>> cells{{}};
    for (const auto& [key, values] : sweep.grid) {
      std::vector<std::vector<std::string>> next;
      for (const auto& prefix : cells) {
        for (const auto& v : values) {
          auto cell = prefix;
          cell.push_back(v);
          next.push_back(std::move(cell));
        }
      }
      cells = std::move(next);
    }
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      for (auto s : sweep.seeds) {
        SweepRow r;
        r.cell = i;
        r.seed = s;
        r.values = cells[i];
        rows.push_back(std::move(r));
      }
    }

    // Replicas share only the read-only base config; each writes its own row.
    const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t workers =
        std::min(rows.size(), sweep.threads > 0 ? static_cast<std::size_t>(sweep.threads) : hw);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < rows.size(); i = next++) run_sweep_cell(rc.canonical, sweep, rows[i]);
      });
    }
    for (auto& t : pool) t.join();

    bool failed = false;
    {
      auto out = open_output(dir / "sweep.csv");
      CsvWriter csv(out);
      std::vector<std::string> header{"sweep_hash", "cell", "seed"};
      for (const auto& [key, values] : sweep.grid) header.push_back(key);
      for (const char* col : {"config_hash", "status", "steps", "mean_scaled_masked_sq", "mean_grad_sq", "max_q",
                              "final_loss", "final_grad_norm", "validation_loss", "core_validation_loss",
                              "steps_to_threshold", "theorem_bound_T", "within_bound"}) {
        header.emplace_back(col);
      }
      csv.row(header);
      for (const auto& r : rows) {
        std::vector<std::string> f{rc.hash, std::to_string(r.cell), std::to_string(r.seed)};
        f.insert(f.end(), r.values.begin(), r.values.end());
        const auto& s = r.summary;
        const bool ok = r.status == "ok";
        failed = failed || !ok;
        auto opt_int = [](const std::optional<std::int64_t>& v) { return v ? std::to_string(*v) : std::string(); };
        f.insert(f.end(), {r.hash, r.status, ok ? std::to_string(s.steps) : "", ok ? csv_number(s.mean_scaled_masked_sq) : "",
                           ok ? csv_number(s.mean_grad_sq) : "", csv_number(s.max_q), csv_number(s.final_loss),
                           csv_number(s.final_grad_norm), csv_number(r.validation_loss),
                           csv_number(r.core_validation_loss), opt_int(r.steps_to_threshold), opt_int(r.bound_T),
                           r.within_bound ? (*r.within_bound ? "true" : "false") : ""});
        csv.row(f);
      }
    }
    write_manifest(dir, {"sweep", rc, failed ? "failed" : "ok", "", {"sweep.csv"}});
    *opt.out << "sweep " << c.name << ": " << cells.size() << " cells x " << sweep.seeds.size() << " seeds -> "
             << dir.string() << "\n";
    for (const auto& r : rows) {
      if (r.status != "ok") *opt.err << "cell " << r.cell << " seed " << r.seed << ": " << r.status << "\n";
    }
    return failed ? int(kFailed) : int(kOk);
  });
}

}  // namespace psgd::experiment
