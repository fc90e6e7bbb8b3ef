#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dffl/dataset_io.hpp"
#include "dffl/experiments.hpp"
#include "dffl/transport.hpp"

namespace dffl::cli {

enum ExitCode : int { ok = 0, failure = 1, usage = 2, config = 3, protocol = 4, io = 5 };

inline constexpr int manifest_schema_version = 1;

// Overrides applied on top of the scenario file or built-in scenario.
struct Overrides {
  std::optional<std::uint32_t> rounds;
  std::optional<std::string> policy;
  std::optional<std::string> dispatch;
  std::optional<std::string> payload;
  std::optional<double> bandwidth;
  std::optional<double> initial_waiting_time;
  std::optional<std::uint64_t> epochs;
};

struct RunConfig {
  std::string scenario = "s1";
  std::optional<std::string> manifest;
  std::uint64_t seed = 1;
  std::string mode = "dynamic";
  std::optional<std::string> output_dir;
  Overrides overrides;

  // suite
  std::vector<std::uint64_t> seeds;
  bool all_seeds = false;
  unsigned jobs = 1;

  // serve / client
  std::string address = "127.0.0.1:7070";
  std::size_t clients = 3;
  double time_scale = 1.0;
  std::uint32_t client_index = 1;
  std::optional<std::string> data_path;
  double rate = 1.0;
  double jitter = 0.0;
  int connect_attempts = 50;

  // report
  std::vector<std::string> inputs;
};

inline std::filesystem::path output_dir(const RunConfig& c) {
  if (c.output_dir) return *c.output_dir;
  if (const char* env = std::getenv("DFFL_OUTPUT_DIR"); env && *env) return env;
  return "dffl-out";
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

inline std::uint64_t parse_payload(const std::string& text) {
  for (const auto& p : presets::payloads) {
    if (text == p.name) return p.bytes;
  }
  long long v = 0;
  try {
    v = parse_int(text, "payload");
  } catch (const ValidationError&) {
    throw ConfigError("--payload: expected bytes or one of small, medium, large, got '" + text + "'");
  }
  if (v <= 0) throw ConfigError("--payload: must be positive");
  return static_cast<std::uint64_t>(v);
}

inline void apply_overrides(Scenario& s, const Overrides& o) {
  if (o.rounds) s.rounds = *o.rounds;
  if (o.policy) {
    try {
      s.policy.kind = codec::enum_value(*o.policy, codec::policy_kinds, "--policy");
    } catch (const SchemaError& e) {
      throw ConfigError(e.what());
    }
  }
  if (o.dispatch) {
    try {
      s.dispatch = codec::enum_value(*o.dispatch, codec::dispatch_scopes, "--dispatch");
    } catch (const SchemaError& e) {
      throw ConfigError(e.what());
    }
  }
  if (o.payload) s.payload_bytes = parse_payload(*o.payload);
  if (o.bandwidth) s.network.bandwidth = *o.bandwidth;
  if (o.initial_waiting_time) s.initial_waiting_time = *o.initial_waiting_time;
  if (o.epochs) s.trainer.epochs = *o.epochs;
  s.validate();
}

inline Scenario resolve_scenario(const std::string& spec) {
  std::filesystem::path p(spec);
  if (p.extension() == ".json" || std::filesystem::exists(p)) return load_scenario(p);
  if (auto s = find_scenario(spec)) return *s;
  throw ConfigError("unknown scenario '" + spec + "' (built-in: s1..s6, optionally suffixed _small/_medium/_large)");
}

struct Resolved {
  Scenario scenario;
  std::uint64_t seed = 0;
  std::string mode;
};

inline Json manifest_json(const std::string& command, const Resolved& r, const std::vector<std::string>& outputs) {
  Json j{{"schema_version", manifest_schema_version},
         {"command", command},
         {"scenario", scenario_to_json(r.scenario)},
         {"seed", r.seed},
         {"outputs", outputs}};
  if (command == "sim" || command == "serve") j["mode"] = r.mode;
  return j;
}

inline Resolved resolve(const std::string& command, const RunConfig& c) {
  Resolved r;
  if (c.manifest) {
    Json j;
    try {
      j = Json::parse(read_text_file(*c.manifest));
    } catch (const Json::parse_error& e) {
      throw ConfigError(*c.manifest + ": not valid JSON: " + e.what());
    }
    auto field = [&](const char* key) -> const Json& {
      if (!j.is_object() || !j.contains(key)) throw ConfigError(*c.manifest + ": manifest." + std::string(key) + ": required");
      return j.at(key);
    };
    if (field("schema_version") != manifest_schema_version) throw ConfigError(*c.manifest + ": unsupported manifest version");
    if (field("command") != command) {
      throw ConfigError(*c.manifest + ": manifest is for '" + field("command").dump() + "', not '" + command + "'");
    }
    try {
      r.scenario = scenario_from_json(field("scenario"));
    } catch (const ConfigError& e) {
      throw ConfigError(*c.manifest + ": manifest." + e.what());
    }
    if (!field("seed").is_number_unsigned()) throw ConfigError(*c.manifest + ": manifest.seed: expected an integer");
    r.seed = field("seed").get<std::uint64_t>();
    if (command == "sim") {
      if (!field("mode").is_string()) throw ConfigError(*c.manifest + ": manifest.mode: expected a string");
      r.mode = field("mode").get<std::string>();
    }
  } else {
    r.scenario = resolve_scenario(c.scenario);
    r.seed = c.seed;
    r.mode = c.mode;
  }
  apply_overrides(r.scenario, c.overrides);
  if (command == "sim") {
    try {
      (void)mode_from_name(r.mode);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("--mode: ") + e.what());
    }
  }
  return r;
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const Resolved& r,
                           const std::vector<std::string>& outputs) {
  write_text_file(dir / "manifest.json", manifest_json(command, r, outputs).dump(2) + "\n");
}

inline std::string summary_line(const ModeSummary& m) {
  std::ostringstream s;
  s << std::left << std::setw(9) << mode_name(m.mode) << std::right << std::fixed << std::setprecision(4)
    << " acc " << m.final_accuracy << "  uploads " << std::setw(3) << m.total_upload_count << std::setprecision(1)
    << "  upload time " << std::setw(8) << m.total_upload_time << " s  wall-clock " << std::setw(9)
    << m.total_training_wallclock << " s";
  return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_sim(const RunConfig& c, std::ostream& out) {
  auto r = resolve("sim", c);
  auto dir = output_dir(c);
  ensure_dir(dir);
  auto summary = run_mode(r.scenario, r.seed, mode_from_name(r.mode));
  RunTable table{r.scenario.name, r.seed, {summary}};
  export_csv(table, dir / "ledger.csv");
  write_manifest(dir, "sim", r, {"ledger.csv"});
  out << r.scenario.name << " seed " << r.seed << "\n  " << summary_line(summary) << "\n";
  return ok;
}

inline int cmd_compare(const RunConfig& c, std::ostream& out) {
  auto r = resolve("compare", c);
  auto dir = output_dir(c);
  ensure_dir(dir);
  auto report = run_comparison(r.scenario, r.seed);
  export_csv(report, dir / "comparison.csv");
  write_manifest(dir, "compare", r, {"comparison.csv"});
  out << r.scenario.name << " seed " << r.seed << "\n  " << summary_line(report.dynamic) << "\n  "
      << summary_line(report.baseline) << "\n  saved " << report.uploads_saved() << " uploads, "
      << format_double(report.upload_time_saved()) << " s upload time\n";
  return ok;
}

inline int cmd_suite(const RunConfig& c, std::ostream& out) {
  auto suite = build_scenario_suite();
  for (auto& s : suite) apply_overrides(s, c.overrides);
  auto dir = output_dir(c);
  ensure_dir(dir);

  struct Task {
    std::size_t scenario;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    std::vector<std::uint64_t> seeds = c.all_seeds ? suite[i].seeds : c.seeds;
    if (seeds.empty()) seeds = {suite[i].seeds.front()};
    for (auto seed : seeds) tasks.push_back({i, seed});
  }

  std::vector<std::optional<ComparisonReport>> reports(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t k; (k = next++) < tasks.size();) {
      try {
        reports[k] = run_comparison(suite[tasks[k].scenario], tasks[k].seed);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < std::max(1u, c.jobs); ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  std::ostringstream summary;
  summary << "scenario,seed,dynamic_acc,baseline_acc,dynamic_uploads,baseline_uploads,dynamic_upload_time,"
             "baseline_upload_time,dynamic_wallclock,baseline_wallclock\n";
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto& s = suite[tasks[k].scenario];
    const auto& r = *reports[k];
    auto sub = dir / s.name;
    ensure_dir(sub);
    std::string stem = "seed_" + std::to_string(r.seed);
    export_csv(r, sub / (stem + ".csv"));
    write_text_file(sub / (stem + ".manifest.json"),
                    manifest_json("compare", Resolved{s, r.seed, ""}, {stem + ".csv"}).dump(2) + "\n");
    summary << s.name << ',' << r.seed << ',' << format_double(r.dynamic.final_accuracy) << ','
            << format_double(r.baseline.final_accuracy) << ',' << r.dynamic.total_upload_count << ','
            << r.baseline.total_upload_count << ',' << format_double(r.dynamic.total_upload_time) << ','
            << format_double(r.baseline.total_upload_time) << ',' << format_double(r.dynamic.total_training_wallclock)
            << ',' << format_double(r.baseline.total_training_wallclock) << '\n';
    out << std::left << std::setw(10) << s.name << std::right << " seed " << std::setw(3) << r.seed << "  dynamic "
        << std::fixed << std::setprecision(4) << r.dynamic.final_accuracy << " / " << std::setw(2)
        << r.dynamic.total_upload_count << " uploads   baseline " << r.baseline.final_accuracy << " / "
        << r.baseline.total_upload_count << " uploads\n";
  }
  write_text_file(dir / "suite_summary.csv", summary.str());
  return ok;
}

inline int cmd_serve(const RunConfig& c, std::ostream& out) {
  auto r = resolve("serve", c);
  auto endpoint = parse_endpoint(c.address);
  if (c.clients == 0) throw ConfigError("--clients must be >= 1");
  if (!(c.time_scale > 0.0)) throw ConfigError("--time-scale must be positive");
  auto dir = output_dir(c);
  ensure_dir(dir);
  auto data = materialize(r.scenario, r.seed);
  auto job = make_job(r.scenario, data.initial_params, mode_from_name(c.mode));
  ServeOptions options;
  options.time_scale = c.time_scale;
  options.network = r.scenario.network;
  std::mutex out_mutex;
  options.log = [&](const std::string& s) {
    std::lock_guard lock(out_mutex);
    out << "warning: " << s << "\n";
  };
  options.on_listening = [&](std::uint16_t port) {
    std::lock_guard lock(out_mutex);
    out << "listening on " << endpoint.host << ":" << port << std::endl;
  };
  auto test = std::make_shared<Dataset>(data.test_set);
  auto result = serve(job, c.clients, endpoint,
                      [test](const ParameterVector& p, std::uint32_t) { return evaluate(p, *test); }, options);
  RunTable table{r.scenario.name, r.seed, {ModeSummary::from_ledger(job.mode, result.ledger)}};
  export_csv(table, dir / "ledger.csv");
  Resolved manifest = r;
  manifest.mode = c.mode;
  write_manifest(dir, "serve", manifest, {"ledger.csv"});
  out << summary_line(table.runs.front()) << "\n";
  return ok;
}

inline int cmd_client(const RunConfig& c, std::ostream& out) {
  auto endpoint = parse_endpoint(c.address);
  if (!(c.time_scale > 0.0)) throw ConfigError("--time-scale must be positive");
  Dataset data;
  ComputeProfile compute{c.rate, c.jitter};
  ClientRunOptions options;
  options.time_scale = c.time_scale;
  options.connect_attempts = c.connect_attempts;
  options.log = [&](const std::string& s) { out << "warning: " << s << "\n"; };
  std::uint64_t seed = c.seed;
  if (c.data_path) {
    data = read_dataset_csv(*c.data_path);
    try {
      compute.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("--rate/--jitter: ") + e.what());
    }
  } else {
    auto r = resolve("client", c);
    if (c.client_index < 1 || c.client_index > r.scenario.clients.size()) {
      throw ConfigError("--client-index must be in 1.." + std::to_string(r.scenario.clients.size()));
    }
    auto materialized = materialize(r.scenario, r.seed);
    auto& profile = materialized.profiles.at(c.client_index - 1);
    data = std::move(profile.data);
    compute = profile.compute;
    options.accuracy_source = r.scenario.accuracy_source;
    options.holdout_fraction = r.scenario.holdout_fraction;
    seed = r.seed;
  }
  auto result = run_client(endpoint, c.client_index, data, compute, seed, options);
  out << "client " << result.state.client_id << " finished " << result.state.fed_step << " rounds\n";
  return ok;
}

inline int cmd_report(const RunConfig& c, std::ostream& out) {
  std::vector<std::filesystem::path> files;
  for (const auto& in : c.inputs) {
    std::filesystem::path p(in);
    if (std::filesystem::is_directory(p)) {
      for (const auto& e : std::filesystem::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename() != "suite_summary.csv") {
          files.push_back(e.path());
        }
      }
    } else {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("report: no CSV files given");
  for (const auto& f : files) {
    auto t = parse_csv(f);
    out << t.scenario << " seed " << t.seed << "  (" << f.string() << ")\n";
    for (const auto& m : t.runs) out << "  " << summary_line(m) << "\n";
  }
  return ok;
}

// ---------------------------------------------------------------------------

inline void add_scenario_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--scenario", c.scenario, "Built-in scenario (s1..s6[_small|_medium|_large]) or scenario JSON file")
      ->capture_default_str();
  sub->add_option("--seed", c.seed, "Root random seed")->capture_default_str();
  sub->add_option("--manifest", c.manifest, "Re-run the configuration recorded in a manifest.json");
  sub->add_option("--rounds", c.overrides.rounds, "Override the number of fusion rounds");
  sub->add_option("--policy", c.overrides.policy, "Participation policy: global_max or local_improvement");
  sub->add_option("--dispatch", c.overrides.dispatch, "Global model dispatch: participants_only or all_clients");
  sub->add_option("--payload", c.overrides.payload, "Model payload in bytes, or small/medium/large");
  sub->add_option("--bandwidth", c.overrides.bandwidth, "Network bandwidth in bytes per second");
  sub->add_option("--initial-waiting-time", c.overrides.initial_waiting_time, "Round 1 waiting time in seconds");
  sub->add_option("--epochs", c.overrides.epochs, "Local training epochs per round");
}

inline void add_output_option(CLI::App* sub, RunConfig& c) {
  sub->add_option("--out", c.output_dir, "Output directory (default: $DFFL_OUTPUT_DIR or ./dffl-out)");
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dynamic fusion federated learning simulator and runtime", "dffl"};
  app.require_subcommand(1);
  RunConfig c;

  auto* sim = app.add_subcommand("sim", "Simulate one scenario in one fusion mode");
  add_scenario_options(sim, c);
  add_output_option(sim, c);
  sim->add_option("--mode", c.mode, "dynamic or baseline")->capture_default_str();

  auto* compare = app.add_subcommand("compare", "Simulate dynamic fusion against the synchronous baseline");
  add_scenario_options(compare, c);
  add_output_option(compare, c);

  auto* suite = app.add_subcommand("suite", "Run all 18 built-in scenario and payload combinations");
  add_output_option(suite, c);
  suite->add_option("--seeds", c.seeds, "Seeds to run for every scenario (default: the first scenario seed)")
      ->delimiter(',');
  suite->add_flag("--all-seeds", c.all_seeds, "Run every seed listed in each scenario");
  suite->add_option("--jobs", c.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  suite->add_option("--rounds", c.overrides.rounds, "Override the number of fusion rounds");
  suite->add_option("--epochs", c.overrides.epochs, "Local training epochs per round");

  auto* serve_cmd = app.add_subcommand("serve", "Run the federation server over TCP");
  add_scenario_options(serve_cmd, c);
  add_output_option(serve_cmd, c);
  serve_cmd->add_option("--mode", c.mode, "dynamic or baseline")->capture_default_str();
  serve_cmd->add_option("--listen", c.address, "Listen address host:port")->envname("DFFL_LISTEN")->capture_default_str();
  serve_cmd->add_option("--clients", c.clients, "Expected number of clients")->capture_default_str();
  serve_cmd->add_option("--time-scale", c.time_scale, "Real seconds per protocol second")->capture_default_str();

  auto* client_cmd = app.add_subcommand("client", "Run one federation client over TCP");
  add_scenario_options(client_cmd, c);
  client_cmd->add_option("--connect", c.address, "Server address host:port")->envname("DFFL_SERVER")->capture_default_str();
  client_cmd->add_option("--client-index", c.client_index, "Client slot (1-based) in the scenario")->capture_default_str();
  client_cmd->add_option("--data", c.data_path, "Train on this dataset CSV instead of scenario data");
  client_cmd->add_option("--rate", c.rate, "With --data: seconds per epoch per 1000 samples")->capture_default_str();
  client_cmd->add_option("--jitter", c.jitter, "With --data: training time jitter fraction")->capture_default_str();
  client_cmd->add_option("--time-scale", c.time_scale, "Real seconds per protocol second")->capture_default_str();
  client_cmd->add_option("--connect-attempts", c.connect_attempts, "Connection attempts before giving up")
      ->capture_default_str();

  auto* report = app.add_subcommand("report", "Summarise result CSV files");
  report->add_option("inputs", c.inputs, "CSV files or directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return usage;
  }

  try {
    if (sim->parsed()) return cmd_sim(c, out);
    if (compare->parsed()) return cmd_compare(c, out);
    if (suite->parsed()) return cmd_suite(c, out);
    if (serve_cmd->parsed()) return cmd_serve(c, out);
    if (client_cmd->parsed()) return cmd_client(c, out);
    if (report->parsed()) return cmd_report(c, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config;
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << "\n";
    return protocol;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return io;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << "\n";
    return config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
  return usage;
}

}  // namespace dffl::cli
