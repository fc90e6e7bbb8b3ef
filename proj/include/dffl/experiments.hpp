#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dffl/codec.hpp"
#include "dffl/error.hpp"
#include "dffl/message.hpp"
#include "dffl/model.hpp"
#include "dffl/protocol.hpp"
#include "dffl/rng.hpp"
#include "dffl/simnet.hpp"
#include "dffl/text.hpp"

namespace dffl {

// ---------------------------------------------------------------------------
// Scenarios

// A block of samples from one modality. Modalities differ in which feature
// axes their class clusters occupy.
struct DataPart {
  std::size_t n_samples = 0;
  std::vector<double> class_ratios;
  std::size_t modality = 0;
  friend bool operator==(const DataPart&, const DataPart&) = default;
};

struct LabelCorruption {
  std::size_t source = 0;
  std::size_t target = 0;
  double fraction = 1.0;
  friend bool operator==(const LabelCorruption&, const LabelCorruption&) = default;
};

struct ClientSpec {
  std::vector<DataPart> parts;
  std::optional<LabelCorruption> corruption;
  ComputeProfile compute;

  std::size_t n_samples() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.n_samples;
    return n;
  }
  friend bool operator==(const ClientSpec&, const ClientSpec&) = default;
};

struct Scenario {
  std::string name;
  std::vector<ClientSpec> clients;
  std::vector<DataPart> test_parts;
  std::size_t n_features = 6;
  std::size_t class_count = 3;
  double separation = 5.0;
  std::vector<std::size_t> modality_offsets{0, 3};
  std::uint64_t payload_bytes = 22'000'000;
  NetworkModel network;
  std::uint32_t rounds = 30;
  TrainerSpec trainer;
  double initial_waiting_time = 120.0;
  ParticipationPolicy policy;
  DispatchScope dispatch = DispatchScope::participants_only;
  AggregationWeighting weighting = AggregationWeighting::dataset_size;
  AccuracySource accuracy_source = AccuracySource::training_set;
  double holdout_fraction = 0.2;
  std::vector<std::uint64_t> seeds;

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& c : clients) n += c.n_samples();
    return n;
  }

  void validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError("scenario '" + name + "': " + what); };
    if (name.empty()) throw ConfigError("scenario: name must not be empty");
    if (clients.empty()) fail("at least one client required");
    if (rounds < 1) fail("rounds must be >= 1");
    if (n_features == 0 || class_count < 2) fail("need n_features >= 1 and class_count >= 2");
    if (!(separation > 0.0) || !std::isfinite(separation)) fail("separation must be positive");
    if (payload_bytes == 0) fail("payload_bytes must be positive");
    if (!(initial_waiting_time > 0.0) || !std::isfinite(initial_waiting_time)) {
      fail("initial_waiting_time must be positive");
    }
    if (accuracy_source == AccuracySource::holdout && !(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
      fail("holdout_fraction must be in (0, 1)");
    }
    std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size()) fail("seeds must be distinct");
    auto check_part = [&](const DataPart& p, const std::string& where) {
      if (p.n_samples == 0) fail(where + ": n_samples must be positive");
      if (p.class_ratios.size() != class_count) fail(where + ": need one class ratio per class");
      if (p.modality >= modality_offsets.size()) fail(where + ": unknown modality");
      double sum = 0.0;
      for (double r : p.class_ratios) {
        if (!(r >= 0.0)) fail(where + ": class ratios must be nonnegative");
        sum += r;
      }
      if (std::abs(sum - 1.0) > 1e-9) fail(where + ": class ratios must sum to 1");
    };
    for (std::size_t i = 0; i < clients.size(); ++i) {
      const auto& c = clients[i];
      std::string where = "clients[" + std::to_string(i) + "]";
      if (c.parts.empty()) fail(where + ": no data parts");
      for (std::size_t k = 0; k < c.parts.size(); ++k) check_part(c.parts[k], where + ".parts[" + std::to_string(k) + "]");
      if (c.corruption) {
        if (c.corruption->source >= class_count || c.corruption->target >= class_count ||
            c.corruption->source == c.corruption->target) {
          fail(where + ".corruption: bad class indices");
        }
        if (!(c.corruption->fraction >= 0.0 && c.corruption->fraction <= 1.0)) {
          fail(where + ".corruption: fraction must be in [0, 1]");
        }
      }
      try {
        c.compute.validate();
      } catch (const ValidationError& e) {
        fail(where + ".compute: " + e.what());
      }
    }
    if (test_parts.empty()) fail("test_parts must not be empty");
    for (std::size_t k = 0; k < test_parts.size(); ++k) check_part(test_parts[k], "test_parts[" + std::to_string(k) + "]");
    try {
      network.validate();
      trainer.validate();
    } catch (const ValidationError& e) {
      fail(e.what());
    }
  }

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

inline ClientId scenario_client_id(std::size_t index) { return static_cast<ClientId>(index + 1); }

// Class order: positive, negative, viral pneumonia.
namespace presets {

inline const std::vector<double> ct_ratios{349.0 / 746.0, 397.0 / 746.0, 0.0};
inline const std::vector<double> xray_ratios{274.0 / 2960.0, 1341.0 / 2960.0, 1345.0 / 2960.0};
inline constexpr std::size_t ct = 0;
inline constexpr std::size_t xray = 1;

struct PayloadPreset {
  const char* name;
  std::uint64_t bytes;
};
inline constexpr PayloadPreset payloads[] = {{"small", 22'000'000}, {"medium", 100'000'000}, {"large", 170'000'000}};

// Seconds per epoch per thousand samples for the three client machines,
// scaled by FP32 throughput of a GTX 1070, GTX 1080 and TITAN X (Pascal):
// 6.5, 8.9 and 11.0 TFLOPS.
inline constexpr double client_rates[] = {1.0, 6.5 / 8.9, 6.5 / 11.0};
inline constexpr double client_jitter = 0.1;

}  // namespace presets

inline std::vector<DataPart> mixed_parts(std::size_t ct_samples, std::size_t xray_samples) {
  std::vector<DataPart> parts;
  if (ct_samples > 0) parts.push_back({ct_samples, presets::ct_ratios, presets::ct});
  if (xray_samples > 0) parts.push_back({xray_samples, presets::xray_ratios, presets::xray});
  return parts;
}

// One dataset-ratio group with a given payload size. Groups are numbered 1..6.
inline Scenario make_group_scenario(int group, const presets::PayloadPreset& payload) {
  static const std::pair<std::size_t, std::size_t> splits[6][3] = {
      {{600, 0}, {0, 900}, {0, 1300}},   {{300, 300}, {0, 900}, {0, 1300}},   {{200, 400}, {0, 900}, {0, 1300}},
      {{150, 450}, {0, 900}, {0, 1300}}, {{200, 400}, {200, 700}, {0, 1300}}, {{200, 400}, {200, 700}, {200, 1100}},
  };
  if (group < 1 || group > 6) throw ConfigError("unknown scenario group " + std::to_string(group));
  Scenario s;
  s.name = "s" + std::to_string(group) + "_" + payload.name;
  for (std::size_t i = 0; i < 3; ++i) {
    ClientSpec c;
    c.parts = mixed_parts(splits[group - 1][i].first, splits[group - 1][i].second);
    c.compute = {presets::client_rates[i], presets::client_jitter};
    s.clients.push_back(std::move(c));
  }
  if (group == 4) s.clients[0].corruption = LabelCorruption{1, 0, 1.0};
  s.test_parts = {{71, {31.0 / 71.0, 40.0 / 71.0, 0.0}, presets::ct},
                  {455, {55.0 / 455.0, 200.0 / 455.0, 200.0 / 455.0}, presets::xray}};
  s.payload_bytes = payload.bytes;
  s.network = NetworkModel{10'000'000.0, 0.0};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) s.seeds.push_back(seed);
  return s;
}

// Six dataset-ratio groups times three payload presets, payload-major.
inline std::vector<Scenario> build_scenario_suite() {
  std::vector<Scenario> out;
  for (const auto& p : presets::payloads) {
    for (int g = 1; g <= 6; ++g) out.push_back(make_group_scenario(g, p));
  }
  return out;
}

// "s3" selects the small-payload variant; "s3_large" a specific one.
inline std::optional<Scenario> find_scenario(std::string_view name) {
  for (auto& s : build_scenario_suite()) {
    if (s.name == name) return s;
    if (s.name == std::string(name) + "_small") return s;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Materialization

struct ScenarioData {
  std::vector<ClientProfile> profiles;
  Dataset test_set;
  ParameterVector initial_params;
};

inline Dataset make_parts(const Scenario& s, const std::vector<DataPart>& parts, ClientId owner, Purpose purpose,
                          std::uint64_t seed) {
  std::optional<Dataset> out;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    SyntheticSpec spec;
    spec.n_samples = parts[k].n_samples;
    spec.n_features = s.n_features;
    spec.class_count = s.class_count;
    spec.class_ratios = parts[k].class_ratios;
    spec.separation = s.separation;
    spec.axis_offset = s.modality_offsets.at(parts[k].modality);
    spec.seed = derive_seed(seed, owner, static_cast<std::uint32_t>(k), purpose);
    auto d = generate_synthetic_dataset(spec);
    out = out ? concat_datasets(*out, d) : std::move(d);
  }
  return *out;
}

inline ScenarioData materialize(const Scenario& s, std::uint64_t seed) {
  s.validate();
  ScenarioData out;
  for (std::size_t i = 0; i < s.clients.size(); ++i) {
    const auto& c = s.clients[i];
    ClientProfile p;
    p.id = scenario_client_id(i);
    p.data = make_parts(s, c.parts, p.id, Purpose::data, seed);
    if (c.corruption) {
      p.data = corrupt_labels(p.data, c.corruption->source, c.corruption->target, c.corruption->fraction,
                              derive_seed(seed, p.id, 0, Purpose::corruption));
      p.adversarial = true;
    }
    p.compute = c.compute;
    out.profiles.push_back(std::move(p));
  }
  out.test_set = make_parts(s, s.test_parts, 0, Purpose::test_data, seed);
  out.initial_params = init_params(s.trainer, s.n_features, s.class_count, s.payload_bytes,
                                   derive_seed(seed, 0, 0, Purpose::init_params));
  return out;
}

inline Job make_job(const Scenario& s, const ParameterVector& initial, FusionMode mode) {
  Job job;
  job.fusion_times = s.rounds;
  job.initial_params = initial;
  job.trainer = s.trainer;
  job.initial_waiting_time = s.initial_waiting_time;
  job.aggregation_weighting = s.weighting;
  job.mode = mode;
  job.dispatch = s.dispatch;
  job.policy = s.policy;
  job.validate();
  return job;
}

inline SimOptions sim_options(const Scenario& s) {
  SimOptions o;
  o.accuracy_source = s.accuracy_source;
  o.holdout_fraction = s.holdout_fraction;
  return o;
}

// ---------------------------------------------------------------------------
// Reports

struct ModeSummary {
  FusionMode mode = FusionMode::dynamic;
  Ledger ledger;
  double final_accuracy = 0.0;
  double total_training_wallclock = 0.0;
  std::uint32_t total_upload_count = 0;
  double total_upload_time = 0.0;

  static ModeSummary from_ledger(FusionMode mode, Ledger ledger) {
    ModeSummary m;
    m.mode = mode;
    CompensatedSum wallclock, upload;
    for (const auto& r : ledger) {
      wallclock.add(r.wallclock());
      m.total_upload_count += r.participant_count;
      for (const auto& [id, e] : r.per_client) upload.add(e.upload_transfer_time);
    }
    m.total_training_wallclock = wallclock.value();
    m.total_upload_time = upload.value();
    if (!ledger.empty()) m.final_accuracy = ledger.back().global_acc_after;
    m.ledger = std::move(ledger);
    return m;
  }

  friend bool operator==(const ModeSummary&, const ModeSummary&) = default;
};

struct ComparisonReport {
  std::string scenario;
  std::uint64_t seed = 0;
  ModeSummary dynamic;
  ModeSummary baseline;

  std::int64_t uploads_saved() const {
    return static_cast<std::int64_t>(baseline.total_upload_count) - static_cast<std::int64_t>(dynamic.total_upload_count);
  }
  double upload_time_saved() const { return baseline.total_upload_time - dynamic.total_upload_time; }
  double wallclock_saved() const { return baseline.total_training_wallclock - dynamic.total_training_wallclock; }
  double accuracy_delta() const { return dynamic.final_accuracy - baseline.final_accuracy; }

  // Throws if a total disagrees with its per-round series or dynamic fusion
  // uploaded more than the baseline.
  void check_invariants() const {
    for (const auto* m : {&dynamic, &baseline}) {
      auto again = ModeSummary::from_ledger(m->mode, m->ledger);
      if (!(again == *m)) throw Error("report totals disagree with per-round series in " + scenario);
    }
    if (dynamic.total_upload_count > baseline.total_upload_count) {
      throw Error("dynamic fusion uploaded more than the baseline in " + scenario);
    }
  }

  friend bool operator==(const ComparisonReport&, const ComparisonReport&) = default;
};

inline ModeSummary run_mode(const Scenario& s, const ScenarioData& data, std::uint64_t seed, FusionMode mode) {
  auto job = make_job(s, data.initial_params, mode);
  auto result = run_simulation(job, data.profiles, s.network, data.test_set, seed, sim_options(s));
  return ModeSummary::from_ledger(mode, std::move(result.ledger));
}

inline ModeSummary run_mode(const Scenario& s, std::uint64_t seed, FusionMode mode) {
  return run_mode(s, materialize(s, seed), seed, mode);
}

// Both modes on the same data, initial parameters and seed.
inline ComparisonReport run_comparison(const Scenario& s, std::uint64_t seed) {
  auto data = materialize(s, seed);
  ComparisonReport r;
  r.scenario = s.name;
  r.seed = seed;
  r.dynamic = run_mode(s, data, seed, FusionMode::dynamic);
  r.baseline = run_mode(s, data, seed, FusionMode::baseline);
  r.check_invariants();
  return r;
}

// ---------------------------------------------------------------------------
// CSV
//
// One row per (mode, round, client) and a totals row per mode. A round with
// no clients is written as a single row with an empty client column. Totals
// rows have round "total": upload_transfer_time holds the total upload time,
// wallclock the summed round wall-clock, global_acc the final accuracy and
// participants the upload count.

inline constexpr const char* csv_columns[] = {
    "scenario",   "seed",         "mode",          "round",    "client",    "decision",
    "training_time", "local_acc", "upload_transfer_time", "waiting_time", "started_at", "dispatch_time",
    "deadline",   "closed_at",    "wallclock",     "global_acc", "participants"};
inline constexpr std::size_t csv_column_count = std::size(csv_columns);

inline std::string mode_name(FusionMode m) { return m == FusionMode::dynamic ? "dynamic" : "baseline"; }

inline FusionMode mode_from_name(std::string_view s) {
  if (s == "dynamic") return FusionMode::dynamic;
  if (s == "baseline") return FusionMode::baseline;
  throw ValidationError("unknown mode '" + std::string(s) + "'");
}

inline Decision decision_from_name(std::string_view s) {
  for (auto d : {Decision::uploaded, Decision::skipped, Decision::late}) {
    if (to_string(d) == s) return d;
  }
  throw ValidationError("unknown decision '" + std::string(s) + "'");
}

struct RunTable {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<ModeSummary> runs;
  friend bool operator==(const RunTable&, const RunTable&) = default;
};

inline RunTable to_table(const ComparisonReport& r) { return {r.scenario, r.seed, {r.dynamic, r.baseline}}; }

inline ComparisonReport to_report(const RunTable& t) {
  if (t.runs.size() != 2 || t.runs[0].mode != FusionMode::dynamic || t.runs[1].mode != FusionMode::baseline) {
    throw ValidationError("comparison table needs a dynamic run followed by a baseline run");
  }
  return {t.scenario, t.seed, t.runs[0], t.runs[1]};
}

inline std::string csv_text(const RunTable& t) {
  if (t.scenario.find_first_of(",\"\n\r") != std::string::npos) {
    throw ValidationError("scenario name must not contain CSV delimiters");
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < csv_column_count; ++i) out << (i ? "," : "") << csv_columns[i];
  out << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& run : t.runs) {
    const std::string prefix = t.scenario + "," + std::to_string(t.seed) + "," + mode_name(run.mode) + ",";
    for (const auto& r : run.ledger) {
      auto round_fields = [&] {
        return format_double(r.waiting_time_used) + "," + format_double(r.started_at) + "," +
               format_double(r.dispatch_time) + "," + opt(r.deadline) + "," + format_double(r.closed_at) + "," +
               format_double(r.wallclock()) + "," + format_double(r.global_acc_after) + "," +
               std::to_string(r.participant_count);
      };
      if (r.per_client.empty()) {
        out << prefix << r.round_index << ",,,,,0," << round_fields() << '\n';
      }
      for (const auto& [id, e] : r.per_client) {
        out << prefix << r.round_index << ',' << id << ',' << to_string(e.decision) << ',' << opt(e.training_time)
            << ',' << opt(e.local_acc) << ',' << format_double(e.upload_transfer_time) << ',' << round_fields()
            << '\n';
      }
    }
    out << prefix << "total,,,,," << format_double(run.total_upload_time) << ",,,,,," << format_double(run.total_training_wallclock)
        << ',' << format_double(run.final_accuracy) << ',' << run.total_upload_count << '\n';
  }
  return out.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  f.close();
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed for '" + path.string() + "'");
  return ss.str();
}

inline void export_csv(const RunTable& t, const std::filesystem::path& path) { write_text_file(path, csv_text(t)); }
inline void export_csv(const ComparisonReport& r, const std::filesystem::path& path) { export_csv(to_table(r), path); }

inline RunTable parse_csv_text(std::string_view text, const std::string& source = "csv") {
  RunTable t;
  std::size_t line_no = 0;
  bool header_done = false;
  std::string current_mode;
  auto blank = [](std::string_view s) { return s.empty(); };
  for (auto raw : split(text, '\n')) {
    ++line_no;
    auto line = trim_cr(raw);
    if (line.empty()) continue;
    auto where = source + ":" + std::to_string(line_no);
    auto cells = split(line, ',');
    if (cells.size() != csv_column_count) {
      throw ValidationError(where + ": expected " + std::to_string(csv_column_count) + " columns, got " +
                            std::to_string(cells.size()));
    }
    if (!header_done) {
      for (std::size_t i = 0; i < csv_column_count; ++i) {
        if (cells[i] != csv_columns[i]) throw ValidationError(where + ": unexpected header '" + std::string(cells[i]) + "'");
      }
      header_done = true;
      continue;
    }
    try {
      auto seed = static_cast<std::uint64_t>(parse_int(cells[1], "seed"));
      if (t.runs.empty() && current_mode.empty()) {
        t.scenario = std::string(cells[0]);
        t.seed = seed;
      } else if (t.scenario != cells[0] || t.seed != seed) {
        throw ValidationError("rows from more than one run");
      }
      auto mode = mode_from_name(cells[2]);
      if (current_mode.empty()) {
        t.runs.push_back(ModeSummary{});
        t.runs.back().mode = mode;
        current_mode = std::string(cells[2]);
      } else if (current_mode != cells[2]) {
        throw ValidationError("mode changed before its totals row");
      }
      auto& run = t.runs.back();
      auto opt = [&](std::string_view s, const char* what) -> std::optional<double> {
        if (blank(s)) return std::nullopt;
        return parse_double(s, what);
      };
      if (cells[3] == "total") {
        auto parsed = ModeSummary::from_ledger(run.mode, run.ledger);
        if (parsed.total_upload_time != parse_double(cells[8], "upload_transfer_time") ||
            parsed.total_training_wallclock != parse_double(cells[14], "wallclock") ||
            parsed.final_accuracy != parse_double(cells[15], "global_acc") ||
            parsed.total_upload_count != static_cast<std::uint32_t>(parse_int(cells[16], "participants"))) {
          throw ValidationError("totals row disagrees with round rows");
        }
        run = std::move(parsed);
        current_mode.clear();
        continue;
      }
      auto round = static_cast<std::uint32_t>(parse_int(cells[3], "round"));
      if (run.ledger.empty() || run.ledger.back().round_index != round) {
        RoundRecord r;
        r.round_index = round;
        r.waiting_time_used = parse_double(cells[9], "waiting_time");
        r.started_at = parse_double(cells[10], "started_at");
        r.dispatch_time = parse_double(cells[11], "dispatch_time");
        r.deadline = opt(cells[12], "deadline");
        r.closed_at = parse_double(cells[13], "closed_at");
        r.global_acc_after = parse_double(cells[15], "global_acc");
        r.participant_count = static_cast<std::uint32_t>(parse_int(cells[16], "participants"));
        run.ledger.push_back(std::move(r));
      }
      if (!blank(cells[4])) {
        ClientRoundEntry e;
        e.decision = decision_from_name(cells[5]);
        e.training_time = opt(cells[6], "training_time");
        e.local_acc = opt(cells[7], "local_acc");
        e.upload_transfer_time = parse_double(cells[8], "upload_transfer_time");
        run.ledger.back().per_client[static_cast<ClientId>(parse_int(cells[4], "client"))] = e;
      }
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  if (!header_done) throw ValidationError(source + ": missing header row");
  if (!current_mode.empty()) throw ValidationError(source + ": missing totals row for mode " + current_mode);
  return t;
}

inline RunTable parse_csv(const std::filesystem::path& path) {
  return parse_csv_text(read_text_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Scenario files

inline constexpr int scenario_schema_version = 1;

namespace config {

inline const Json* find(const Json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline void only_keys(const Json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* key) { return k == key; }) == keys.end()) {
      throw ConfigError(path + "." + k + ": unknown field");
    }
  }
}

inline double number(const Json& obj, const std::string& path, const char* key, double fallback) {
  const Json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) throw ConfigError(path + "." + key + ": expected a number");
  return v->get<double>();
}

inline std::uint64_t count(const Json& obj, const std::string& path, const char* key, std::uint64_t fallback) {
  const Json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_unsigned()) throw ConfigError(path + "." + key + ": expected a nonnegative integer");
  return v->get<std::uint64_t>();
}

inline std::string text(const Json& obj, const std::string& path, const char* key, std::string fallback) {
  const Json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) throw ConfigError(path + "." + key + ": expected a string");
  return v->get<std::string>();
}

inline bool flag(const Json& obj, const std::string& path, const char* key, bool fallback) {
  const Json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) throw ConfigError(path + "." + key + ": expected true or false");
  return v->get<bool>();
}

template <typename E, std::size_t N>
E choice(const Json& obj, const std::string& path, const char* key, E fallback, const codec::EnumName<E> (&table)[N]) {
  const Json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) throw ConfigError(path + "." + key + ": expected a string");
  try {
    return codec::enum_value(v->get<std::string>(), table, path + "." + key);
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  }
}

inline const codec::EnumName<AccuracySource> accuracy_sources[] = {{AccuracySource::training_set, "training_set"},
                                                                   {AccuracySource::holdout, "holdout"}};

inline std::vector<double> numbers(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

inline Json part_to_json(const DataPart& p) {
  return Json{{"n_samples", p.n_samples}, {"class_ratios", p.class_ratios}, {"modality", p.modality}};
}

inline DataPart part_from_json(const Json& j, const std::string& path) {
  only_keys(j, path, {"n_samples", "class_ratios", "modality"});
  DataPart p;
  p.n_samples = count(j, path, "n_samples", 0);
  const Json* r = find(j, "class_ratios");
  if (!r) throw ConfigError(path + ".class_ratios: required");
  p.class_ratios = numbers(*r, path + ".class_ratios");
  p.modality = count(j, path, "modality", 0);
  return p;
}

inline std::vector<DataPart> parts_from_json(const Json* j, const std::string& path) {
  if (!j) throw ConfigError(path + ": required");
  if (!j->is_array()) throw ConfigError(path + ": expected an array");
  std::vector<DataPart> out;
  for (std::size_t i = 0; i < j->size(); ++i) out.push_back(part_from_json((*j)[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace config

inline Json scenario_to_json(const Scenario& s) {
  Json clients = Json::array();
  for (const auto& c : s.clients) {
    Json parts = Json::array();
    for (const auto& p : c.parts) parts.push_back(config::part_to_json(p));
    Json jc{{"parts", parts},
            {"compute",
             {{"seconds_per_epoch_per_ksample", c.compute.seconds_per_epoch_per_ksample},
              {"jitter_fraction", c.compute.jitter_fraction}}}};
    if (c.corruption) {
      jc["corruption"] = {
          {"source", c.corruption->source}, {"target", c.corruption->target}, {"fraction", c.corruption->fraction}};
    }
    clients.push_back(jc);
  }
  Json test = Json::array();
  for (const auto& p : s.test_parts) test.push_back(config::part_to_json(p));
  return Json{{"schema_version", scenario_schema_version},
              {"name", s.name},
              {"clients", clients},
              {"test_parts", test},
              {"n_features", s.n_features},
              {"class_count", s.class_count},
              {"separation", s.separation},
              {"modality_offsets", s.modality_offsets},
              {"payload_bytes", s.payload_bytes},
              {"network", {{"bandwidth", s.network.bandwidth}, {"latency", s.network.latency}}},
              {"rounds", s.rounds},
              {"trainer", to_json(s.trainer)},
              {"initial_waiting_time", s.initial_waiting_time},
              {"policy", to_json(s.policy)},
              {"dispatch", codec::enum_name(s.dispatch, codec::dispatch_scopes)},
              {"aggregation_weighting", codec::enum_name(s.weighting, codec::weightings)},
              {"accuracy_source", codec::enum_name(s.accuracy_source, config::accuracy_sources)},
              {"holdout_fraction", s.holdout_fraction},
              {"seeds", s.seeds}};
}

// Missing optional fields take the defaults of a default-constructed Scenario.
inline Scenario scenario_from_json(const Json& j) {
  using namespace config;
  const std::string root = "scenario";
  only_keys(j, root,
            {"schema_version", "name", "clients", "test_parts", "n_features", "class_count", "separation",
             "modality_offsets", "payload_bytes", "network", "rounds", "trainer", "initial_waiting_time", "policy",
             "dispatch", "aggregation_weighting", "accuracy_source", "holdout_fraction", "seeds"});
  const Json* version = find(j, "schema_version");
  if (!version) throw ConfigError(root + ".schema_version: required");
  if (!version->is_number_integer() || version->get<int>() != scenario_schema_version) {
    throw ConfigError(root + ".schema_version: unsupported version " + version->dump());
  }
  Scenario s;
  s.name = text(j, root, "name", "");
  if (s.name.empty()) throw ConfigError(root + ".name: required");
  const Json* clients = find(j, "clients");
  if (!clients || !clients->is_array()) throw ConfigError(root + ".clients: required array");
  for (std::size_t i = 0; i < clients->size(); ++i) {
    const auto& jc = (*clients)[i];
    std::string path = root + ".clients[" + std::to_string(i) + "]";
    only_keys(jc, path, {"parts", "corruption", "compute"});
    ClientSpec c;
    c.parts = parts_from_json(find(jc, "parts"), path + ".parts");
    if (const Json* k = find(jc, "corruption")) {
      std::string kp = path + ".corruption";
      only_keys(*k, kp, {"source", "target", "fraction"});
      c.corruption = LabelCorruption{count(*k, kp, "source", 1), count(*k, kp, "target", 0),
                                     number(*k, kp, "fraction", 1.0)};
    }
    if (const Json* k = find(jc, "compute")) {
      std::string kp = path + ".compute";
      only_keys(*k, kp, {"seconds_per_epoch_per_ksample", "jitter_fraction"});
      c.compute.seconds_per_epoch_per_ksample =
          number(*k, kp, "seconds_per_epoch_per_ksample", c.compute.seconds_per_epoch_per_ksample);
      c.compute.jitter_fraction = number(*k, kp, "jitter_fraction", c.compute.jitter_fraction);
    }
    s.clients.push_back(std::move(c));
  }
  s.test_parts = parts_from_json(find(j, "test_parts"), root + ".test_parts");
  s.n_features = count(j, root, "n_features", s.n_features);
  s.class_count = count(j, root, "class_count", s.class_count);
  s.separation = number(j, root, "separation", s.separation);
  if (const Json* m = find(j, "modality_offsets")) {
    if (!m->is_array()) throw ConfigError(root + ".modality_offsets: expected an array");
    s.modality_offsets.clear();
    for (std::size_t i = 0; i < m->size(); ++i) {
      if (!(*m)[i].is_number_unsigned()) {
        throw ConfigError(root + ".modality_offsets[" + std::to_string(i) + "]: expected a nonnegative integer");
      }
      s.modality_offsets.push_back((*m)[i].get<std::size_t>());
    }
  }
  s.payload_bytes = count(j, root, "payload_bytes", s.payload_bytes);
  if (const Json* n = find(j, "network")) {
    only_keys(*n, root + ".network", {"bandwidth", "latency"});
    s.network.bandwidth = number(*n, root + ".network", "bandwidth", s.network.bandwidth);
    s.network.latency = number(*n, root + ".network", "latency", s.network.latency);
  }
  auto rounds = count(j, root, "rounds", s.rounds);
  if (rounds > 1'000'000) throw ConfigError(root + ".rounds: too large");
  s.rounds = static_cast<std::uint32_t>(rounds);
  if (const Json* t = find(j, "trainer")) {
    std::string tp = root + ".trainer";
    only_keys(*t, tp, {"model_kind", "hidden_width", "learning_rate", "batch_size", "epochs"});
    s.trainer.model_kind = choice(*t, tp, "model_kind", s.trainer.model_kind, codec::model_kinds);
    s.trainer.hidden_width = count(*t, tp, "hidden_width", s.trainer.hidden_width);
    s.trainer.learning_rate = number(*t, tp, "learning_rate", s.trainer.learning_rate);
    s.trainer.batch_size = count(*t, tp, "batch_size", s.trainer.batch_size);
    s.trainer.epochs = count(*t, tp, "epochs", s.trainer.epochs);
  }
  s.initial_waiting_time = number(j, root, "initial_waiting_time", s.initial_waiting_time);
  if (const Json* p = find(j, "policy")) {
    std::string pp = root + ".policy";
    only_keys(*p, pp, {"kind", "first_round_uploads"});
    s.policy.kind = choice(*p, pp, "kind", s.policy.kind, codec::policy_kinds);
    s.policy.first_round_uploads = flag(*p, pp, "first_round_uploads", s.policy.first_round_uploads);
  }
  s.dispatch = choice(j, root, "dispatch", s.dispatch, codec::dispatch_scopes);
  s.weighting = choice(j, root, "aggregation_weighting", s.weighting, codec::weightings);
  s.accuracy_source = choice(j, root, "accuracy_source", s.accuracy_source, accuracy_sources);
  s.holdout_fraction = number(j, root, "holdout_fraction", s.holdout_fraction);
  if (const Json* seeds = find(j, "seeds")) {
    if (!seeds->is_array()) throw ConfigError(root + ".seeds: expected an array");
    for (std::size_t i = 0; i < seeds->size(); ++i) {
      if (!(*seeds)[i].is_number_unsigned()) {
        throw ConfigError(root + ".seeds[" + std::to_string(i) + "]: expected a nonnegative integer");
      }
      s.seeds.push_back((*seeds)[i].get<std::uint64_t>());
    }
  }
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  auto text = read_text_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON: " + e.what());
  }
  try {
    return scenario_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void save_scenario(const Scenario& s, const std::filesystem::path& path) {
  write_text_file(path, scenario_to_json(s).dump(2) + "\n");
}

}  // namespace dffl
