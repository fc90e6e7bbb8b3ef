#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dffl/error.hpp"
#include "dffl/message.hpp"
#include "dffl/model.hpp"
#include "dffl/rng.hpp"

namespace dffl {

enum class GateOutcome { upload, skip };
enum class Decision { uploaded, skipped, late };

inline std::string_view to_string(Decision d) {
  switch (d) {
    case Decision::uploaded: return "uploaded";
    case Decision::skipped: return "skipped";
    case Decision::late: return "late";
  }
  return "?";
}

// global_max: reference is the server MaxAcc. local_improvement: reference is
// the client's previous local accuracy. Both gates are inclusive.
inline GateOutcome decide_participation(const ParticipationPolicy& policy, double local_acc,
                                        std::optional<double> reference_acc) {
  if (!reference_acc) return policy.first_round_uploads ? GateOutcome::upload : GateOutcome::skip;
  return local_acc >= *reference_acc ? GateOutcome::upload : GateOutcome::skip;
}

// Mean of the previous round's reported training times; `fallback` (the
// waiting time used last round) when nothing was reported.
inline double update_waiting_time(std::span<const double> previous_round_training_times,
                                  double fallback) {
  if (previous_round_training_times.empty()) return fallback;
  double sum = 0.0;
  for (double t : previous_round_training_times) {
    if (!(t > 0.0)) throw ValidationError("update_waiting_time: training times must be > 0");
    sum += t;
  }
  return sum / static_cast<double>(previous_round_training_times.size());
}

inline double update_waiting_time(const std::vector<double>& times, double fallback) {
  return update_waiting_time(std::span<const double>(times), fallback);
}

// Neumaier-compensated running sum. Totals of equal per-upload times then
// agree with count * time.
class CompensatedSum {
 public:
  void add(double x) {
    double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

struct ClientRoundEntry {
  std::optional<double> training_time;
  std::optional<double> local_acc;
  Decision decision = Decision::late;
  double upload_transfer_time = 0.0;
  friend bool operator==(const ClientRoundEntry&, const ClientRoundEntry&) = default;
};

struct RoundRecord {
  std::uint32_t round_index = 0;
  double waiting_time_used = 0.0;  // 0 for baseline rounds, which have no deadline
  double started_at = 0.0;
  double dispatch_time = 0.0;
  std::optional<double> deadline;
  double closed_at = 0.0;
  std::map<ClientId, ClientRoundEntry> per_client;
  double global_acc_after = 0.0;
  std::uint32_t participant_count = 0;

  double wallclock() const { return closed_at - started_at; }

  double upload_time() const {
    CompensatedSum total;
    for (const auto& [id, e] : per_client) total.add(e.upload_transfer_time);
    return total.value();
  }

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

using Ledger = std::vector<RoundRecord>;
using DecisionTrace = std::vector<std::map<ClientId, Decision>>;

inline DecisionTrace decision_trace(const Ledger& ledger) {
  DecisionTrace out;
  for (const auto& r : ledger) {
    auto& row = out.emplace_back();
    for (const auto& [id, e] : r.per_client) row[id] = e.decision;
  }
  return out;
}

inline std::uint32_t total_uploads(const Ledger& ledger) {
  std::uint32_t n = 0;
  for (const auto& r : ledger) n += r.participant_count;
  return n;
}

// ---------------------------------------------------------------------------
// Server round bookkeeping

struct ReceivedModel {
  ParameterVector params;
  double weight = 1.0;
  double local_acc = 0.0;
  double arrived_at = 0.0;
};

struct SkipReceipt {
  double local_acc = 0.0;
  double arrived_at = 0.0;
};

struct ServerRoundState {
  std::uint32_t round_index = 1;
  double waiting_time = 0.0;
  double opened_at = 0.0;
  double dispatch_allowance = 0.0;
  std::optional<double> deadline;  // absent in baseline mode
  double max_acc = 0.0;
  std::set<ClientId> expected;
  std::map<ClientId, double> reported_training_times;
  std::map<ClientId, ReceivedModel> received_models;
  std::map<ClientId, SkipReceipt> skips;
  std::map<ClientId, Decision> decisions;

  bool answered(ClientId c) const { return received_models.count(c) || skips.count(c); }

  bool all_answered(const std::set<ClientId>& gone) const {
    bool any = false;
    for (ClientId c : expected) {
      if (gone.count(c)) continue;
      if (!answered(c)) return false;
      any = true;
    }
    return any;
  }
};

struct RoundOutcome {
  std::set<ClientId> participants;
  std::set<ClientId> excluded_late;
  std::set<ClientId> skipped;
};

// Counts uploads and skip notices that arrived no later than the deadline
// (inclusive); every other expected client is late. Models from late
// clients are dropped so received_models matches the uploaded decisions.
// Closing before the deadline is only legal once every live client answered.
inline RoundOutcome close_round(ServerRoundState& state, double now,
                                const std::set<ClientId>& disconnected = {}) {
  bool before_deadline = !state.deadline || now < *state.deadline;
  if (before_deadline && !state.all_answered(disconnected)) {
    throw ProtocolError("close_round: round " + std::to_string(state.round_index) +
                        " closed before its deadline with clients outstanding");
  }
  auto on_time = [&](double t) { return !state.deadline || t <= *state.deadline; };
  RoundOutcome out;
  for (ClientId c : state.expected) {
    if (auto it = state.received_models.find(c); it != state.received_models.end() && on_time(it->second.arrived_at)) {
      out.participants.insert(c);
      state.decisions[c] = Decision::uploaded;
    } else if (auto s = state.skips.find(c); s != state.skips.end() && on_time(s->second.arrived_at)) {
      out.skipped.insert(c);
      state.decisions[c] = Decision::skipped;
    } else {
      out.excluded_late.insert(c);
      state.decisions[c] = Decision::late;
    }
  }
  std::erase_if(state.received_models, [&](const auto& kv) { return !out.participants.count(kv.first); });
  return out;
}

// ---------------------------------------------------------------------------
// Server state machine

// Durations the server charges when it opens a round: the time to deliver the
// global model (or job) versus a bare control notice, and the transfer time
// recorded for each accepted upload.
struct ServerTimings {
  double model_dispatch_time = 0.0;
  double notice_dispatch_time = 0.0;
  double upload_transfer_time = 0.0;
};

struct ServerTimer {
  std::uint32_t round = 0;
  std::uint64_t generation = 0;
  friend bool operator==(const ServerTimer&, const ServerTimer&) = default;
};

struct Outbound {
  ClientId to = 0;
  Message message;
};

struct ServerOutput {
  std::vector<Outbound> messages;
  std::optional<std::pair<double, ServerTimer>> arm_timer;
  std::vector<std::string> warnings;
  bool finished = false;
};

// Accuracy of a global model; round 0 is the untrained initial model.
using Evaluator = std::function<double(const ParameterVector&, std::uint32_t round)>;

// Transition function of the central server. Every effect (messages, timer
// requests, warnings) is returned to the caller; the caller owns delivery and
// time. Rejected messages throw ProtocolError and leave the state untouched.
class FusionServer {
 public:
  FusionServer(Job job, ServerTimings timings, std::size_t expected_clients, Evaluator evaluator)
      : job_(std::move(job)),
        timings_(timings),
        expected_clients_(expected_clients),
        evaluator_(std::move(evaluator)),
        global_(job_.initial_params) {
    job_.validate();
    if (!evaluator_) throw ValidationError("FusionServer: evaluator required");
  }

  ServerOutput start(double now) {
    if (started_) throw ProtocolError("FusionServer: already started");
    started_ = true;
    max_acc_ = evaluator_(global_, 0);
    ServerOutput out;
    open_round(1, now, timings_.model_dispatch_time, job_.initial_waiting_time, out);
    return out;
  }

  ServerOutput handle(const Message& m, double now) {
    ServerOutput out;
    if (!started_) throw ProtocolError("FusionServer: message before start");
    validate_message(m);
    if (finished_) {
      out.warnings.push_back("discarding " + std::string(to_string(m.kind)) + " after shutdown");
      return out;
    }
    if (m.kind == MessageKind::DownloadJob) return on_download(m, now);
    if (!registered_.count(m.client)) {
      throw ProtocolError(std::string(to_string(m.kind)) + " from unknown client " + std::to_string(m.client));
    }
    if (disconnected_.count(m.client)) {
      out.warnings.push_back("discarding message from disconnected client " + std::to_string(m.client));
      return out;
    }
    if (!client_may_send(m.kind)) {
      throw ProtocolError("client " + std::to_string(m.client) + " sent server-only message " +
                          std::string(to_string(m.kind)));
    }

    const std::uint32_t r = *m.round;
    const std::uint32_t cur = round_.round_index;
    if (r == cur) return on_current(m, now);
    if (r == cur + 1) return on_next(m);
    if (r + 1 == cur && m.kind == MessageKind::ReportTrainingTime) return on_late_report(m, now);
    if (r > cur + 1) {
      throw ProtocolError("client " + std::to_string(m.client) + " is ahead: round " + std::to_string(r) +
                          " while server is in round " + std::to_string(cur));
    }
    out.warnings.push_back("discarding " + std::string(to_string(m.kind)) + " for closed round " +
                           std::to_string(r) + " from client " + std::to_string(m.client));
    return out;
  }

  ServerOutput on_timer(const ServerTimer& timer, double now) {
    ServerOutput out;
    if (finished_ || timer.round != round_.round_index || timer.generation != generation_) return out;
    if (round_.deadline && now < *round_.deadline) return out;
    close(now, out);
    return out;
  }

  // A lost client is late for the open round and dropped from later rounds.
  ServerOutput on_disconnect(ClientId c, double now) {
    ServerOutput out;
    if (finished_ || !registered_.count(c) || disconnected_.count(c)) return out;
    disconnected_.insert(c);
    deferred_requests_.erase(c);
    out.warnings.push_back("client " + std::to_string(c) + " disconnected in round " +
                           std::to_string(round_.round_index));
    maybe_close_early(now, out);
    return out;
  }

  bool finished() const { return finished_; }
  const Ledger& ledger() const { return ledger_; }
  const ServerRoundState& round_state() const { return round_; }
  const ParameterVector& global_model() const { return global_; }
  double max_acc() const { return max_acc_; }
  const Job& job() const { return job_; }
  const std::set<ClientId>& registered() const { return registered_; }

 private:
  static bool client_may_send(MessageKind k) {
    return k == MessageKind::ReportTrainingTime || k == MessageKind::RequestMaxAcc ||
           k == MessageKind::UploadModel || k == MessageKind::SkipNotice;
  }

  bool dynamic() const { return job_.mode == FusionMode::dynamic; }

  std::set<ClientId> active() const {
    std::set<ClientId> a;
    for (ClientId c : registered_) {
      if (!disconnected_.count(c)) a.insert(c);
    }
    return a;
  }

  ServerOutput on_download(const Message& m, double now) {
    ServerOutput out;
    if (round_.round_index > 1 || ledger_.size() > 0 ||
        (expected_clients_ > 0 && registered_.size() >= expected_clients_)) {
      out.warnings.push_back("refusing job download: job already under way or full");
      out.messages.push_back({m.client, make_message(MessageKind::Shutdown, std::nullopt, m.client)});
      return out;
    }
    ClientId id = m.client;
    while (registered_.count(id)) ++id;
    registered_.insert(id);
    round_.expected.insert(id);
    out.messages.push_back({id, make_message(MessageKind::JobPayload, std::nullopt, id, job_)});
    (void)now;
    return out;
  }

  ServerOutput on_current(const Message& m, double now) {
    ServerOutput out;
    const ClientId c = m.client;
    switch (m.kind) {
      case MessageKind::ReportTrainingTime: {
        double t = std::get<TrainingTime>(m.body).seconds;
        if (!(t > 0.0)) throw ProtocolError("training time must be > 0");
        if (!round_.reported_training_times.emplace(c, t).second) {
          out.warnings.push_back("duplicate training time from client " + std::to_string(c));
        }
        break;
      }
      case MessageKind::RequestMaxAcc:
        out.messages.push_back({c, make_message(MessageKind::MaxAccReply, round_.round_index, c, Accuracy{max_acc_})});
        break;
      case MessageKind::UploadModel: {
        if (round_.answered(c)) {
          throw ProtocolError("duplicate answer from client " + std::to_string(c) + " in round " +
                              std::to_string(round_.round_index));
        }
        const auto& up = std::get<ModelUpload>(m.body);
        if (!up.params.same_layout(global_) || up.params.payload_bytes() != global_.payload_bytes()) {
          throw ProtocolError("upload from client " + std::to_string(c) + " has the wrong model layout");
        }
        round_.received_models[c] = ReceivedModel{up.params, up.weight, up.local_acc, now};
        maybe_close_early(now, out);
        break;
      }
      case MessageKind::SkipNotice: {
        if (round_.answered(c)) {
          throw ProtocolError("duplicate answer from client " + std::to_string(c) + " in round " +
                              std::to_string(round_.round_index));
        }
        round_.skips[c] = SkipReceipt{std::get<Accuracy>(m.body).value, now};
        maybe_close_early(now, out);
        break;
      }
      default:
        break;
    }
    return out;
  }

  // A client that skipped moves straight on; its next-round report is kept
  // and its MaxAcc request is answered once the round opens.
  ServerOutput on_next(const Message& m) {
    ServerOutput out;
    if (m.kind == MessageKind::ReportTrainingTime) {
      double t = std::get<TrainingTime>(m.body).seconds;
      if (!(t > 0.0)) throw ProtocolError("training time must be > 0");
      next_reports_.emplace(m.client, t);
    } else if (m.kind == MessageKind::RequestMaxAcc) {
      deferred_requests_.insert(m.client);
    } else {
      throw ProtocolError(std::string(to_string(m.kind)) + " for round " + std::to_string(*m.round) +
                          " before it opened");
    }
    return out;
  }

  // Training time of a client that missed the previous round. It still
  // counts toward the waiting time of the round now open.
  ServerOutput on_late_report(const Message& m, double now) {
    ServerOutput out;
    double t = std::get<TrainingTime>(m.body).seconds;
    if (!(t > 0.0)) throw ProtocolError("training time must be > 0");
    if (!previous_reports_.emplace(m.client, t).second) return out;
    if (!ledger_.empty()) {
      auto& entry = ledger_.back().per_client[m.client];
      if (!entry.training_time) entry.training_time = t;
    }
    if (dynamic()) {
      round_.waiting_time = waiting_time_from(previous_reports_, fallback_waiting_);
      round_.deadline = round_.opened_at + round_.dispatch_allowance + round_.waiting_time;
      arm(std::max(now, *round_.deadline), out);
    }
    return out;
  }

  static double waiting_time_from(const std::map<ClientId, double>& reports, double fallback) {
    std::vector<double> times;
    for (const auto& [id, t] : reports) times.push_back(t);
    return update_waiting_time(times, fallback);
  }

  void arm(double at, ServerOutput& out) {
    ++generation_;
    out.arm_timer = std::make_pair(at, ServerTimer{round_.round_index, generation_});
  }

  void open_round(std::uint32_t index, double now, double allowance, double waiting, ServerOutput& out) {
    ServerRoundState next;
    next.round_index = index;
    next.opened_at = now;
    next.dispatch_allowance = allowance;
    next.max_acc = max_acc_;
    next.expected = active();
    next.reported_training_times = std::move(next_reports_);
    next_reports_.clear();
    if (dynamic()) {
      next.waiting_time = waiting;
      next.deadline = now + allowance + waiting;
    }
    round_ = std::move(next);
    if (round_.deadline) arm(*round_.deadline, out);
    for (ClientId c : deferred_requests_) {
      out.messages.push_back({c, make_message(MessageKind::MaxAccReply, index, c, Accuracy{max_acc_})});
    }
    deferred_requests_.clear();
  }

  void maybe_close_early(double now, ServerOutput& out) {
    if (round_.round_index == 1 && registered_.size() < expected_clients_) return;
    if (round_.all_answered(disconnected_)) close(now, out);
  }

  void close(double now, ServerOutput& out) {
    auto outcome = close_round(round_, now, disconnected_);

    if (!outcome.participants.empty()) {
      std::vector<std::pair<ParameterVector, double>> updates;
      for (ClientId c : outcome.participants) {
        const auto& rm = round_.received_models.at(c);
        double w = job_.aggregation_weighting == AggregationWeighting::uniform ? 1.0 : rm.weight;
        updates.emplace_back(rm.params, w);
      }
      global_ = aggregate(updates);
    }
    max_acc_ = evaluator_(global_, round_.round_index);

    RoundRecord rec;
    rec.round_index = round_.round_index;
    rec.waiting_time_used = round_.waiting_time;
    rec.started_at = round_.opened_at;
    rec.dispatch_time = round_.dispatch_allowance;
    rec.deadline = round_.deadline;
    rec.closed_at = now;
    rec.global_acc_after = max_acc_;
    rec.participant_count = static_cast<std::uint32_t>(outcome.participants.size());
    for (const auto& [c, d] : round_.decisions) {
      ClientRoundEntry e;
      e.decision = d;
      if (auto it = round_.reported_training_times.find(c); it != round_.reported_training_times.end()) {
        e.training_time = it->second;
      }
      if (auto it = round_.received_models.find(c); it != round_.received_models.end()) {
        e.local_acc = it->second.local_acc;
      } else if (auto s = round_.skips.find(c); s != round_.skips.end() && d == Decision::skipped) {
        e.local_acc = s->second.local_acc;
      }
      if (d == Decision::uploaded) e.upload_transfer_time = timings_.upload_transfer_time;
      rec.per_client[c] = e;
    }
    ledger_.push_back(std::move(rec));

    bool model_sent = false;
    for (ClientId c : active()) {
      bool gets_model = !dynamic() || job_.dispatch == DispatchScope::all_clients || outcome.participants.count(c);
      if (gets_model) {
        out.messages.push_back({c, make_message(MessageKind::GlobalModel, round_.round_index, c, global_)});
        model_sent = true;
      } else {
        out.messages.push_back({c, make_message(MessageKind::RoundClosed, round_.round_index, c)});
      }
    }

    if (round_.round_index >= job_.fusion_times) {
      for (ClientId c : active()) out.messages.push_back({c, make_message(MessageKind::Shutdown, std::nullopt, c)});
      finished_ = true;
      out.finished = true;
      return;
    }

    previous_reports_ = round_.reported_training_times;
    fallback_waiting_ = round_.waiting_time;
    double waiting = dynamic() ? waiting_time_from(previous_reports_, fallback_waiting_) : 0.0;
    double allowance = model_sent ? timings_.model_dispatch_time : timings_.notice_dispatch_time;
    open_round(round_.round_index + 1, now, allowance, waiting, out);
  }

  Job job_;
  ServerTimings timings_;
  std::size_t expected_clients_;
  Evaluator evaluator_;

  ParameterVector global_;
  double max_acc_ = 0.0;
  bool started_ = false;
  bool finished_ = false;
  std::uint64_t generation_ = 0;

  std::set<ClientId> registered_;
  std::set<ClientId> disconnected_;
  ServerRoundState round_;
  std::map<ClientId, double> next_reports_;
  std::map<ClientId, double> previous_reports_;
  double fallback_waiting_ = 0.0;
  std::set<ClientId> deferred_requests_;
  Ledger ledger_;
};

// ---------------------------------------------------------------------------
// Client state machine

enum class ClientPhase { idle, training, deciding, awaiting_global, done };

struct ClientState {
  ClientId client_id = 0;
  std::uint32_t fed_step = 0;
  ParameterVector current_params;
  std::optional<double> last_local_acc;
  ClientPhase phase = ClientPhase::idle;
};

// Request to the driver: train `start_params` for round `round`, then report
// the result via set_training_result and, once the modelled training time
// has elapsed, on_training_finished.
struct BeginTraining {
  std::uint32_t round = 0;
  ParameterVector start_params;
};

struct ClientOutput {
  std::vector<Message> messages;
  std::optional<BeginTraining> train;
  std::vector<std::string> warnings;
  bool done = false;
};

class FusionClient {
 public:
  FusionClient(ClientId requested_id, double weight) : weight_(weight) { state_.client_id = requested_id; }

  ClientOutput start() const {
    ClientOutput out;
    out.messages.push_back(make_message(MessageKind::DownloadJob, std::nullopt, state_.client_id));
    return out;
  }

  void set_training_result(std::uint32_t round, TrainResult result, double training_time) {
    if (state_.phase != ClientPhase::training || round != current_round()) {
      throw ProtocolError("set_training_result: client is not training round " + std::to_string(round));
    }
    pending_ = Pending{std::move(result), training_time};
  }

  ClientOutput on_training_finished(std::uint32_t round) {
    ClientOutput out;
    if (state_.phase != ClientPhase::training || round != current_round() || !pending_) {
      out.warnings.push_back("stale training completion for round " + std::to_string(round));
      return out;
    }
    state_.phase = ClientPhase::deciding;
    out.messages.push_back(make_message(MessageKind::ReportTrainingTime, round, state_.client_id,
                                        TrainingTime{pending_->training_time}));
    out.messages.push_back(make_message(MessageKind::RequestMaxAcc, round, state_.client_id));
    return out;
  }

  ClientOutput handle(const Message& m) {
    validate_message(m);
    ClientOutput out;
    if (m.kind == MessageKind::Shutdown) {
      state_.phase = ClientPhase::done;
      out.done = true;
      return out;
    }
    if (m.kind == MessageKind::JobPayload) {
      if (state_.phase != ClientPhase::idle) throw ProtocolError("JobPayload outside idle phase");
      job_ = std::get<Job>(m.body);
      state_.client_id = m.client;
      state_.current_params = job_->initial_params;
      begin(out);
      return out;
    }
    if (state_.phase == ClientPhase::done) {
      out.warnings.push_back("ignoring " + std::string(to_string(m.kind)) + " after completion");
      return out;
    }
    if (state_.phase == ClientPhase::idle || !m.round) {
      throw ProtocolError(std::string(to_string(m.kind)) + " before the job was received");
    }
    const std::uint32_t r = *m.round;
    if (r < current_round()) {
      out.warnings.push_back("ignoring " + std::string(to_string(m.kind)) + " for past round " + std::to_string(r));
      return out;
    }
    if (r > current_round()) {
      throw ProtocolError(std::string(to_string(m.kind)) + " for future round " + std::to_string(r));
    }

    switch (m.kind) {
      case MessageKind::MaxAccReply:
        if (state_.phase != ClientPhase::deciding) {
          throw ProtocolError("MaxAccReply outside deciding phase");
        }
        decide(std::get<Accuracy>(m.body).value, out);
        break;
      case MessageKind::GlobalModel:
        if (state_.phase == ClientPhase::training) preempt(out);
        state_.current_params = std::get<ParameterVector>(m.body);
        pending_.reset();
        advance(out);
        break;
      case MessageKind::RoundClosed:
        if (state_.phase == ClientPhase::training) {
          preempt(out);
        } else if (state_.phase == ClientPhase::deciding && pending_) {
          // Trained but undecided when the round closed: the local model persists.
          state_.current_params = pending_->result.params;
          state_.last_local_acc = pending_->result.local_accuracy;
        }
        pending_.reset();
        advance(out);
        break;
      default:
        throw ProtocolError("client received client-only message " + std::string(to_string(m.kind)));
    }
    return out;
  }

  const ClientState& state() const { return state_; }
  const std::optional<Job>& job() const { return job_; }
  std::uint32_t current_round() const { return state_.fed_step + 1; }

 private:
  struct Pending {
    TrainResult result;
    double training_time = 0.0;
  };

  void begin(ClientOutput& out) {
    state_.phase = ClientPhase::training;
    pending_.reset();
    out.train = BeginTraining{current_round(), state_.current_params};
  }

  void advance(ClientOutput& out) {
    ++state_.fed_step;
    if (state_.fed_step >= job_->fusion_times) {
      state_.phase = ClientPhase::done;
      out.done = true;
      return;
    }
    begin(out);
  }

  // Cut off by the deadline: report the time the round's training needs and
  // restart from the pre-round parameters.
  void preempt(ClientOutput& out) {
    if (pending_) {
      out.messages.push_back(make_message(MessageKind::ReportTrainingTime, current_round(), state_.client_id,
                                          TrainingTime{pending_->training_time}));
    }
  }

  void decide(double max_acc, ClientOutput& out) {
    if (!pending_) throw ProtocolError("deciding without a training result");
    const double acc = pending_->result.local_accuracy;
    GateOutcome gate = GateOutcome::upload;
    if (job_->mode == FusionMode::dynamic) {
      std::optional<double> reference =
          job_->policy.kind == PolicyKind::global_max ? std::optional<double>(max_acc) : state_.last_local_acc;
      gate = decide_participation(job_->policy, acc, reference);
    }
    state_.current_params = pending_->result.params;
    state_.last_local_acc = acc;
    const std::uint32_t r = current_round();
    if (gate == GateOutcome::upload) {
      out.messages.push_back(make_message(MessageKind::UploadModel, r, state_.client_id,
                                          ModelUpload{state_.current_params, weight_, acc}));
      state_.phase = ClientPhase::awaiting_global;
      pending_.reset();
      return;
    }
    out.messages.push_back(make_message(MessageKind::SkipNotice, r, state_.client_id, Accuracy{acc}));
    pending_.reset();
    if (job_->dispatch == DispatchScope::participants_only) {
      advance(out);
    } else {
      state_.phase = ClientPhase::awaiting_global;
    }
  }

  double weight_;
  ClientState state_;
  std::optional<Job> job_;
  std::optional<Pending> pending_;
};

// ---------------------------------------------------------------------------
// Synchronous federated averaging without timing: every client trains from
// the current global model and every update is aggregated.

struct SyncClient {
  ClientId id = 0;
  const Dataset* train_data = nullptr;
};

struct SyncServer {
  ParameterVector global;
  const Dataset* test_set = nullptr;
  TrainerSpec trainer;
  AggregationWeighting weighting = AggregationWeighting::dataset_size;
  std::uint64_t seed = 0;
  std::uint32_t completed_rounds = 0;
  double max_acc = 0.0;
};

inline RoundRecord run_baseline_round(std::span<const SyncClient> clients, SyncServer& server) {
  if (clients.empty()) throw ValidationError("run_baseline_round: no clients");
  const std::uint32_t round = server.completed_rounds + 1;
  RoundRecord rec;
  rec.round_index = round;
  std::vector<std::pair<ParameterVector, double>> updates;
  for (const auto& c : clients) {
    auto result = train_local(server.global, *c.train_data, server.trainer,
                              derive_seed(server.seed, c.id, round, Purpose::train));
    double w = server.weighting == AggregationWeighting::uniform ? 1.0 : static_cast<double>(c.train_data->size());
    ClientRoundEntry e;
    e.local_acc = result.local_accuracy;
    e.decision = Decision::uploaded;
    rec.per_client[c.id] = e;
    updates.emplace_back(std::move(result.params), w);
  }
  server.global = aggregate(updates);
  server.max_acc = evaluate(server.global, *server.test_set);
  server.completed_rounds = round;
  rec.global_acc_after = server.max_acc;
  rec.participant_count = static_cast<std::uint32_t>(clients.size());
  return rec;
}

}  // namespace dffl
