#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dffl/error.hpp"
#include "dffl/message.hpp"
#include "dffl/model.hpp"
#include "dffl/protocol.hpp"
#include "dffl/rng.hpp"

namespace dffl {

struct NetworkModel {
  double bandwidth = 10'000'000.0;  // bytes per second
  double latency = 0.0;             // seconds per message

  void validate() const {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw ValidationError("NetworkModel: bandwidth must be > 0");
    if (!(latency >= 0.0) || !std::isfinite(latency)) throw ValidationError("NetworkModel: latency must be >= 0");
  }
  friend bool operator==(const NetworkModel&, const NetworkModel&) = default;
};

struct ComputeProfile {
  double seconds_per_epoch_per_ksample = 1.0;
  double jitter_fraction = 0.0;  // half-width of the multiplicative noise

  void validate() const {
    if (!(seconds_per_epoch_per_ksample > 0.0)) {
      throw ValidationError("ComputeProfile: seconds_per_epoch_per_ksample must be > 0");
    }
    if (!(jitter_fraction >= 0.0 && jitter_fraction < 1.0)) {
      throw ValidationError("ComputeProfile: jitter_fraction must be in [0, 1)");
    }
  }
  friend bool operator==(const ComputeProfile&, const ComputeProfile&) = default;
};

inline double compute_training_time(const ComputeProfile& profile, std::size_t n_samples,
                                    std::size_t epochs, std::uint64_t seed) {
  double base = static_cast<double>(epochs) * (static_cast<double>(n_samples) / 1000.0) *
                profile.seconds_per_epoch_per_ksample;
  if (profile.jitter_fraction == 0.0) return base;
  auto rng = make_rng(seed);
  double u = (2.0 * uniform01(rng) - 1.0) * profile.jitter_fraction;
  return base * (1.0 + u);
}

inline double transfer_time(std::uint64_t payload_bytes, const NetworkModel& net) {
  return net.latency + static_cast<double>(payload_bytes) / net.bandwidth;
}

// ---------------------------------------------------------------------------
// Event queue

template <typename Payload>
struct SimEvent {
  double timestamp = 0.0;
  std::uint64_t sequence = 0;
  Payload payload;
};

// Min-(timestamp, sequence) queue with a virtual clock that never moves
// backwards. Equal timestamps dequeue in insertion order.
template <typename Payload>
class EventQueue {
 public:
  std::uint64_t schedule(double timestamp, Payload payload) {
    return push(timestamp, next_sequence_++, std::move(payload));
  }

  // Orders after every schedule()d event with the same timestamp, including
  // ones scheduled later.
  std::uint64_t schedule_after_peers(double timestamp, Payload payload) {
    return push(timestamp, late_band + next_late_sequence_++, std::move(payload));
  }

  // nullopt signals that the simulation is complete.
  std::optional<SimEvent<Payload>> advance() {
    if (heap_.empty()) return std::nullopt;
    SimEvent<Payload> ev = heap_.top();
    heap_.pop();
    now_ = ev.timestamp;
    return ev;
  }

  std::optional<double> peek_time() const {
    if (heap_.empty()) return std::nullopt;
    return heap_.top().timestamp;
  }

  double now() const { return now_; }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }

 private:
  static constexpr std::uint64_t late_band = std::uint64_t{1} << 63;

  std::uint64_t push(double timestamp, std::uint64_t seq, Payload payload) {
    if (!(timestamp >= now_) || !std::isfinite(timestamp)) {
      throw ValidationError("EventQueue: cannot schedule at " + std::to_string(timestamp) +
                            " before now " + std::to_string(now_));
    }
    heap_.push(SimEvent<Payload>{timestamp, seq, std::move(payload)});
    return seq;
  }

  struct Later {
    bool operator()(const SimEvent<Payload>& a, const SimEvent<Payload>& b) const {
      if (a.timestamp != b.timestamp) return a.timestamp > b.timestamp;
      return a.sequence > b.sequence;
    }
  };
  std::priority_queue<SimEvent<Payload>, std::vector<SimEvent<Payload>>, Later> heap_;
  double now_ = 0.0;
  std::uint64_t next_sequence_ = 0;
  std::uint64_t next_late_sequence_ = 0;
};

// ---------------------------------------------------------------------------
// Simulation

struct ClientProfile {
  ClientId id = 0;
  Dataset data;
  ComputeProfile compute;
  bool adversarial = false;
};

enum class AccuracySource { training_set, holdout };

struct SimOptions {
  AccuracySource accuracy_source = AccuracySource::training_set;
  double holdout_fraction = 0.2;
  bool record_trace = false;
};

// Pluggable pieces of a run. The real configuration trains on client data;
// tests substitute scripted accuracies, times, and evaluations.
struct SimHooks {
  std::function<TrainResult(ClientId, std::uint32_t round, const ParameterVector& start)> train;
  std::function<double(ClientId, std::uint32_t round)> training_time;
  Evaluator evaluate;
  std::function<double(ClientId)> weight;
};

struct TraceEntry {
  enum class Kind { message, timer, training_done };
  Kind kind = Kind::message;
  double sent_at = 0.0;
  double delivered_at = 0.0;
  bool to_server = false;
  ClientId client = 0;
  MessageKind message = MessageKind::Shutdown;
  std::optional<std::uint32_t> round;
};

struct SimResult {
  Ledger ledger;
  std::vector<TraceEntry> trace;
  double finished_at = 0.0;
};

namespace detail {

struct ToServer {
  Message message;
  double sent_at = 0.0;
};
struct ToClient {
  ClientId client = 0;
  Message message;
  double sent_at = 0.0;
};
struct TimerFired {
  ServerTimer timer;
};
struct TrainingDone {
  ClientId client = 0;
  std::uint32_t round = 0;
};
using SimPayload = std::variant<ToServer, ToClient, TimerFired, TrainingDone>;

template <typename E>
[[noreturn]] void rethrow_as(const E& e, const std::string& context) {
  throw E(context + ": " + e.what());
}

}  // namespace detail

// Runs the server and clients against virtual time. Each (sender, receiver)
// link delivers in FIFO order, so a control message never overtakes a model
// transfer on the same link.
inline SimResult run_simulation_with(const Job& job, const std::vector<ClientId>& client_ids,
                                     const NetworkModel& net, const SimHooks& hooks,
                                     bool record_trace = false) {
  job.validate();
  net.validate();
  if (client_ids.empty()) throw ValidationError("run_simulation: at least one client required");
  if (!hooks.train || !hooks.training_time || !hooks.evaluate || !hooks.weight) {
    throw ValidationError("run_simulation: incomplete hooks");
  }

  using detail::SimPayload;
  EventQueue<SimPayload> queue;
  SimResult result;

  ServerTimings timings;
  timings.model_dispatch_time = transfer_time(job.initial_params.payload_bytes(), net);
  timings.notice_dispatch_time = transfer_time(0, net);
  timings.upload_transfer_time = transfer_time(job.initial_params.payload_bytes(), net);
  FusionServer server(job, timings, client_ids.size(), hooks.evaluate);

  std::map<ClientId, FusionClient> clients;
  for (ClientId id : client_ids) {
    if (!clients.emplace(id, FusionClient(id, hooks.weight(id))).second) {
      throw ValidationError("run_simulation: duplicate client id " + std::to_string(id));
    }
  }

  // Link key: client id, direction.
  std::map<std::pair<ClientId, bool>, double> link_free;
  auto link_delivery = [&](ClientId c, bool to_server, const Message& m) {
    double at = queue.now() + transfer_time(simulated_size(m), net);
    auto& last = link_free[{c, to_server}];
    at = std::max(at, last);
    last = at;
    return at;
  };

  auto apply_server = [&](ServerOutput out) {
    for (auto& ob : out.messages) {
      double at = link_delivery(ob.to, false, ob.message);
      queue.schedule(at, detail::ToClient{ob.to, std::move(ob.message), queue.now()});
    }
    if (out.arm_timer) {
      // Deadlines are inclusive: anything else stamped at the deadline lands first.
      queue.schedule_after_peers(std::max(queue.now(), out.arm_timer->first),
                                 detail::TimerFired{out.arm_timer->second});
    }
  };

  auto apply_client = [&](ClientId id, ClientOutput out) {
    auto& client = clients.at(id);
    for (auto& m : out.messages) {
      double at = link_delivery(id, true, m);
      queue.schedule(at, detail::ToServer{std::move(m), queue.now()});
    }
    if (out.train) {
      const std::uint32_t round = out.train->round;
      TrainResult tr = hooks.train(id, round, out.train->start_params);
      double t = hooks.training_time(id, round);
      if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("training time must be > 0");
      client.set_training_result(round, std::move(tr), t);
      queue.schedule(queue.now() + t, detail::TrainingDone{id, round});
    }
  };

  auto trace = [&](TraceEntry e) {
    if (record_trace) result.trace.push_back(e);
  };

  apply_server(server.start(0.0));
  for (auto& [id, client] : clients) apply_client(id, client.start());

  while (!server.finished()) {
    auto ev = queue.advance();
    if (!ev) throw ProtocolError("run_simulation: event queue drained before the job finished");
    const double now = ev->timestamp;
    std::uint32_t round_ctx = server.round_state().round_index;
    ClientId client_ctx = 0;
    std::string context;
    try {
      if (auto* t = std::get_if<detail::TimerFired>(&ev->payload)) {
        trace({TraceEntry::Kind::timer, now, now, true, 0, MessageKind::Shutdown, t->timer.round});
        context = "deadline timer";
        apply_server(server.on_timer(t->timer, now));
      } else if (auto* s = std::get_if<detail::ToServer>(&ev->payload)) {
        client_ctx = s->message.client;
        context = "server handling " + std::string(to_string(s->message.kind));
        trace({TraceEntry::Kind::message, s->sent_at, now, true, s->message.client, s->message.kind, s->message.round});
        apply_server(server.handle(s->message, now));
      } else if (auto* c = std::get_if<detail::ToClient>(&ev->payload)) {
        client_ctx = c->client;
        context = "client handling " + std::string(to_string(c->message.kind));
        trace({TraceEntry::Kind::message, c->sent_at, now, false, c->client, c->message.kind, c->message.round});
        apply_client(c->client, clients.at(c->client).handle(c->message));
      } else if (auto* d = std::get_if<detail::TrainingDone>(&ev->payload)) {
        client_ctx = d->client;
        context = "training completion";
        trace({TraceEntry::Kind::training_done, now, now, false, d->client, MessageKind::Shutdown, d->round});
        apply_client(d->client, clients.at(d->client).on_training_finished(d->round));
      }
    } catch (const NumericError& e) {
      detail::rethrow_as(e, "round " + std::to_string(round_ctx) + ", client " + std::to_string(client_ctx) + ", " + context);
    } catch (const ProtocolError& e) {
      detail::rethrow_as(ProtocolError(e.what()), "round " + std::to_string(round_ctx) + ", client " +
                                                      std::to_string(client_ctx) + ", " + context);
    } catch (const ValidationError& e) {
      detail::rethrow_as(e, "round " + std::to_string(round_ctx) + ", client " + std::to_string(client_ctx) + ", " + context);
    }
  }
  result.finished_at = queue.now();
  result.ledger = server.ledger();
  return result;
}

// Hooks that train on each client's data and evaluate on the server test set.
inline SimHooks make_training_hooks(const Job& job, const std::vector<ClientProfile>& profiles,
                                    const Dataset& test_set, std::uint64_t seed, const SimOptions& options = {}) {
  struct ClientData {
    Dataset train;
    std::optional<Dataset> holdout;
    ComputeProfile compute;
  };
  auto data = std::make_shared<std::map<ClientId, ClientData>>();
  for (const auto& p : profiles) {
    p.compute.validate();
    p.data.validate();
    ClientData cd{p.data, std::nullopt, p.compute};
    if (options.accuracy_source == AccuracySource::holdout) {
      auto [kept, held] = split_holdout(p.data, options.holdout_fraction, derive_seed(seed, p.id, 0, Purpose::holdout_split));
      cd.train = std::move(kept);
      cd.holdout = std::move(held);
    }
    data->emplace(p.id, std::move(cd));
  }
  auto test = std::make_shared<Dataset>(test_set);
  TrainerSpec trainer = job.trainer;

  SimHooks hooks;
  hooks.train = [data, trainer, seed](ClientId id, std::uint32_t round, const ParameterVector& start) {
    const auto& cd = data->at(id);
    auto r = train_local(start, cd.train, trainer, derive_seed(seed, id, round, Purpose::train));
    if (cd.holdout) r.local_accuracy = evaluate(r.params, *cd.holdout);
    return r;
  };
  hooks.training_time = [data, trainer, seed](ClientId id, std::uint32_t round) {
    const auto& cd = data->at(id);
    return compute_training_time(cd.compute, cd.train.size(), trainer.epochs,
                                 derive_seed(seed, id, round, Purpose::compute_jitter));
  };
  hooks.evaluate = [test](const ParameterVector& p, std::uint32_t) { return evaluate(p, *test); };
  hooks.weight = [data](ClientId id) { return static_cast<double>(data->at(id).train.size()); };
  return hooks;
}

inline SimResult run_simulation(const Job& job, const std::vector<ClientProfile>& profiles, const NetworkModel& net,
                                const Dataset& test_set, std::uint64_t seed, const SimOptions& options = {}) {
  if (profiles.empty()) throw ValidationError("run_simulation: at least one client required");
  std::vector<ClientId> ids;
  for (const auto& p : profiles) ids.push_back(p.id);
  return run_simulation_with(job, ids, net, make_training_hooks(job, profiles, test_set, seed, options),
                             options.record_trace);
}

// Policy and mode given explicitly, overriding the job's.
inline SimResult run_simulation(Job job, const std::vector<ClientProfile>& profiles, const NetworkModel& net,
                                const ParticipationPolicy& policy, FusionMode mode, std::uint64_t seed,
                                const Dataset& test_set, const SimOptions& options = {}) {
  job.policy = policy;
  job.mode = mode;
  return run_simulation(job, profiles, net, test_set, seed, options);
}

}  // namespace dffl
