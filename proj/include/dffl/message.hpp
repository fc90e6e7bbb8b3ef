#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "dffl/error.hpp"
#include "dffl/model.hpp"

namespace dffl {

using ClientId = std::uint32_t;

enum class FusionMode { dynamic, baseline };
enum class AggregationWeighting { dataset_size, uniform };
enum class DispatchScope { participants_only, all_clients };
enum class PolicyKind { global_max, local_improvement };

struct ParticipationPolicy {
  PolicyKind kind = PolicyKind::global_max;
  bool first_round_uploads = true;
  friend bool operator==(const ParticipationPolicy&, const ParticipationPolicy&) = default;
};

// The learning job published by the server. Besides the round count and the
// initial model it carries everything a client needs to follow the same
// rules as the server (mode, dispatch scope, gate policy).
struct Job {
  std::uint32_t fusion_times = 30;
  ParameterVector initial_params;
  TrainerSpec trainer;
  double initial_waiting_time = 120.0;
  AggregationWeighting aggregation_weighting = AggregationWeighting::dataset_size;
  FusionMode mode = FusionMode::dynamic;
  DispatchScope dispatch = DispatchScope::participants_only;
  ParticipationPolicy policy;

  void validate() const {
    if (fusion_times < 1) throw ValidationError("Job: fusion_times must be >= 1");
    if (!(initial_waiting_time > 0.0) || !std::isfinite(initial_waiting_time)) {
      throw ValidationError("Job: initial_waiting_time must be > 0");
    }
    if (initial_params.empty()) throw ValidationError("Job: initial_params is empty");
    trainer.validate();
  }

  friend bool operator==(const Job&, const Job&) = default;
};

enum class MessageKind {
  DownloadJob,
  JobPayload,
  ReportTrainingTime,
  RequestMaxAcc,
  MaxAccReply,
  UploadModel,
  SkipNotice,
  GlobalModel,
  RoundClosed,
  Shutdown,
};

inline constexpr MessageKind all_message_kinds[] = {
    MessageKind::DownloadJob,  MessageKind::JobPayload,  MessageKind::ReportTrainingTime,
    MessageKind::RequestMaxAcc, MessageKind::MaxAccReply, MessageKind::UploadModel,
    MessageKind::SkipNotice,   MessageKind::GlobalModel, MessageKind::RoundClosed,
    MessageKind::Shutdown,
};

inline std::string_view to_string(MessageKind k) {
  switch (k) {
    case MessageKind::DownloadJob: return "DownloadJob";
    case MessageKind::JobPayload: return "JobPayload";
    case MessageKind::ReportTrainingTime: return "ReportTrainingTime";
    case MessageKind::RequestMaxAcc: return "RequestMaxAcc";
    case MessageKind::MaxAccReply: return "MaxAccReply";
    case MessageKind::UploadModel: return "UploadModel";
    case MessageKind::SkipNotice: return "SkipNotice";
    case MessageKind::GlobalModel: return "GlobalModel";
    case MessageKind::RoundClosed: return "RoundClosed";
    case MessageKind::Shutdown: return "Shutdown";
  }
  return "?";
}

inline std::optional<MessageKind> message_kind_from_string(std::string_view s) {
  for (auto k : all_message_kinds) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct TrainingTime {
  double seconds = 0.0;
  friend bool operator==(const TrainingTime&, const TrainingTime&) = default;
};

struct Accuracy {
  double value = 0.0;
  friend bool operator==(const Accuracy&, const Accuracy&) = default;
};

struct ModelUpload {
  ParameterVector params;
  double weight = 1.0;
  double local_acc = 0.0;
  friend bool operator==(const ModelUpload&, const ModelUpload&) = default;
};

using MessageBody = std::variant<std::monostate, Job, TrainingTime, Accuracy, ModelUpload, ParameterVector>;

// Body carried by each kind:
//   JobPayload         Job
//   ReportTrainingTime TrainingTime
//   MaxAccReply        Accuracy (server MaxAcc)
//   SkipNotice         Accuracy (client local accuracy)
//   UploadModel        ModelUpload
//   GlobalModel        ParameterVector
//   others             empty
// DownloadJob carries the requested client id in `client`; JobPayload echoes
// the id the server assigned.
struct Message {
  MessageKind kind = MessageKind::Shutdown;
  std::optional<std::uint32_t> round;
  ClientId client = 0;
  MessageBody body;

  friend bool operator==(const Message&, const Message&) = default;
};

inline bool kind_has_round(MessageKind k) {
  return k != MessageKind::DownloadJob && k != MessageKind::JobPayload && k != MessageKind::Shutdown;
}

inline std::size_t expected_body_index(MessageKind k) {
  switch (k) {
    case MessageKind::JobPayload: return 1;
    case MessageKind::ReportTrainingTime: return 2;
    case MessageKind::MaxAccReply:
    case MessageKind::SkipNotice: return 3;
    case MessageKind::UploadModel: return 4;
    case MessageKind::GlobalModel: return 5;
    default: return 0;
  }
}

inline void validate_message(const Message& m) {
  auto name = std::string(to_string(m.kind));
  if (kind_has_round(m.kind) != m.round.has_value()) {
    throw SchemaError(name + ": round index " + (m.round ? "not allowed" : "required"));
  }
  if (m.round && *m.round < 1) throw SchemaError(name + ": round index must be >= 1");
  if (m.body.index() != expected_body_index(m.kind)) throw SchemaError(name + ": wrong body type");
  auto proportion = [&](double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(name + ": accuracy outside [0, 1]");
  };
  if (auto* a = std::get_if<Accuracy>(&m.body)) proportion(a->value);
  if (auto* u = std::get_if<ModelUpload>(&m.body)) {
    proportion(u->local_acc);
    if (!(u->weight >= 0.0) || !std::isfinite(u->weight)) throw SchemaError(name + ": bad weight");
  }
  if (auto* t = std::get_if<TrainingTime>(&m.body)) {
    if (!(t->seconds >= 0.0) || !std::isfinite(t->seconds)) throw SchemaError(name + ": bad training time");
  }
  if (auto* j = std::get_if<Job>(&m.body)) {
    try {
      j->validate();
    } catch (const ValidationError& e) {
      throw SchemaError(name + ": " + e.what());
    }
  }
}

inline Message make_message(MessageKind kind, std::optional<std::uint32_t> round, ClientId client,
                            MessageBody body = {}) {
  return Message{kind, round, client, std::move(body)};
}

// Bytes charged by the network model: model-carrying messages cost their
// payload, control messages only latency.
inline std::uint64_t simulated_size(const Message& m) {
  if (auto* j = std::get_if<Job>(&m.body)) return j->initial_params.payload_bytes();
  if (auto* u = std::get_if<ModelUpload>(&m.body)) return u->params.payload_bytes();
  if (auto* p = std::get_if<ParameterVector>(&m.body)) return p->payload_bytes();
  return 0;
}

}  // namespace dffl
