#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dffl/error.hpp"
#include "dffl/message.hpp"
#include "dffl/model.hpp"

namespace dffl {

inline constexpr std::size_t frame_header_size = 4;
inline constexpr std::uint32_t default_max_frame_size = 64u * 1024u * 1024u;

using Json = nlohmann::json;

namespace codec {

template <typename E>
struct EnumName {
  E value;
  std::string_view name;
};

inline constexpr EnumName<ModelKind> model_kinds[] = {{ModelKind::logistic, "logistic"}, {ModelKind::mlp, "mlp"}};
inline constexpr EnumName<FusionMode> fusion_modes[] = {{FusionMode::dynamic, "dynamic"},
                                                        {FusionMode::baseline, "baseline"}};
inline constexpr EnumName<AggregationWeighting> weightings[] = {
    {AggregationWeighting::dataset_size, "dataset_size"}, {AggregationWeighting::uniform, "uniform"}};
inline constexpr EnumName<DispatchScope> dispatch_scopes[] = {
    {DispatchScope::participants_only, "participants_only"}, {DispatchScope::all_clients, "all_clients"}};
inline constexpr EnumName<PolicyKind> policy_kinds[] = {{PolicyKind::global_max, "global_max"},
                                                        {PolicyKind::local_improvement, "local_improvement"}};

template <typename E, std::size_t N>
std::string enum_name(E v, const EnumName<E> (&table)[N]) {
  for (const auto& e : table) {
    if (e.value == v) return std::string(e.name);
  }
  throw SchemaError("unnamed enum value");
}

template <typename E, std::size_t N>
E enum_value(std::string_view s, const EnumName<E> (&table)[N], std::string_view field) {
  for (const auto& e : table) {
    if (e.name == s) return e.value;
  }
  throw SchemaError(std::string(field) + ": unknown value '" + std::string(s) + "'");
}

inline const Json& field(const Json& j, const char* key) {
  if (!j.is_object()) throw SchemaError(std::string("expected object around '") + key + "'");
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(std::string("missing field '") + key + "'");
  return *it;
}

inline void expect_keys(const Json& j, std::initializer_list<const char*> keys, std::string_view what) {
  if (!j.is_object()) throw SchemaError(std::string(what) + ": expected object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw SchemaError(std::string(what) + ": unexpected field '" + k + "'");
  }
}

inline double number(const Json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number()) throw SchemaError(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

inline std::uint64_t unsigned_int(const Json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw SchemaError(std::string("field '") + key + "' must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

inline std::string text(const Json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_string()) throw SchemaError(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

inline bool boolean(const Json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_boolean()) throw SchemaError(std::string("field '") + key + "' must be a boolean");
  return v.get<bool>();
}

}  // namespace codec

inline Json to_json(const ParameterVector& p) {
  Json shapes = Json::array();
  for (const auto& s : p.shapes()) shapes.push_back(Json::array({s.rows, s.cols, s.bias}));
  return Json{{"payload_bytes", p.payload_bytes()}, {"shapes", shapes}, {"values", p.values()}};
}

inline ParameterVector parameter_vector_from_json(const Json& j) {
  codec::expect_keys(j, {"payload_bytes", "shapes", "values"}, "parameters");
  std::vector<LayerShape> shapes;
  const auto& js = codec::field(j, "shapes");
  if (!js.is_array()) throw SchemaError("parameters.shapes must be an array");
  for (const auto& s : js) {
    if (!s.is_array() || s.size() != 3 || !s[0].is_number_unsigned() || !s[1].is_number_unsigned() ||
        !s[2].is_boolean()) {
      throw SchemaError("parameters.shapes entries must be [rows, cols, bias]");
    }
    shapes.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<bool>()});
  }
  const auto& jv = codec::field(j, "values");
  if (!jv.is_array()) throw SchemaError("parameters.values must be an array");
  std::vector<double> values;
  values.reserve(jv.size());
  for (const auto& v : jv) {
    if (!v.is_number()) throw SchemaError("parameters.values must be numbers");
    values.push_back(v.get<double>());
  }
  try {
    return ParameterVector(std::move(shapes), std::move(values), codec::unsigned_int(j, "payload_bytes"));
  } catch (const ValidationError& e) {
    throw SchemaError(e.what());
  }
}

inline Json to_json(const TrainerSpec& t) {
  return Json{{"model_kind", codec::enum_name(t.model_kind, codec::model_kinds)},
              {"hidden_width", t.hidden_width},
              {"learning_rate", t.learning_rate},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs}};
}

inline TrainerSpec trainer_from_json(const Json& j) {
  codec::expect_keys(j, {"model_kind", "hidden_width", "learning_rate", "batch_size", "epochs"}, "trainer");
  TrainerSpec t;
  t.model_kind = codec::enum_value(codec::text(j, "model_kind"), codec::model_kinds, "trainer.model_kind");
  t.hidden_width = codec::unsigned_int(j, "hidden_width");
  t.learning_rate = codec::number(j, "learning_rate");
  t.batch_size = codec::unsigned_int(j, "batch_size");
  t.epochs = codec::unsigned_int(j, "epochs");
  return t;
}

inline Json to_json(const ParticipationPolicy& p) {
  return Json{{"kind", codec::enum_name(p.kind, codec::policy_kinds)}, {"first_round_uploads", p.first_round_uploads}};
}

inline ParticipationPolicy policy_from_json(const Json& j) {
  codec::expect_keys(j, {"kind", "first_round_uploads"}, "policy");
  ParticipationPolicy p;
  p.kind = codec::enum_value(codec::text(j, "kind"), codec::policy_kinds, "policy.kind");
  p.first_round_uploads = codec::boolean(j, "first_round_uploads");
  return p;
}

inline Json to_json(const Job& job) {
  return Json{{"fusion_times", job.fusion_times},
              {"initial_params", to_json(job.initial_params)},
              {"trainer", to_json(job.trainer)},
              {"initial_waiting_time", job.initial_waiting_time},
              {"aggregation_weighting", codec::enum_name(job.aggregation_weighting, codec::weightings)},
              {"mode", codec::enum_name(job.mode, codec::fusion_modes)},
              {"dispatch", codec::enum_name(job.dispatch, codec::dispatch_scopes)},
              {"policy", to_json(job.policy)}};
}

inline Job job_from_json(const Json& j) {
  codec::expect_keys(j,
                     {"fusion_times", "initial_params", "trainer", "initial_waiting_time", "aggregation_weighting",
                      "mode", "dispatch", "policy"},
                     "job");
  Job job;
  auto rounds = codec::unsigned_int(j, "fusion_times");
  if (rounds > 0xffffffffu) throw SchemaError("job.fusion_times out of range");
  job.fusion_times = static_cast<std::uint32_t>(rounds);
  job.initial_params = parameter_vector_from_json(codec::field(j, "initial_params"));
  job.trainer = trainer_from_json(codec::field(j, "trainer"));
  job.initial_waiting_time = codec::number(j, "initial_waiting_time");
  job.aggregation_weighting =
      codec::enum_value(codec::text(j, "aggregation_weighting"), codec::weightings, "job.aggregation_weighting");
  job.mode = codec::enum_value(codec::text(j, "mode"), codec::fusion_modes, "job.mode");
  job.dispatch = codec::enum_value(codec::text(j, "dispatch"), codec::dispatch_scopes, "job.dispatch");
  job.policy = policy_from_json(codec::field(j, "policy"));
  return job;
}

inline Json to_json(const Message& m) {
  Json j{{"kind", std::string(to_string(m.kind))}, {"client", m.client}};
  if (m.round) j["round"] = *m.round;
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, Job>) {
          j["body"] = to_json(b);
        } else if constexpr (std::is_same_v<B, TrainingTime>) {
          j["body"] = Json{{"seconds", b.seconds}};
        } else if constexpr (std::is_same_v<B, Accuracy>) {
          j["body"] = Json{{"accuracy", b.value}};
        } else if constexpr (std::is_same_v<B, ModelUpload>) {
          j["body"] = Json{{"params", to_json(b.params)}, {"weight", b.weight}, {"local_acc", b.local_acc}};
        } else if constexpr (std::is_same_v<B, ParameterVector>) {
          j["body"] = Json{{"params", to_json(b)}};
        }
      },
      m.body);
  return j;
}

inline Message message_from_json(const Json& j) {
  codec::expect_keys(j, {"kind", "client", "round", "body"}, "message");
  auto kind_name = codec::text(j, "kind");
  auto kind = message_kind_from_string(kind_name);
  if (!kind) throw SchemaError("unknown message kind '" + kind_name + "'");
  Message m;
  m.kind = *kind;
  auto client = codec::unsigned_int(j, "client");
  if (client > 0xffffffffu) throw SchemaError("client id out of range");
  m.client = static_cast<ClientId>(client);
  if (j.contains("round")) {
    auto r = codec::unsigned_int(j, "round");
    if (r > 0xffffffffu) throw SchemaError("round out of range");
    m.round = static_cast<std::uint32_t>(r);
  }
  const std::size_t want = expected_body_index(m.kind);
  if (want == 0) {
    if (j.contains("body")) throw SchemaError(kind_name + ": takes no body");
  } else {
    const auto& b = codec::field(j, "body");
    switch (want) {
      case 1: m.body = job_from_json(b); break;
      case 2:
        codec::expect_keys(b, {"seconds"}, "body");
        m.body = TrainingTime{codec::number(b, "seconds")};
        break;
      case 3:
        codec::expect_keys(b, {"accuracy"}, "body");
        m.body = Accuracy{codec::number(b, "accuracy")};
        break;
      case 4:
        codec::expect_keys(b, {"params", "weight", "local_acc"}, "body");
        m.body = ModelUpload{parameter_vector_from_json(codec::field(b, "params")), codec::number(b, "weight"),
                             codec::number(b, "local_acc")};
        break;
      case 5:
        codec::expect_keys(b, {"params"}, "body");
        m.body = parameter_vector_from_json(codec::field(b, "params"));
        break;
    }
  }
  validate_message(m);
  return m;
}

// Canonical body text: keys sorted, no whitespace.
inline std::string encode_body(const Message& m) {
  validate_message(m);
  return to_json(m).dump();
}

inline Message decode_body(std::string_view body) {
  Json j;
  try {
    j = Json::parse(body.begin(), body.end());
  } catch (const Json::parse_error& e) {
    throw SchemaError(std::string("frame body is not valid JSON: ") + e.what());
  }
  try {
    return message_from_json(j);
  } catch (const Json::exception& e) {
    throw SchemaError(std::string("malformed message: ") + e.what());
  }
}

inline std::array<char, frame_header_size> encode_length(std::uint32_t n) {
  return {static_cast<char>((n >> 24) & 0xff), static_cast<char>((n >> 16) & 0xff),
          static_cast<char>((n >> 8) & 0xff), static_cast<char>(n & 0xff)};
}

inline std::uint32_t decode_length(std::string_view header) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(header[i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

// One complete frame: 4-byte big-endian body length, then the body.
inline std::string encode_message(const Message& m, std::uint32_t max_frame = default_max_frame_size) {
  std::string body = encode_body(m);
  if (body.size() > max_frame) {
    throw OversizeError("frame body of " + std::to_string(body.size()) + " bytes exceeds max " + std::to_string(max_frame));
  }
  auto header = encode_length(static_cast<std::uint32_t>(body.size()));
  std::string out(header.begin(), header.end());
  out += body;
  return out;
}

inline Message decode_message(std::string_view frame, std::uint32_t max_frame = default_max_frame_size) {
  if (frame.size() < frame_header_size) throw FramingError("truncated frame header");
  std::uint32_t n = decode_length(frame.substr(0, frame_header_size));
  if (n > max_frame) throw OversizeError("declared frame length " + std::to_string(n) + " exceeds max " + std::to_string(max_frame));
  if (frame.size() - frame_header_size < n) {
    throw FramingError("truncated frame: declared " + std::to_string(n) + " bytes, got " +
                       std::to_string(frame.size() - frame_header_size));
  }
  if (frame.size() - frame_header_size > n) throw FramingError("trailing bytes after frame");
  return decode_body(frame.substr(frame_header_size, n));
}

// Incremental reassembly of frames from a byte stream.
class FrameReader {
 public:
  explicit FrameReader(std::uint32_t max_frame = default_max_frame_size) : max_frame_(max_frame) {}

  void feed(std::string_view bytes) { buffer_.append(bytes.data(), bytes.size()); }

  std::optional<Message> next() {
    if (buffer_.size() < frame_header_size) return std::nullopt;
    std::uint32_t n = decode_length(std::string_view(buffer_).substr(0, frame_header_size));
    if (n > max_frame_) throw OversizeError("declared frame length " + std::to_string(n) + " exceeds max");
    if (buffer_.size() - frame_header_size < n) return std::nullopt;
    Message m = decode_body(std::string_view(buffer_).substr(frame_header_size, n));
    buffer_.erase(0, frame_header_size + n);
    return m;
  }

  // Call at end of stream: any buffered partial frame is an error.
  void finish() const {
    if (!buffer_.empty()) {
      throw FramingError("connection closed inside a frame (" + std::to_string(buffer_.size()) + " bytes pending)");
    }
  }

  std::size_t buffered() const { return buffer_.size(); }

 private:
  std::uint32_t max_frame_;
  std::string buffer_;
};

}  // namespace dffl
