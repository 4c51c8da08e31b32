#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace fraudseq {

using TimestampMs = std::int64_t;

enum class Label : std::int8_t { kLegit = 0, kFraud = 1, kUnknown = -1 };

enum class NumericTransform { kZScore, kPercentile };

/// One transaction. Fields are kept as (name, value) pairs so a raw event can
/// carry whatever a producer sent; validate_event() aligns them to the schema.
struct RawEvent {
  std::string event_id;
  std::string entity_id;
  std::optional<TimestampMs> event_ts;
  std::vector<std::pair<std::string, std::optional<double>>> numericals;
  std::vector<std::pair<std::string, std::optional<std::string>>> categoricals;
  std::vector<std::pair<std::string, std::optional<TimestampMs>>> timestamps;
  Label label = Label::kUnknown;
  bool scorable = true;

  TimestampMs ts() const { return *event_ts; }

  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

struct NumericField {
  std::string name;
  NumericTransform transform = NumericTransform::kZScore;

  friend bool operator==(const NumericField&, const NumericField&) = default;
};

struct DatasetSchema {
  std::string entity_field = "entity_id";
  std::string timestamp_field = "ts";
  std::vector<NumericField> numericals;
  std::vector<std::string> categoricals;
  std::vector<std::string> timestamps;

  /// Throws kInvalidConfig when field names collide across groups.
  void check() const;

  /// FNV-1a over the canonical JSON form; pins pipelines and models to a schema.
  std::uint64_t hash() const;

  friend bool operator==(const DatasetSchema&, const DatasetSchema&) = default;
};

/// Keys every event line may carry besides the schema fields.
inline constexpr std::string_view kEventIdKey = "event_id";
inline constexpr std::string_view kLabelKey = "label";
inline constexpr std::string_view kScorableKey = "scorable";

RawEvent validate_event(const RawEvent& e, const DatasetSchema& s);

nlohmann::json schema_to_json(const DatasetSchema& s);
DatasetSchema schema_from_json(const nlohmann::json& j);
DatasetSchema load_schema(const std::string& path);
void save_schema(const DatasetSchema& s, const std::string& path);

/// Event line codec. Parsing validates against the schema.
RawEvent parse_event_line(std::string_view line, const DatasetSchema& s);
std::string format_event_line(const RawEvent& e, const DatasetSchema& s);

std::vector<RawEvent> read_events(const std::string& path, const DatasetSchema& s);
void write_events(const std::vector<RawEvent>& events, const DatasetSchema& s,
                  const std::string& path);

}  // namespace fraudseq
