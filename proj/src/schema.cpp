#include "fraudseq/schema.hpp"

#include <fstream>
#include <set>
#include <unordered_map>

#include "fraudseq/error.hpp"

namespace fraudseq {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kMissingEntityId: return "MissingEntityId";
    case ErrorCode::kMissingTimestamp: return "MissingTimestamp";
    case ErrorCode::kDegenerateDistribution: return "DegenerateDistribution";
    case ErrorCode::kTooFewValues: return "TooFewValues";
    case ErrorCode::kUnsortedSequence: return "UnsortedSequence";
    case ErrorCode::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kCorruptModelFile: return "CorruptModelFile";
    case ErrorCode::kEmptyScorableSet: return "EmptyScorableSet";
    case ErrorCode::kNoFraudCards: return "NoFraudCards";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kCorruptRecord: return "CorruptRecord";
    case ErrorCode::kUnreadableLog: return "UnreadableLog";
    case ErrorCode::kClosed: return "Closed";
    case ErrorCode::kDiskFull: return "DiskFull";
    case ErrorCode::kQueueSaturated: return "QueueSaturated";
    case ErrorCode::kRateUnsustainable: return "RateUnsustainable";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kUnachievablePrecision: return "UnachievablePrecision";
    case ErrorCode::kNoNegatives: return "NoNegatives";
    case ErrorCode::kNoFraud: return "NoFraud";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

namespace {

bool is_reserved(std::string_view key) {
  return key == kEventIdKey || key == kLabelKey || key == kScorableKey;
}

enum class Kind { kNumeric, kCategorical, kTimestamp };

std::unordered_map<std::string, Kind> field_kinds(const DatasetSchema& s) {
  std::unordered_map<std::string, Kind> kinds;
  for (const auto& f : s.numericals) kinds.emplace(f.name, Kind::kNumeric);
  for (const auto& f : s.categoricals) kinds.emplace(f, Kind::kCategorical);
  for (const auto& f : s.timestamps) kinds.emplace(f, Kind::kTimestamp);
  return kinds;
}

template <class Value>
std::optional<Value> take(const std::vector<std::pair<std::string, std::optional<Value>>>& fields,
                          const std::string& name) {
  for (const auto& [k, v] : fields) {
    if (k == name) return v;
  }
  return std::nullopt;
}

}  // namespace

void DatasetSchema::check() const {
  if (entity_field.empty() || timestamp_field.empty()) {
    fail(ErrorCode::kInvalidConfig, "schema needs an entity field and a timestamp field");
  }
  std::set<std::string> seen{entity_field, timestamp_field};
  if (seen.size() != 2) fail(ErrorCode::kInvalidConfig, "entity and timestamp field share a name");
  auto add = [&](const std::string& name) {
    if (name.empty() || is_reserved(name) || !seen.insert(name).second) {
      fail(ErrorCode::kInvalidConfig, "duplicate or reserved field name '" + name + "'");
    }
  };
  for (const auto& f : numericals) add(f.name);
  for (const auto& f : categoricals) add(f);
  for (const auto& f : timestamps) add(f);
}

std::uint64_t DatasetSchema::hash() const {
  const std::string canonical = schema_to_json(*this).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RawEvent validate_event(const RawEvent& e, const DatasetSchema& s) {
  if (e.entity_id.empty()) fail(ErrorCode::kMissingEntityId, "event '" + e.event_id + "'");
  if (!e.event_ts) fail(ErrorCode::kMissingTimestamp, "event '" + e.event_id + "'");

  const auto kinds = field_kinds(s);
  auto expect_kind = [&](const std::string& name, Kind kind) {
    auto it = kinds.find(name);
    if (it == kinds.end()) fail(ErrorCode::kSchemaMismatch, "undeclared field '" + name + "'");
    if (it->second != kind) fail(ErrorCode::kSchemaMismatch, "field '" + name + "' has the wrong kind");
  };
  for (const auto& [k, _] : e.numericals) expect_kind(k, Kind::kNumeric);
  for (const auto& [k, _] : e.categoricals) expect_kind(k, Kind::kCategorical);
  for (const auto& [k, _] : e.timestamps) expect_kind(k, Kind::kTimestamp);

  RawEvent out;
  out.event_id = e.event_id;
  out.entity_id = e.entity_id;
  out.event_ts = e.event_ts;
  out.label = e.label;
  out.scorable = e.scorable;
  for (const auto& f : s.numericals) {
    auto v = take(e.numericals, f.name);
    out.numericals.emplace_back(f.name, v);
  }
  for (const auto& f : s.categoricals) out.categoricals.emplace_back(f, take(e.categoricals, f));
  for (const auto& f : s.timestamps) out.timestamps.emplace_back(f, take(e.timestamps, f));
  return out;
}

nlohmann::json schema_to_json(const DatasetSchema& s) {
  nlohmann::json nums = nlohmann::json::array();
  for (const auto& f : s.numericals) {
    nums.push_back({{"name", f.name},
                    {"transform", f.transform == NumericTransform::kZScore ? "zscore" : "percentile"}});
  }
  return {{"entity_field", s.entity_field},
          {"timestamp_field", s.timestamp_field},
          {"numericals", nums},
          {"categoricals", s.categoricals},
          {"timestamps", s.timestamps}};
}

DatasetSchema schema_from_json(const nlohmann::json& j) {
  DatasetSchema s;
  try {
    s.entity_field = j.at("entity_field").get<std::string>();
    s.timestamp_field = j.at("timestamp_field").get<std::string>();
    for (const auto& n : j.value("numericals", nlohmann::json::array())) {
      NumericField f;
      f.name = n.at("name").get<std::string>();
      const auto t = n.value("transform", std::string("zscore"));
      if (t == "zscore") {
        f.transform = NumericTransform::kZScore;
      } else if (t == "percentile") {
        f.transform = NumericTransform::kPercentile;
      } else {
        fail(ErrorCode::kInvalidConfig, "unknown transform '" + t + "'");
      }
      s.numericals.push_back(std::move(f));
    }
    s.categoricals = j.value("categoricals", std::vector<std::string>{});
    s.timestamps = j.value("timestamps", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kInvalidConfig, std::string("schema: ") + ex.what());
  }
  s.check();
  return s;
}

DatasetSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open schema " + path);
  try {
    return schema_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorCode::kInvalidConfig, std::string("schema: ") + ex.what());
  }
}

void save_schema(const DatasetSchema& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write schema " + path);
  out << schema_to_json(s).dump(2) << '\n';
}

RawEvent parse_event_line(std::string_view line, const DatasetSchema& s) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorCode::kSchemaMismatch, std::string("malformed event line: ") + ex.what());
  }
  if (!j.is_object()) fail(ErrorCode::kSchemaMismatch, "event line is not an object");

  const auto kinds = field_kinds(s);
  RawEvent e;
  for (const auto& [key, value] : j.items()) {
    if (key == s.entity_field) {
      if (value.is_string()) {
        e.entity_id = value.get<std::string>();
      } else if (value.is_number_integer()) {
        e.entity_id = std::to_string(value.get<std::int64_t>());
      } else if (!value.is_null()) {
        fail(ErrorCode::kSchemaMismatch, "entity field must be a string");
      }
    } else if (key == s.timestamp_field) {
      if (value.is_number_integer()) {
        e.event_ts = value.get<TimestampMs>();
      } else if (!value.is_null()) {
        fail(ErrorCode::kSchemaMismatch, "timestamp field must be integer epoch ms");
      }
    } else if (key == kEventIdKey) {
      e.event_id = value.is_string() ? value.get<std::string>() : value.dump();
    } else if (key == kLabelKey) {
      if (value.is_null()) {
        e.label = Label::kUnknown;
      } else if (value.is_number_integer() && (value == 0 || value == 1)) {
        e.label = value == 1 ? Label::kFraud : Label::kLegit;
      } else {
        fail(ErrorCode::kSchemaMismatch, "label must be 0, 1 or null");
      }
    } else if (key == kScorableKey) {
      if (!value.is_boolean()) fail(ErrorCode::kSchemaMismatch, "scorable must be boolean");
      e.scorable = value.get<bool>();
    } else {
      auto it = kinds.find(key);
      if (it == kinds.end()) fail(ErrorCode::kSchemaMismatch, "undeclared field '" + key + "'");
      switch (it->second) {
        case Kind::kNumeric:
          if (value.is_null()) {
            e.numericals.emplace_back(key, std::nullopt);
          } else if (value.is_number()) {
            e.numericals.emplace_back(key, value.get<double>());
          } else {
            fail(ErrorCode::kSchemaMismatch, "field '" + key + "' must be numeric");
          }
          break;
        case Kind::kCategorical:
          if (value.is_null()) {
            e.categoricals.emplace_back(key, std::nullopt);
          } else if (value.is_string()) {
            e.categoricals.emplace_back(key, value.get<std::string>());
          } else {
            fail(ErrorCode::kSchemaMismatch, "field '" + key + "' must be a string");
          }
          break;
        case Kind::kTimestamp:
          if (value.is_null()) {
            e.timestamps.emplace_back(key, std::nullopt);
          } else if (value.is_number_integer()) {
            e.timestamps.emplace_back(key, value.get<TimestampMs>());
          } else {
            fail(ErrorCode::kSchemaMismatch, "field '" + key + "' must be integer epoch ms");
          }
          break;
      }
    }
  }
  return validate_event(e, s);
}

std::string format_event_line(const RawEvent& e, const DatasetSchema& s) {
  // ordered_json keeps the schema field order on output
  nlohmann::ordered_json j;
  j[std::string(kEventIdKey)] = e.event_id;
  j[s.entity_field] = e.entity_id;
  j[s.timestamp_field] = e.ts();
  for (const auto& [k, v] : e.numericals) {
    if (v) j[k] = *v;
  }
  for (const auto& [k, v] : e.categoricals) {
    if (v) j[k] = *v;
  }
  for (const auto& [k, v] : e.timestamps) {
    if (v) j[k] = *v;
  }
  if (e.label == Label::kUnknown) {
    j[std::string(kLabelKey)] = nullptr;
  } else {
    j[std::string(kLabelKey)] = e.label == Label::kFraud ? 1 : 0;
  }
  j[std::string(kScorableKey)] = e.scorable;
  return j.dump();
}

std::vector<RawEvent> read_events(const std::string& path, const DatasetSchema& s) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open events " + path);
  std::vector<RawEvent> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    RawEvent e = parse_event_line(line, s);
    if (e.event_id.empty()) e.event_id = std::to_string(lineno);
    events.push_back(std::move(e));
  }
  return events;
}

void write_events(const std::vector<RawEvent>& events, const DatasetSchema& s,
                  const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write events " + path);
  for (const auto& e : events) out << format_event_line(e, s) << '\n';
}

}  // namespace fraudseq
