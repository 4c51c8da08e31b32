#include "fraudseq/sequence_store.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <unordered_map>

#include "fraudseq/binary_io.hpp"
#include "fraudseq/error.hpp"

namespace fraudseq {

namespace {

constexpr std::uint32_t kMagic = 0x51455346;  // "FSEQ"
constexpr std::size_t kHeaderSize = 4 + 4 + 8 + 8;

void write_record(binary::Writer& w, const SequenceRecord& r) {
  w.put_string(r.entity_id);
  w.put(static_cast<std::uint8_t>(r.has_fraud));
  w.put(static_cast<std::uint32_t>(r.events.size()));
  for (const auto& e : r.events) {
    w.put_string(e.event_id);
    w.put(e.ts);
    w.put(static_cast<std::int8_t>(e.label));
    w.put(static_cast<std::uint8_t>(e.scorable));
    w.put(static_cast<std::uint32_t>(e.features.dense.size()));
    w.put_array(std::span<const double>(e.features.dense));
    w.put(static_cast<std::uint32_t>(e.features.cat_indices.size()));
    w.put_array(std::span<const std::int32_t>(e.features.cat_indices));
  }
}

SequenceRecord read_record(binary::Reader& r) {
  SequenceRecord rec;
  rec.entity_id = r.get_string();
  rec.has_fraud = r.get<std::uint8_t>() != 0;
  const auto n = r.get<std::uint32_t>();
  rec.events.resize(n);
  for (auto& e : rec.events) {
    e.event_id = r.get_string();
    e.ts = r.get<TimestampMs>();
    e.label = static_cast<Label>(r.get<std::int8_t>());
    e.scorable = r.get<std::uint8_t>() != 0;
    e.features.dense.resize(r.get<std::uint32_t>());
    r.get_array(std::span<double>(e.features.dense));
    e.features.cat_indices.resize(r.get<std::uint32_t>());
    r.get_array(std::span<std::int32_t>(e.features.cat_indices));
  }
  return rec;
}

struct Header {
  std::uint64_t count;
  std::uint64_t schema_hash;
};

Header read_header(binary::Reader& r) {
  if (r.get<std::uint32_t>() != kMagic) fail(ErrorCode::kIo, "not a sequence store");
  if (r.get<std::uint32_t>() != SequenceStore::kFormatVersion) fail(ErrorCode::kIo, "unsupported sequence store version");
  Header h{};
  h.count = r.get<std::uint64_t>();
  h.schema_hash = r.get<std::uint64_t>();
  return h;
}

}  // namespace

std::size_t SequenceStore::total_events() const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.events.size();
  return n;
}

std::vector<std::uint8_t> SequenceStore::serialize() const {
  binary::Writer w;
  w.put(kMagic);
  w.put(kFormatVersion);
  w.put(static_cast<std::uint64_t>(records_.size()));
  w.put(schema_hash_);
  binary::Writer rec;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    rec.bytes().clear();
    write_record(rec, records_[i]);
    w.put(static_cast<std::uint64_t>(i));
    w.put(static_cast<std::uint32_t>(rec.bytes().size()));
    w.put_bytes(rec.bytes());
  }
  return std::move(w.bytes());
}

SequenceStore SequenceStore::deserialize(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes);
  const auto h = read_header(r);
  std::vector<SequenceRecord> records;
  records.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    if (r.get<std::uint64_t>() != i) fail(ErrorCode::kIo, "sequence store ordinals out of order");
    const auto len = r.get<std::uint32_t>();
    binary::Reader body(r.get_bytes(len));
    records.push_back(read_record(body));
  }
  return SequenceStore(std::move(records), h.schema_hash);
}

void SequenceStore::save(const std::string& path) const {
  const auto bytes = serialize();
  binary::write_file_atomic(path, bytes);
}

SequenceStore SequenceStore::load(const std::string& path) {
  const auto bytes = binary::read_file(path);
  return deserialize(bytes);
}

SequenceFileReader::SequenceFileReader(const std::string& path) : bytes_(binary::read_file(path)) {
  binary::Reader r(bytes_);
  const auto h = read_header(r);
  schema_hash_ = h.schema_hash;
  offsets_.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    if (r.get<std::uint64_t>() != i) fail(ErrorCode::kIo, "sequence store ordinals out of order");
    const auto len = r.get<std::uint32_t>();
    offsets_.emplace_back(r.position(), len);
    r.get_bytes(len);
  }
}

SequenceRecord SequenceFileReader::read(std::size_t ordinal) const {
  const auto [off, len] = offsets_.at(ordinal);
  binary::Reader r(std::span<const std::uint8_t>(bytes_).subspan(off, len));
  return read_record(r);
}

std::vector<SequenceRecord> SequenceFileReader::scan(std::size_t start, std::size_t count) const {
  std::vector<SequenceRecord> out;
  if (offsets_.empty()) return out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(read((start + i) % offsets_.size()));
  return out;
}

SequenceStore build_sequences(std::span<const RawEvent> events, const FittedPipeline& pipeline) {
  std::map<std::string, std::vector<std::size_t>> by_entity;
  for (std::size_t i = 0; i < events.size(); ++i) by_entity[events[i].entity_id].push_back(i);

  std::vector<SequenceRecord> records;
  records.reserve(by_entity.size());
  for (auto& [entity, idx] : by_entity) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return events[a].ts() < events[b].ts(); });
    SequenceRecord rec;
    rec.entity_id = entity;
    rec.events.reserve(idx.size());
    std::optional<TimestampMs> prev;
    for (std::size_t i : idx) {
      const RawEvent& e = events[i];
      SequenceEvent se;
      se.event_id = e.event_id;
      se.ts = e.ts();
      se.label = e.label;
      se.scorable = e.scorable;
      se.features = pipeline.apply(e, prev);
      rec.has_fraud = rec.has_fraud || e.label == Label::kFraud;
      prev = e.ts();
      rec.events.push_back(std::move(se));
    }
    records.push_back(std::move(rec));
  }
  return SequenceStore(std::move(records), pipeline.schema_hash());
}

std::pair<SequenceStore, SequenceStore> split_fraud(const SequenceStore& store) {
  std::vector<SequenceRecord> fraud;
  std::vector<SequenceRecord> clean;
  for (const auto& r : store) (r.has_fraud ? fraud : clean).push_back(r);
  return {SequenceStore(std::move(fraud), store.schema_hash()),
          SequenceStore(std::move(clean), store.schema_hash())};
}

SequenceStore filter_by_period(const SequenceStore& store, TimestampMs t0, TimestampMs t1) {
  std::vector<SequenceRecord> kept;
  for (const auto& r : store) {
    const bool hit = std::any_of(r.events.begin(), r.events.end(),
                                 [&](const SequenceEvent& e) { return t0 <= e.ts && e.ts < t1; });
    if (hit) kept.push_back(r);
  }
  return SequenceStore(std::move(kept), store.schema_hash());
}

SequenceStore truncate_at(const SequenceStore& store, TimestampMs t_end) {
  std::vector<SequenceRecord> kept;
  for (const auto& r : store) {
    SequenceRecord out{r.entity_id, {}, false};
    for (const auto& e : r.events) {
      if (e.ts >= t_end) break;
      out.has_fraud = out.has_fraud || e.label == Label::kFraud;
      out.events.push_back(e);
    }
    if (!out.events.empty()) kept.push_back(std::move(out));
  }
  return SequenceStore(std::move(kept), store.schema_hash());
}

SequenceStore sort_by_length_desc(const SequenceStore& store) {
  std::vector<SequenceRecord> records = store.records();
  std::sort(records.begin(), records.end(), [](const SequenceRecord& a, const SequenceRecord& b) {
    if (a.events.size() != b.events.size()) return a.events.size() > b.events.size();
    return a.entity_id < b.entity_id;
  });
  return SequenceStore(std::move(records), store.schema_hash());
}

}  // namespace fraudseq
