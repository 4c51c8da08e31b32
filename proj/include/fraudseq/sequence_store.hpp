#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fraudseq/pipeline.hpp"
#include "fraudseq/schema.hpp"
#include "fraudseq/transforms.hpp"

namespace fraudseq {

struct SequenceEvent {
  std::string event_id;
  TimestampMs ts = 0;
  Label label = Label::kUnknown;
  bool scorable = false;
  FeatureVector features;

  friend bool operator==(const SequenceEvent&, const SequenceEvent&) = default;
};

/// One entity's events in chronological order, stored post-transform.
struct SequenceRecord {
  std::string entity_id;
  std::vector<SequenceEvent> events;
  bool has_fraud = false;

  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

/// Immutable ordered collection of sequences.
class SequenceStore {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  SequenceStore() = default;
  SequenceStore(std::vector<SequenceRecord> records, std::uint64_t schema_hash)
      : records_(std::move(records)), schema_hash_(schema_hash) {}

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const SequenceRecord& operator[](std::size_t i) const { return records_[i]; }
  const SequenceRecord& at(std::size_t i) const { return records_.at(i); }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }
  const std::vector<SequenceRecord>& records() const { return records_; }
  std::uint64_t schema_hash() const { return schema_hash_; }
  std::size_t total_events() const;

  /// Deterministic bytes: header (magic, version, count, schema hash) then
  /// [ordinal u64][len u32][payload] per record.
  std::vector<std::uint8_t> serialize() const;
  static SequenceStore deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static SequenceStore load(const std::string& path);

 private:
  std::vector<SequenceRecord> records_;
  std::uint64_t schema_hash_ = 0;
};

/// Random access by ordinal over a saved store without materializing it.
class SequenceFileReader {
 public:
  explicit SequenceFileReader(const std::string& path);

  std::size_t size() const { return offsets_.size(); }
  std::uint64_t schema_hash() const { return schema_hash_; }
  SequenceRecord read(std::size_t ordinal) const;
  /// Records start, start+1, ... wrapping at the end; count records in total.
  std::vector<SequenceRecord> scan(std::size_t start, std::size_t count) const;

 private:
  std::vector<std::uint8_t> bytes_;
  std::vector<std::pair<std::size_t, std::uint32_t>> offsets_;
  std::uint64_t schema_hash_ = 0;
};

/// Groups by entity, sorts by (ts, input order) and applies the pipeline with
/// the entity gap computed along the way. Records are ordered by entity id.
SequenceStore build_sequences(std::span<const RawEvent> events, const FittedPipeline& pipeline);

std::pair<SequenceStore, SequenceStore> split_fraud(const SequenceStore& store);

/// Keeps whole sequences that have at least one event in [t0, t1).
SequenceStore filter_by_period(const SequenceStore& store, TimestampMs t0, TimestampMs t1);

/// Drops every event at or after t_end, then sequences left empty. This is
/// the training view of a store whose later events belong to validation.
SequenceStore truncate_at(const SequenceStore& store, TimestampMs t_end);

/// Longest first; equal lengths ordered by entity id.
SequenceStore sort_by_length_desc(const SequenceStore& store);

}  // namespace fraudseq
