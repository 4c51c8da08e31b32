#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "fraudseq/schema.hpp"

namespace fraudseq {

struct StateStoreConfig {
  std::chrono::milliseconds flush_interval{50};
  std::size_t flush_records = 256;
  bool fsync = true;
  /// Simulated device size for tests; 0 means unlimited.
  std::uint64_t max_file_bytes = 0;
  /// Pulls the last-event timestamp out of a value, for expiry.
  std::function<std::optional<TimestampMs>(std::span<const std::uint8_t>)> timestamp_of;
};

struct RecoveryStats {
  std::size_t records = 0;
  std::size_t corrupt = 0;
  std::uint64_t truncated_bytes = 0;
};

struct CompactStats {
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
  std::size_t live_keys = 0;
};

/// Embedded key-value store: one append-only log plus an in-memory index.
///
/// Log layout (little-endian): "FSKV" magic, u32 version, then records
///   [key_len u32][key][val_len u32][val][version u64][crc32 u32]
/// where val_len 0xFFFFFFFF marks a deletion (no value bytes follow) and the
/// CRC covers every preceding byte of the record. Versions come from one
/// store-wide counter, so they increase per key.
///
/// put() queues the record and returns its sequence number; a writer thread
/// appends queued records in groups and syncs them. sync(seq) waits until seq
/// is durable. Reads see queued values immediately.
class StateStore {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr std::uint32_t kTombstone = 0xFFFFFFFFu;
  /// Keys starting with this byte are internal and never expire.
  static constexpr char kMetaPrefix = '\0';

  explicit StateStore(std::string path, StateStoreConfig cfg = {});
  ~StateStore();
  StateStore(const StateStore&) = delete;
  StateStore& operator=(const StateStore&) = delete;

  std::uint64_t put(std::string_view key, std::span<const std::uint8_t> value);
  std::uint64_t erase(std::string_view key);
  std::optional<std::vector<std::uint8_t>> get(std::string_view key) const;

  void put_meta(std::string_view name, std::span<const std::uint8_t> value);
  std::optional<std::vector<std::uint8_t>> get_meta(std::string_view name) const;

  /// Blocks until every record up to seq is on disk.
  void sync(std::uint64_t seq);
  void flush();
  std::uint64_t durable_seq() const;
  std::uint64_t last_seq() const;

  /// Rewrites the log with only the latest live record per key.
  CompactStats compact();

  /// Deletes keys whose last-event timestamp is older than now - ttl, then
  /// the oldest keys until live bytes fit max_bytes. Pending writes are made
  /// durable first so they are judged on their final values.
  std::size_t expire(TimestampMs now, std::chrono::milliseconds ttl, std::uint64_t max_bytes);

  void close();
  bool closed() const;

  std::size_t size() const;          // live entity keys, meta keys excluded
  std::uint64_t live_bytes() const;  // sum of live record sizes
  std::uint64_t file_bytes() const;
  std::vector<std::string> keys() const;
  const RecoveryStats& recovery_stats() const { return recovery_; }
  const std::string& path() const { return path_; }

  /// Size of a record on disk.
  static std::uint64_t record_size(std::size_t key_len, std::optional<std::size_t> val_len);

 private:
  struct IndexEntry {
    std::uint64_t offset = 0;  // start of record
    std::uint64_t version = 0;
    std::uint32_t key_len = 0;
    std::uint32_t val_len = 0;
    std::optional<TimestampMs> ts;
  };
  struct Op {
    std::string key;
    std::shared_ptr<const std::vector<std::uint8_t>> value;  // null: deletion
    std::uint64_t seq = 0;
  };
  struct Pending {
    std::uint64_t seq = 0;
    std::shared_ptr<const std::vector<std::uint8_t>> value;
  };

  void recover();
  void writer_loop();
  void write_batch(std::vector<Op>& batch);
  std::uint64_t enqueue(std::string_view key, std::shared_ptr<const std::vector<std::uint8_t>> value);
  std::vector<std::uint8_t> read_value(const IndexEntry& e) const;
  void check_error_locked() const;
  std::optional<TimestampMs> ts_of(std::span<const std::uint8_t> v) const;

  std::string path_;
  StateStoreConfig cfg_;
  int fd_ = -1;
  RecoveryStats recovery_;

  // index and file geometry; shared for readers
  mutable std::shared_mutex index_mu_;
  std::unordered_map<std::string, IndexEntry> index_;
  std::uint64_t file_end_ = 0;
  std::uint64_t live_bytes_ = 0;

  // serializes log appends against compaction
  std::mutex io_mu_;

  // queue, pending values, sequence numbers
  mutable std::mutex mu_;
  std::condition_variable writer_cv_;
  mutable std::condition_variable durable_cv_;
  std::vector<Op> queue_;
  std::unordered_map<std::string, Pending> pending_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t durable_seq_ = 0;
  std::uint64_t sync_requested_ = 0;
  bool stop_ = false;
  bool closed_ = false;
  std::optional<std::pair<int, std::string>> error_;  // ErrorCode as int, message

  std::thread writer_;
};

}  // namespace fraudseq
