#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "fraudseq/bounded_queue.hpp"
#include "fraudseq/model.hpp"
#include "fraudseq/pipeline.hpp"
#include "fraudseq/state_store.hpp"

namespace fraudseq {

/// LRU map whose pinned entries are never evicted. Inserting into a full
/// cache whose entries are all pinned blocks until an unpin frees a slot.
template <class Value>
class LruCache {
 public:
  explicit LruCache(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  std::optional<Value> get(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) {
      ++misses_;
      return std::nullopt;
    }
    ++hits_;
    order_.splice(order_.begin(), order_, it->second.pos);
    return it->second.value;
  }

  /// Stores value as most recent; pin adds one in-flight write to the entry.
  void put(const std::string& key, Value value, bool pin) {
    std::unique_lock lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) {
      slot_free_.wait(lock, [&] { return map_.size() < capacity_ || evict_one_locked(); });
      order_.push_front(key);
      it = map_.emplace(key, Entry{std::move(value), 0, order_.begin()}).first;
    } else {
      it->second.value = std::move(value);
      order_.splice(order_.begin(), order_, it->second.pos);
    }
    if (pin) ++it->second.pins;
    max_size_ = std::max(max_size_, map_.size());
  }

  void unpin(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    if (it != map_.end() && it->second.pins > 0 && --it->second.pins == 0) slot_free_.notify_all();
  }

  /// Drops unpinned entries matching pred; returns how many.
  template <class Pred>
  std::size_t erase_if(Pred pred) {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto it = map_.begin(); it != map_.end();) {
      if (it->second.pins == 0 && pred(it->first, it->second.value)) {
        order_.erase(it->second.pos);
        it = map_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    if (n) slot_free_.notify_all();
    return n;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return map_.size();
  }
  std::size_t pinned() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [k, e] : map_) n += e.pins > 0;
    return n;
  }
  std::size_t capacity() const { return capacity_; }
  std::size_t max_size() const {
    std::lock_guard lock(mu_);
    return max_size_;
  }
  std::uint64_t hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::uint64_t misses() const {
    std::lock_guard lock(mu_);
    return misses_;
  }

 private:
  struct Entry {
    Value value;
    int pins = 0;
    std::list<std::string>::iterator pos;
  };

  bool evict_one_locked() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto m = map_.find(*it);
      if (m->second.pins == 0) {
        order_.erase(std::next(it).base());
        map_.erase(m);
        return true;
      }
    }
    return false;
  }

  mutable std::mutex mu_;
  std::condition_variable slot_free_;
  std::size_t capacity_;
  std::list<std::string> order_;  // most recent first
  std::unordered_map<std::string, Entry> map_;
  std::size_t max_size_ = 0;
  std::uint64_t hits_ = 0, misses_ = 0;
};

/// Store settings for the engine's values: expiry reads the last-event
/// timestamp from the value.
StateStoreConfig entity_store_config();

enum class Probe { kWriteDiskAsync, kReadCacheOrDisk, kTotalPrediction };
inline constexpr std::array<Probe, 3> kAllProbes{Probe::kWriteDiskAsync, Probe::kReadCacheOrDisk,
                                                 Probe::kTotalPrediction};
std::string_view probe_name(Probe p);

struct ProbeRow {
  std::string name;
  std::size_t count = 0;
  // milliseconds
  double mean = 0, p99 = 0, p999 = 0, p9999 = 0, p99999 = 0;
};

/// Per-probe ring buffers of durations in milliseconds.
class LatencyProbes {
 public:
  explicit LatencyProbes(std::size_t capacity = 1u << 22) : capacity_(capacity) {}

  void record(Probe p, double ms);
  std::size_t count(Probe p) const;
  std::vector<double> samples(Probe p) const;
  void clear();
  /// Nearest-rank percentiles over the retained samples.
  std::vector<ProbeRow> report() const;

 private:
  struct Ring {
    std::vector<double> values;
    std::size_t next = 0;
    std::size_t total = 0;
  };
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::array<Ring, 3> rings_;
};

/// Fixed-column table, one row per probe.
std::string format_probe_table(const std::vector<ProbeRow>& rows);

struct StreamConfig {
  double threshold = 0.5;
  std::size_t cache_capacity = 15000;
  unsigned lanes = 0;  // 0: one per hardware thread
  std::size_t lane_queue_capacity = 1024;
  std::size_t write_queue_capacity = 4096;
  std::size_t write_batch = 256;
  /// Extra sleep before each write-behind batch, for tests.
  std::chrono::milliseconds write_delay{0};
  std::chrono::milliseconds ttl{std::chrono::hours(24 * 90)};
  std::uint64_t max_bytes = 1ull << 30;
};

struct StreamResult {
  std::string event_id;
  std::string entity_id;
  TimestampMs ts = 0;
  double score = 0;
  bool scorable = false;
  bool decision = false;  // block iff scorable and score >= threshold
  std::uint64_t ordinal = 0;
  double latency_us = 0;
  /// Replayed event whose update the store already holds; nothing was scored.
  bool duplicate = false;
};

/// Real-time scoring: fetch state (cache, then store, then zeros), run one
/// model step, put the new state in the cache and queue it for persistence.
///
/// score_event runs on the calling thread; submit routes events to serial
/// lanes by entity so one entity's events are applied in submission order.
/// Callers must not score the same entity from two threads at once.
///
/// Every processed event gets an ordinal, and the stored value of an entity
/// is [u64 ordinal of the last applied event][encoded EntityState]. The store
/// also keeps a watermark: the count of leading ordinals whose state is
/// durable. After a crash, replay the stream from the watermark; events whose
/// update already reached the store come back as duplicates.
template <class Scalar>
class StreamEngine {
 public:
  using Sink = std::function<void(const StreamResult&)>;

  StreamEngine(FittedPipeline pipeline, ModelParams<Scalar> params, StateStore& store, StreamConfig cfg = {});
  ~StreamEngine();
  StreamEngine(const StreamEngine&) = delete;
  StreamEngine& operator=(const StreamEngine&) = delete;

  StreamResult score_event(const RawEvent& e);

  /// Lane path; results go to the sink. submit blocks while the lane is full,
  /// try_submit throws QueueSaturated instead.
  void set_sink(Sink sink);
  void submit(RawEvent e);
  void try_submit(RawEvent e);
  /// Waits until every submitted event is scored; rethrows a lane failure.
  void drain();

  /// Waits until every queued state write is durable; returns how many
  /// writes completed since the previous call.
  std::size_t flush_writer();

  /// Persists in-flight writes, expires the store, then drops cache entries
  /// the store no longer holds. Returns the number of store evictions.
  std::size_t expiry_tick(TimestampMs now);

  std::uint64_t watermark() const;
  std::uint64_t next_ordinal() const { return next_ordinal_.load(); }
  std::uint64_t submitted() const { return submitted_.load(); }
  std::uint64_t completed() const { return completed_.load(); }
  std::size_t write_queue_depth() const { return write_queue_.size(); }
  std::size_t max_write_queue_depth() const { return max_write_depth_.load(); }
  std::size_t lane_count() const { return lanes_.size(); }

  /// State currently persisted (or queued in the store) for an entity.
  std::optional<EntityState<Scalar>> stored_state(const std::string& entity) const;

  struct Cached {
    EntityState<Scalar> state;
    std::optional<std::uint64_t> applied;
  };

  LatencyProbes& probes() { return probes_; }
  const LruCache<Cached>& cache() const { return cache_; }
  const StreamConfig& config() const { return cfg_; }
  const ModelParams<Scalar>& params() const { return params_; }
  const FittedPipeline& pipeline() const { return pipeline_; }

  static constexpr std::string_view kWatermarkKey = "watermark";

 private:
  struct WriteJob {
    std::string key;
    std::vector<std::uint8_t> value;
    std::uint64_t ordinal = 0;
  };
  struct Lane {
    explicit Lane(std::size_t cap) : queue(cap) {}
    BoundedQueue<std::pair<RawEvent, std::uint64_t>> queue;
    std::thread thread;
  };

  StreamResult process(const RawEvent& e, std::uint64_t ordinal);
  std::vector<std::uint8_t> encode_entry(const Cached& c) const;
  Cached decode_entry(std::span<const std::uint8_t> bytes) const;
  void lane_loop(Lane& lane);
  void writer_loop();
  void fail_lane(std::exception_ptr e);
  void mark_done_locked(std::uint64_t ordinal);
  std::size_t lane_of(const std::string& entity) const;
  void rethrow_failure();

  FittedPipeline pipeline_;
  ModelParams<Scalar> params_;
  StateStore& store_;
  StreamConfig cfg_;
  LruCache<Cached> cache_;
  LatencyProbes probes_;

  std::atomic<std::uint64_t> next_ordinal_{0};
  std::atomic<std::uint64_t> submitted_{0};
  std::atomic<std::uint64_t> completed_{0};

  BoundedQueue<WriteJob> write_queue_;
  std::atomic<std::size_t> max_write_depth_{0};
  std::thread writer_;
  mutable std::mutex write_mu_;
  std::condition_variable write_cv_;
  std::uint64_t writes_enqueued_ = 0;
  std::uint64_t writes_done_ = 0;
  std::uint64_t writes_reported_ = 0;
  std::uint64_t watermark_ = 0;
  std::set<std::uint64_t> done_ahead_;  // finished ordinals past the watermark
  std::exception_ptr writer_error_;

  std::vector<std::unique_ptr<Lane>> lanes_;
  Sink sink_;
  std::mutex drain_mu_;
  std::condition_variable drain_cv_;
  std::exception_ptr lane_error_;
};

struct BenchConfig {
  double rate = 500;  // events per second
  std::chrono::milliseconds duration{std::chrono::seconds(60)};
  /// Submitted-but-unscored events allowed before giving up.
  std::size_t max_backlog = 5000;
  /// How far the injector may fall behind its schedule.
  std::chrono::milliseconds max_lag{2000};
};

struct BenchReport {
  std::vector<ProbeRow> rows;
  std::size_t events = 0;
  double elapsed_s = 0;
  std::size_t max_backlog = 0;
  std::size_t max_write_queue_depth = 0;
};

/// Paced injection of events at cfg.rate for cfg.duration. The source is
/// replayed with shifted timestamps if it runs out. Throws RateUnsustainable
/// when the backlog or the schedule lag exceeds its bound.
template <class Scalar>
BenchReport run_bench(StreamEngine<Scalar>& engine, std::span<const RawEvent> source, const BenchConfig& cfg);

std::string format_bench_report(const BenchReport& r);

}  // namespace fraudseq
