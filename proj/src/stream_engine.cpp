#include "fraudseq/stream_engine.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <sstream>

#include "fraudseq/error.hpp"
#include "fraudseq/gru.hpp"
#include "fraudseq/metrics.hpp"
#include "fraudseq/model_io.hpp"

namespace fraudseq {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::uint8_t> encode_u64(std::uint64_t v) {
  std::vector<std::uint8_t> b(8);
  std::memcpy(b.data(), &v, 8);
  return b;
}

}  // namespace

StateStoreConfig entity_store_config() {
  StateStoreConfig c;
  c.timestamp_of = [](std::span<const std::uint8_t> v) -> std::optional<TimestampMs> {
    if (v.size() < 8) return std::nullopt;
    return peek_state_timestamp(v.subspan(8));
  };
  return c;
}

std::string_view probe_name(Probe p) {
  switch (p) {
    case Probe::kWriteDiskAsync: return "write_disk_async";
    case Probe::kReadCacheOrDisk: return "read_cache_or_disk";
    case Probe::kTotalPrediction: return "total_prediction";
  }
  return "?";
}

void LatencyProbes::record(Probe p, double ms) {
  std::lock_guard lock(mu_);
  auto& r = rings_[static_cast<std::size_t>(p)];
  if (r.values.size() < capacity_) {
    r.values.push_back(ms);
  } else {
    r.values[r.next] = ms;
    r.next = (r.next + 1) % capacity_;
  }
  ++r.total;
}

std::size_t LatencyProbes::count(Probe p) const {
  std::lock_guard lock(mu_);
  return rings_[static_cast<std::size_t>(p)].total;
}

std::vector<double> LatencyProbes::samples(Probe p) const {
  std::lock_guard lock(mu_);
  return rings_[static_cast<std::size_t>(p)].values;
}

void LatencyProbes::clear() {
  std::lock_guard lock(mu_);
  for (auto& r : rings_) r = Ring{};
}

std::vector<ProbeRow> LatencyProbes::report() const {
  std::vector<ProbeRow> rows;
  for (Probe p : kAllProbes) {
    const auto v = samples(p);
    ProbeRow row;
    row.name = probe_name(p);
    row.count = v.size();
    if (!v.empty()) {
      row.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      row.p99 = nearest_rank(v, 99);
      row.p999 = nearest_rank(v, 99.9);
      row.p9999 = nearest_rank(v, 99.99);
      row.p99999 = nearest_rank(v, 99.999);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_probe_table(const std::vector<ProbeRow>& rows) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %10s %10s %10s %10s %10s %10s\n", "probe (ms)", "count", "mean", "99",
                "99.9", "99.99", "99.999");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %10zu %10.4f %10.4f %10.4f %10.4f %10.4f\n", r.name.c_str(), r.count, r.mean,
                  r.p99, r.p999, r.p9999, r.p99999);
    out << buf;
  }
  return out.str();
}

template <class Scalar>
StreamEngine<Scalar>::StreamEngine(FittedPipeline pipeline, ModelParams<Scalar> params, StateStore& store,
                                   StreamConfig cfg)
    : pipeline_(std::move(pipeline)),
      params_(std::move(params)),
      store_(store),
      cfg_(cfg),
      cache_(cfg.cache_capacity),
      write_queue_(cfg.write_queue_capacity) {
  if (pipeline_.schema_hash() != params_.config.schema_hash) {
    fail(ErrorCode::kSchemaMismatch, "pipeline and model were built for different schemas");
  }
  if (cfg_.write_batch == 0) fail(ErrorCode::kInvalidConfig, "write_batch must be >= 1");
  if (const auto wm = store_.get_meta(kWatermarkKey); wm && wm->size() == 8) {
    std::memcpy(&watermark_, wm->data(), 8);
  }
  next_ordinal_ = watermark_;
  writer_ = std::thread([this] { writer_loop(); });
  unsigned n = cfg_.lanes ? cfg_.lanes : std::max(1u, std::thread::hardware_concurrency());
  for (unsigned i = 0; i < n; ++i) {
    lanes_.push_back(std::make_unique<Lane>(cfg_.lane_queue_capacity));
    Lane& lane = *lanes_.back();
    lane.thread = std::thread([this, &lane] { lane_loop(lane); });
  }
}

template <class Scalar>
StreamEngine<Scalar>::~StreamEngine() {
  for (auto& l : lanes_) l->queue.close();
  for (auto& l : lanes_) {
    if (l->thread.joinable()) l->thread.join();
  }
  write_queue_.close();
  if (writer_.joinable()) writer_.join();
}

template <class Scalar>
StreamResult StreamEngine<Scalar>::process(const RawEvent& e, std::uint64_t ordinal) {
  const auto t0 = Clock::now();
  Cached entry;
  if (auto cached = cache_.get(e.entity_id)) {
    entry = std::move(*cached);
  } else if (auto bytes = store_.get(e.entity_id)) {
    entry = decode_entry(*bytes);
  } else {
    entry.state = EntityState<Scalar>::fresh(params_.config);
  }
  probes_.record(Probe::kReadCacheOrDisk, ms_since(t0));

  StreamResult r;
  r.event_id = e.event_id;
  r.entity_id = e.entity_id;
  r.ts = e.ts();
  r.scorable = e.scorable;
  r.ordinal = ordinal;
  if (entry.applied && *entry.applied >= ordinal) {
    // a replay after a crash: this event's update already reached the store
    r.duplicate = true;
    r.latency_us = ms_since(t0) * 1000.0;
    probes_.record(Probe::kTotalPrediction, r.latency_us / 1000.0);
    return r;
  }
  auto& state = entry.state;

  const FeatureVector fv = pipeline_.apply(e, state.last_event_ts);
  const Scalar score = model_step(params_, fv, state);
  state.last_event_ts = e.ts();

  entry.applied = ordinal;
  WriteJob job{e.entity_id, encode_entry(entry), ordinal};
  cache_.put(e.entity_id, std::move(entry), true);
  {
    std::lock_guard lock(write_mu_);
    ++writes_enqueued_;
  }
  if (!write_queue_.push(std::move(job))) fail(ErrorCode::kClosed, "stream engine is shutting down");
  const auto depth = write_queue_.size();
  auto seen = max_write_depth_.load();
  while (depth > seen && !max_write_depth_.compare_exchange_weak(seen, depth)) {
  }

  r.score = static_cast<double>(score);
  r.decision = e.scorable && r.score >= cfg_.threshold;
  const double total = ms_since(t0);
  r.latency_us = total * 1000.0;
  probes_.record(Probe::kTotalPrediction, total);
  return r;
}

template <class Scalar>
std::vector<std::uint8_t> StreamEngine<Scalar>::encode_entry(const Cached& c) const {
  auto out = encode_u64(*c.applied);
  const auto state = encode_state(c.state, params_.config.schema_hash);
  out.insert(out.end(), state.begin(), state.end());
  return out;
}

template <class Scalar>
typename StreamEngine<Scalar>::Cached StreamEngine<Scalar>::decode_entry(std::span<const std::uint8_t> bytes) const {
  if (bytes.size() < 8) fail(ErrorCode::kCorruptRecord, "entity value too short");
  Cached c;
  std::uint64_t applied;
  std::memcpy(&applied, bytes.data(), 8);
  c.applied = applied;
  c.state = decode_state<Scalar>(bytes.subspan(8), params_.config.schema_hash);
  return c;
}

template <class Scalar>
std::optional<EntityState<Scalar>> StreamEngine<Scalar>::stored_state(const std::string& entity) const {
  const auto bytes = store_.get(entity);
  if (!bytes) return std::nullopt;
  return decode_entry(*bytes).state;
}

template <class Scalar>
StreamResult StreamEngine<Scalar>::score_event(const RawEvent& e) {
  rethrow_failure();
  return process(e, next_ordinal_++);
}

template <class Scalar>
void StreamEngine<Scalar>::writer_loop() {
  std::vector<WriteJob> batch;
  for (;;) {
    batch.clear();
    if (write_queue_.pop_batch(batch, cfg_.write_batch) == 0) return;
    const auto t0 = Clock::now();
    try {
      if (cfg_.write_delay.count() > 0) std::this_thread::sleep_for(cfg_.write_delay);
      for (const auto& job : batch) store_.put(job.key, job.value);
      std::uint64_t wm;
      {
        std::lock_guard lock(write_mu_);
        for (const auto& job : batch) mark_done_locked(job.ordinal);
        wm = watermark_;
      }
      store_.put_meta(kWatermarkKey, encode_u64(wm));
      store_.flush();
    } catch (...) {
      std::lock_guard lock(write_mu_);
      writer_error_ = std::current_exception();
      writes_done_ = writes_enqueued_;  // wake waiters; the error is rethrown
      write_cv_.notify_all();
      for (const auto& job : batch) cache_.unpin(job.key);
      // keep draining so producers never block on a dead writer
      continue;
    }
    const double ms = ms_since(t0);
    for (const auto& job : batch) {
      probes_.record(Probe::kWriteDiskAsync, ms);
      cache_.unpin(job.key);
    }
    std::lock_guard lock(write_mu_);
    writes_done_ += batch.size();
    write_cv_.notify_all();
  }
}

template <class Scalar>
void StreamEngine<Scalar>::mark_done_locked(std::uint64_t ordinal) {
  if (ordinal != watermark_) {
    done_ahead_.insert(ordinal);
    return;
  }
  ++watermark_;
  while (!done_ahead_.empty() && *done_ahead_.begin() == watermark_) {
    done_ahead_.erase(done_ahead_.begin());
    ++watermark_;
  }
}

template <class Scalar>
std::size_t StreamEngine<Scalar>::flush_writer() {
  std::unique_lock lock(write_mu_);
  write_cv_.wait(lock, [&] { return writes_done_ >= writes_enqueued_; });
  if (writer_error_) std::rethrow_exception(writer_error_);
  const auto n = writes_done_ - writes_reported_;
  writes_reported_ = writes_done_;
  return static_cast<std::size_t>(n);
}

template <class Scalar>
std::uint64_t StreamEngine<Scalar>::watermark() const {
  std::lock_guard lock(write_mu_);
  return watermark_;
}

template <class Scalar>
std::size_t StreamEngine<Scalar>::expiry_tick(TimestampMs now) {
  flush_writer();
  const auto evicted = store_.expire(now, cfg_.ttl, cfg_.max_bytes);
  const TimestampMs cutoff = now - cfg_.ttl.count();
  cache_.erase_if([&](const std::string& key, const Cached& c) {
    return (c.state.last_event_ts && *c.state.last_event_ts < cutoff) || !store_.get(key).has_value();
  });
  return evicted;
}

template <class Scalar>
std::size_t StreamEngine<Scalar>::lane_of(const std::string& entity) const {
  return static_cast<std::size_t>(fnv1a(entity) % lanes_.size());
}

template <class Scalar>
void StreamEngine<Scalar>::set_sink(Sink sink) {
  sink_ = std::move(sink);
}

template <class Scalar>
void StreamEngine<Scalar>::submit(RawEvent e) {
  rethrow_failure();
  auto& lane = *lanes_[lane_of(e.entity_id)];
  ++submitted_;
  if (!lane.queue.push({std::move(e), next_ordinal_++})) {
    --submitted_;
    fail(ErrorCode::kClosed, "stream engine is shutting down");
  }
}

template <class Scalar>
void StreamEngine<Scalar>::try_submit(RawEvent e) {
  rethrow_failure();
  auto& lane = *lanes_[lane_of(e.entity_id)];
  ++submitted_;
  const auto ordinal = next_ordinal_++;
  if (!lane.queue.try_push({std::move(e), ordinal})) {
    --submitted_;
    {
      // nothing will be written for this ordinal
      std::lock_guard lock(write_mu_);
      mark_done_locked(ordinal);
    }
    fail(ErrorCode::kQueueSaturated, "lane queue is full");
  }
}

template <class Scalar>
void StreamEngine<Scalar>::lane_loop(Lane& lane) {
  while (auto job = lane.queue.pop()) {
    try {
      const auto r = process(job->first, job->second);
      if (sink_) sink_(r);
    } catch (...) {
      fail_lane(std::current_exception());
    }
    ++completed_;
    std::lock_guard lock(drain_mu_);
    drain_cv_.notify_all();
  }
}

template <class Scalar>
void StreamEngine<Scalar>::fail_lane(std::exception_ptr e) {
  std::lock_guard lock(drain_mu_);
  if (!lane_error_) lane_error_ = e;
}

template <class Scalar>
void StreamEngine<Scalar>::rethrow_failure() {
  std::lock_guard lock(drain_mu_);
  if (lane_error_) std::rethrow_exception(lane_error_);
}

template <class Scalar>
void StreamEngine<Scalar>::drain() {
  {
    std::unique_lock lock(drain_mu_);
    drain_cv_.wait(lock, [&] { return completed_.load() >= submitted_.load(); });
  }
  rethrow_failure();
}

template <class Scalar>
BenchReport run_bench(StreamEngine<Scalar>& engine, std::span<const RawEvent> source, const BenchConfig& cfg) {
  BenchReport report;
  if (cfg.duration.count() <= 0 || source.empty()) return report;
  if (!(cfg.rate > 0)) fail(ErrorCode::kInvalidConfig, "bench rate must be positive");
  engine.probes().clear();

  const TimestampMs span_ms = source.back().ts() - source.front().ts() + 1000;
  const auto total = static_cast<std::size_t>(cfg.rate * std::chrono::duration<double>(cfg.duration).count());
  const auto start = Clock::now();
  const auto base_submitted = engine.submitted();
  const auto base_completed = engine.completed();
  for (std::size_t i = 0; i < total; ++i) {
    const auto due = start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(i / cfg.rate));
    std::this_thread::sleep_until(due);
    if (Clock::now() - due > cfg.max_lag) {
      fail(ErrorCode::kRateUnsustainable, "injector fell behind schedule at event " + std::to_string(i));
    }
    RawEvent e = source[i % source.size()];
    const auto round = static_cast<TimestampMs>(i / source.size());
    if (round > 0) {
      // later passes replay the source shifted forward in time
      *e.event_ts += round * span_ms;
      for (auto& [name, ts] : e.timestamps) {
        if (ts) *ts += round * span_ms;
      }
      e.event_id += "#" + std::to_string(round);
    }
    const std::size_t backlog = (engine.submitted() - base_submitted) - (engine.completed() - base_completed);
    report.max_backlog = std::max(report.max_backlog, backlog);
    if (backlog > cfg.max_backlog) {
      fail(ErrorCode::kRateUnsustainable, "backlog of " + std::to_string(backlog) + " events at event " +
                                              std::to_string(i));
    }
    try {
      engine.try_submit(std::move(e));
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kQueueSaturated) throw;
      fail(ErrorCode::kRateUnsustainable, "lane queue saturated at event " + std::to_string(i));
    }
  }
  engine.drain();
  engine.flush_writer();
  report.elapsed_s = std::chrono::duration<double>(Clock::now() - start).count();
  report.events = total;
  report.rows = engine.probes().report();
  report.max_write_queue_depth = engine.max_write_queue_depth();
  return report;
}

std::string format_bench_report(const BenchReport& r) {
  std::ostringstream out;
  char buf[200];
  std::snprintf(buf, sizeof buf, "events=%zu elapsed_s=%.3f rate=%.1f max_backlog=%zu max_write_queue=%zu\n", r.events,
                r.elapsed_s, r.elapsed_s > 0 ? static_cast<double>(r.events) / r.elapsed_s : 0.0, r.max_backlog,
                r.max_write_queue_depth);
  out << buf << format_probe_table(r.rows);
  return out.str();
}

template class StreamEngine<float>;
template class StreamEngine<double>;
template BenchReport run_bench<float>(StreamEngine<float>&, std::span<const RawEvent>, const BenchConfig&);
template BenchReport run_bench<double>(StreamEngine<double>&, std::span<const RawEvent>, const BenchConfig&);

}  // namespace fraudseq
