#include "fraudseq/state_store.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>

#include "fraudseq/binary_io.hpp"
#include "fraudseq/error.hpp"

namespace fraudseq {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'K', 'V'};
constexpr std::uint64_t kHeaderSize = 8;

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::string meta_key(std::string_view name) {
  std::string k(1, StateStore::kMetaPrefix);
  k += name;
  return k;
}

bool is_meta(std::string_view key) { return !key.empty() && key[0] == StateStore::kMetaPrefix; }

void encode_record(binary::Writer& w, std::string_view key, const std::vector<std::uint8_t>* value,
                   std::uint64_t version) {
  const auto start = w.bytes().size();
  w.put(static_cast<std::uint32_t>(key.size()));
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(key.data()), key.size()});
  if (value) {
    w.put(static_cast<std::uint32_t>(value->size()));
    w.put_bytes(*value);
  } else {
    w.put(StateStore::kTombstone);
  }
  w.put(version);
  const std::span<const std::uint8_t> body(w.bytes().data() + start, w.bytes().size() - start);
  w.put(crc(body));
}

void pread_all(int fd, std::uint8_t* buf, std::size_t n, std::uint64_t off) {
  while (n > 0) {
    const auto r = ::pread(fd, buf, n, static_cast<off_t>(off));
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) fail(ErrorCode::kIo, std::string("state store read: ") + (r == 0 ? "short read" : std::strerror(errno)));
    buf += r;
    n -= static_cast<std::size_t>(r);
    off += static_cast<std::uint64_t>(r);
  }
}

void pwrite_all(int fd, const std::uint8_t* buf, std::size_t n, std::uint64_t off) {
  while (n > 0) {
    const auto r = ::pwrite(fd, buf, n, static_cast<off_t>(off));
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) {
      fail(errno == ENOSPC ? ErrorCode::kDiskFull : ErrorCode::kIo, std::string("state store write: ") + std::strerror(errno));
    }
    buf += r;
    n -= static_cast<std::size_t>(r);
    off += static_cast<std::uint64_t>(r);
  }
}

void sync_fd(int fd) {
  if (::fdatasync(fd) != 0) fail(ErrorCode::kIo, std::string("fdatasync: ") + std::strerror(errno));
}

void sync_dir(const std::string& path) {
  const auto dir = std::filesystem::path(path).parent_path();
  const int d = ::open(dir.empty() ? "." : dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (d >= 0) {
    ::fsync(d);
    ::close(d);
  }
}

/// Sequential buffered reader over a file descriptor.
class ScanReader {
 public:
  ScanReader(int fd, std::uint64_t start, std::uint64_t end) : fd_(fd), pos_(start), end_(end) {}

  std::uint64_t position() const { return pos_; }
  std::uint64_t remaining() const { return end_ - pos_; }

  /// Copies n bytes into out, false if the file ends first.
  bool read(std::size_t n, std::vector<std::uint8_t>& out) {
    if (remaining() < n) return false;
    const auto old = out.size();
    out.resize(old + n);
    pread_all(fd_, out.data() + old, n, pos_);
    pos_ += n;
    return true;
  }

 private:
  int fd_;
  std::uint64_t pos_, end_;
};

template <class T>
T load(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

std::uint64_t StateStore::record_size(std::size_t key_len, std::optional<std::size_t> val_len) {
  return 4 + key_len + 4 + val_len.value_or(0) + 8 + 4;
}

StateStore::StateStore(std::string path, StateStoreConfig cfg) : path_(std::move(path)), cfg_(std::move(cfg)) {
  if (cfg_.flush_records == 0) cfg_.flush_records = 1;
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) fail(ErrorCode::kUnreadableLog, "cannot open " + path_ + ": " + std::strerror(errno));
  try {
    recover();
  } catch (...) {
    ::close(fd_);
    throw;
  }
  writer_ = std::thread([this] { writer_loop(); });
}

StateStore::~StateStore() {
  try {
    close();
  } catch (...) {
  }
}

std::optional<TimestampMs> StateStore::ts_of(std::span<const std::uint8_t> v) const {
  return cfg_.timestamp_of ? cfg_.timestamp_of(v) : std::nullopt;
}

void StateStore::recover() {
  struct stat st{};
  if (::fstat(fd_, &st) != 0) fail(ErrorCode::kUnreadableLog, "cannot stat " + path_);
  const auto size = static_cast<std::uint64_t>(st.st_size);
  if (size == 0) {
    binary::Writer w;
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    w.put(kFormatVersion);
    pwrite_all(fd_, w.bytes().data(), w.bytes().size(), 0);
    sync_fd(fd_);
    file_end_ = kHeaderSize;
    return;
  }
  if (size < kHeaderSize) fail(ErrorCode::kUnreadableLog, path_ + " is too short for a header");
  std::uint8_t header[kHeaderSize];
  pread_all(fd_, header, kHeaderSize, 0);
  if (std::memcmp(header, kMagic, 4) != 0 || load<std::uint32_t>(header + 4) != kFormatVersion) {
    fail(ErrorCode::kUnreadableLog, path_ + " is not a state log");
  }

  ScanReader in(fd_, kHeaderSize, size);
  std::vector<std::uint8_t> rec;
  std::uint64_t max_version = 0;
  std::uint64_t good_end = kHeaderSize;
  while (in.remaining() > 0) {
    const std::uint64_t start = in.position();
    rec.clear();
    if (!in.read(4, rec)) break;
    const auto key_len = load<std::uint32_t>(rec.data());
    if (!in.read(key_len, rec) || !in.read(4, rec)) break;
    const auto val_len = load<std::uint32_t>(rec.data() + 4 + key_len);
    const bool tomb = val_len == kTombstone;
    if (!tomb && !in.read(val_len, rec)) break;
    if (!in.read(12, rec)) break;
    good_end = in.position();
    const auto body = std::span<const std::uint8_t>(rec.data(), rec.size() - 4);
    if (crc(body) != load<std::uint32_t>(rec.data() + rec.size() - 4)) {
      ++recovery_.corrupt;  // key keeps whatever earlier version the index has
      continue;
    }
    const auto version = load<std::uint64_t>(rec.data() + rec.size() - 12);
    max_version = std::max(max_version, version);
    std::string key(reinterpret_cast<const char*>(rec.data() + 4), key_len);
    auto it = index_.find(key);
    if (it != index_.end() && it->second.version > version) continue;
    if (it != index_.end()) live_bytes_ -= record_size(it->second.key_len, it->second.val_len);
    if (tomb) {
      if (it != index_.end()) index_.erase(it);
    } else {
      const std::span<const std::uint8_t> value(rec.data() + 8 + key_len, val_len);
      IndexEntry e{start, version, key_len, val_len, is_meta(key) ? std::nullopt : ts_of(value)};
      index_[std::move(key)] = e;
      live_bytes_ += record_size(key_len, val_len);
    }
    ++recovery_.records;
  }
  if (good_end < size) {
    recovery_.truncated_bytes = size - good_end;
    if (::ftruncate(fd_, static_cast<off_t>(good_end)) != 0) {
      fail(ErrorCode::kUnreadableLog, "cannot truncate torn tail of " + path_);
    }
    sync_fd(fd_);
  }
  file_end_ = good_end;
  next_seq_ = max_version + 1;
  durable_seq_ = max_version;
}

void StateStore::check_error_locked() const {
  if (error_) throw Error(static_cast<ErrorCode>(error_->first), error_->second);
}

std::uint64_t StateStore::enqueue(std::string_view key, std::shared_ptr<const std::vector<std::uint8_t>> value) {
  if (key.size() >= kTombstone) fail(ErrorCode::kInvalidConfig, "key too long");
  if (value && value->size() >= kTombstone) fail(ErrorCode::kInvalidConfig, "value too long");
  std::lock_guard lock(mu_);
  if (closed_) fail(ErrorCode::kClosed, "state store is closed");
  check_error_locked();
  const std::uint64_t seq = next_seq_++;
  std::string k(key);
  pending_[k] = {seq, value};
  queue_.push_back({std::move(k), std::move(value), seq});
  if (queue_.size() == 1 || queue_.size() >= cfg_.flush_records) writer_cv_.notify_one();
  return seq;
}

std::uint64_t StateStore::put(std::string_view key, std::span<const std::uint8_t> value) {
  return enqueue(key, std::make_shared<const std::vector<std::uint8_t>>(value.begin(), value.end()));
}

std::uint64_t StateStore::erase(std::string_view key) { return enqueue(key, nullptr); }

std::optional<std::vector<std::uint8_t>> StateStore::get(std::string_view key) const {
  const std::string k(key);
  {
    std::lock_guard lock(mu_);
    if (closed_) fail(ErrorCode::kClosed, "state store is closed");
    if (auto it = pending_.find(k); it != pending_.end()) {
      if (!it->second.value) return std::nullopt;
      return *it->second.value;
    }
  }
  std::shared_lock lock(index_mu_);
  const auto it = index_.find(k);
  if (it == index_.end()) return std::nullopt;
  return read_value(it->second);
}

std::vector<std::uint8_t> StateStore::read_value(const IndexEntry& e) const {
  std::vector<std::uint8_t> rec(record_size(e.key_len, e.val_len));
  pread_all(fd_, rec.data(), rec.size(), e.offset);
  const auto body = std::span<const std::uint8_t>(rec.data(), rec.size() - 4);
  if (crc(body) != load<std::uint32_t>(rec.data() + rec.size() - 4)) {
    fail(ErrorCode::kCorruptRecord, "checksum mismatch at offset " + std::to_string(e.offset));
  }
  const auto begin = rec.begin() + 8 + e.key_len;
  return {begin, begin + e.val_len};
}

void StateStore::put_meta(std::string_view name, std::span<const std::uint8_t> value) { put(meta_key(name), value); }

std::optional<std::vector<std::uint8_t>> StateStore::get_meta(std::string_view name) const {
  return get(meta_key(name));
}

void StateStore::writer_loop() {
  std::vector<Op> batch;
  for (;;) {
    {
      std::unique_lock lock(mu_);
      writer_cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
      if (queue_.empty() && stop_) return;
      // group commit: wait for a full group, a sync request or the interval
      writer_cv_.wait_for(lock, cfg_.flush_interval, [&] {
        return stop_ || queue_.size() >= cfg_.flush_records || sync_requested_ > durable_seq_;
      });
      batch.swap(queue_);
    }
    try {
      write_batch(batch);
    } catch (const Error& e) {
      std::lock_guard lock(mu_);
      error_ = {static_cast<int>(e.code()), e.what()};
      durable_cv_.notify_all();
      return;
    }
    std::lock_guard lock(mu_);
    for (const auto& op : batch) {
      auto it = pending_.find(op.key);
      if (it != pending_.end() && it->second.seq == op.seq) pending_.erase(it);
    }
    durable_seq_ = batch.back().seq;
    durable_cv_.notify_all();
    batch.clear();
  }
}

void StateStore::write_batch(std::vector<Op>& batch) {
  binary::Writer w;
  std::vector<std::uint64_t> offsets;
  offsets.reserve(batch.size());
  std::lock_guard io(io_mu_);
  const std::uint64_t base = file_end_;
  for (const auto& op : batch) {
    offsets.push_back(base + w.bytes().size());
    encode_record(w, op.key, op.value.get(), op.seq);
  }
  if (cfg_.max_file_bytes && base + w.bytes().size() > cfg_.max_file_bytes) {
    fail(ErrorCode::kDiskFull, "state log would exceed " + std::to_string(cfg_.max_file_bytes) + " bytes");
  }
  pwrite_all(fd_, w.bytes().data(), w.bytes().size(), base);
  if (cfg_.fsync) sync_fd(fd_);

  std::unique_lock lock(index_mu_);
  file_end_ = base + w.bytes().size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& op = batch[i];
    auto it = index_.find(op.key);
    if (it != index_.end()) live_bytes_ -= record_size(it->second.key_len, it->second.val_len);
    if (!op.value) {
      if (it != index_.end()) index_.erase(it);
      continue;
    }
    IndexEntry e{offsets[i], op.seq, static_cast<std::uint32_t>(op.key.size()),
                 static_cast<std::uint32_t>(op.value->size()),
                 is_meta(op.key) ? std::nullopt : ts_of(*op.value)};
    index_[op.key] = e;
    live_bytes_ += record_size(e.key_len, e.val_len);
  }
}

void StateStore::sync(std::uint64_t seq) {
  std::unique_lock lock(mu_);
  check_error_locked();
  if (durable_seq_ >= seq) return;
  if (closed_) fail(ErrorCode::kClosed, "state store is closed");
  sync_requested_ = std::max(sync_requested_, seq);
  writer_cv_.notify_one();
  durable_cv_.wait(lock, [&] { return durable_seq_ >= seq || error_.has_value(); });
  check_error_locked();
}

void StateStore::flush() {
  std::uint64_t seq;
  {
    std::lock_guard lock(mu_);
    seq = next_seq_ - 1;
  }
  sync(seq);
}

std::uint64_t StateStore::durable_seq() const {
  std::lock_guard lock(mu_);
  return durable_seq_;
}

std::uint64_t StateStore::last_seq() const {
  std::lock_guard lock(mu_);
  return next_seq_ - 1;
}

CompactStats StateStore::compact() {
  flush();
  std::lock_guard io(io_mu_);
  CompactStats stats;
  std::vector<std::pair<std::string, IndexEntry>> live;
  {
    std::shared_lock lock(index_mu_);
    stats.bytes_before = file_end_;
    live.assign(index_.begin(), index_.end());
  }
  std::sort(live.begin(), live.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  const std::string tmp = path_ + ".compact";
  const int out = ::open(tmp.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
  if (out < 0) fail(ErrorCode::kIo, "cannot create " + tmp);
  std::unordered_map<std::string, IndexEntry> fresh;
  std::uint64_t end = 0;
  try {
    binary::Writer w;
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    w.put(kFormatVersion);
    for (const auto& [key, e] : live) {
      const auto value = read_value(e);
      IndexEntry moved = e;
      moved.offset = end + w.bytes().size();
      encode_record(w, key, &value, e.version);
      fresh.emplace(key, moved);
      if (w.bytes().size() >= (1u << 22)) {
        pwrite_all(out, w.bytes().data(), w.bytes().size(), end);
        end += w.bytes().size();
        w.bytes().clear();
      }
    }
    pwrite_all(out, w.bytes().data(), w.bytes().size(), end);
    end += w.bytes().size();
    if (cfg_.max_file_bytes && end > cfg_.max_file_bytes) fail(ErrorCode::kDiskFull, "compacted log too large");
    sync_fd(out);
  } catch (...) {
    ::close(out);
    ::unlink(tmp.c_str());
    throw;
  }
  if (::rename(tmp.c_str(), path_.c_str()) != 0) {
    ::close(out);
    fail(ErrorCode::kIo, "cannot replace " + path_);
  }
  sync_dir(path_);

  std::unique_lock lock(index_mu_);
  ::close(fd_);
  fd_ = out;
  index_ = std::move(fresh);
  file_end_ = end;
  stats.bytes_after = end;
  stats.live_keys = static_cast<std::size_t>(
      std::count_if(index_.begin(), index_.end(), [](const auto& kv) { return !is_meta(kv.first); }));
  return stats;
}

std::size_t StateStore::expire(TimestampMs now, std::chrono::milliseconds ttl, std::uint64_t max_bytes) {
  flush();
  struct Candidate {
    TimestampMs ts;
    std::string key;
    std::uint64_t bytes;
  };
  std::vector<Candidate> keys;
  std::uint64_t live = 0;
  {
    std::shared_lock lock(index_mu_);
    live = live_bytes_;
    for (const auto& [k, e] : index_) {
      if (is_meta(k)) continue;
      keys.push_back({e.ts.value_or(std::numeric_limits<TimestampMs>::min()), k, record_size(e.key_len, e.val_len)});
    }
  }
  std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
    return a.ts != b.ts ? a.ts < b.ts : a.key < b.key;
  });
  const TimestampMs cutoff = now - ttl.count();
  std::size_t evicted = 0;
  std::uint64_t last = 0;
  for (const auto& c : keys) {
    if (c.ts >= cutoff && live <= max_bytes) break;
    last = erase(c.key);
    live -= c.bytes;
    ++evicted;
  }
  if (last) sync(last);
  return evicted;
}

void StateStore::close() {
  {
    std::lock_guard lock(mu_);
    if (closed_) return;
    closed_ = true;
    stop_ = true;
    writer_cv_.notify_all();
  }
  if (writer_.joinable()) writer_.join();
  std::lock_guard io(io_mu_);
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
  std::lock_guard lock(mu_);
  check_error_locked();
}

bool StateStore::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

std::size_t StateStore::size() const {
  std::shared_lock lock(index_mu_);
  return static_cast<std::size_t>(
      std::count_if(index_.begin(), index_.end(), [](const auto& kv) { return !is_meta(kv.first); }));
}

std::uint64_t StateStore::live_bytes() const {
  std::shared_lock lock(index_mu_);
  return live_bytes_;
}

std::uint64_t StateStore::file_bytes() const {
  std::shared_lock lock(index_mu_);
  return file_end_;
}

std::vector<std::string> StateStore::keys() const {
  std::vector<std::string> out;
  std::shared_lock lock(index_mu_);
  for (const auto& [k, e] : index_) {
    if (!is_meta(k)) out.push_back(k);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace fraudseq
