#include "fraudseq/state_store.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <thread>
#include <atomic>
#include <cstring>

#include "fraudseq/error.hpp"
#include "fraudseq/rng.hpp"
#include "oracles/kv_log.hpp"
#include "test_util.hpp"

using namespace fraudseq;
using fraudseq::testing::TempDir;

namespace {

using Bytes = std::vector<std::uint8_t>;

Bytes bytes(const std::string& s) { return {s.begin(), s.end()}; }

Bytes random_value(Rng& rng, std::size_t max_len = 64) {
  Bytes v(rng.below(max_len) + 1);
  for (auto& b : v) b = static_cast<std::uint8_t>(rng.below(256));
  return v;
}

StateStoreConfig fast_config() {
  StateStoreConfig c;
  c.flush_interval = std::chrono::milliseconds(5);
  c.fsync = false;
  return c;
}

// values carry their own timestamp in the first 8 bytes
Bytes stamped(TimestampMs ts, std::size_t pad = 8) {
  Bytes v(8 + pad, 0xAB);
  std::memcpy(v.data(), &ts, 8);
  return v;
}

StateStoreConfig stamped_config() {
  auto c = fast_config();
  c.timestamp_of = [](std::span<const std::uint8_t> v) -> std::optional<TimestampMs> {
    if (v.size() < 8) return std::nullopt;
    TimestampMs ts;
    std::memcpy(&ts, v.data(), 8);
    return ts;
  };
  return c;
}

void truncate_file(const std::string& path, std::uint64_t size) { std::filesystem::resize_file(path, size); }

}  // namespace

TEST_CASE("put, get and last-writer-wins") {
  TempDir dir;
  StateStore s(dir.file("kv.log"), fast_config());
  CHECK_FALSE(s.get("nope").has_value());
  s.put("a", bytes("one"));
  CHECK(s.get("a") == bytes("one"));
  s.put("a", bytes("two"));
  CHECK(s.get("a") == bytes("two"));
  s.flush();
  CHECK(s.get("a") == bytes("two"));
  s.erase("a");
  CHECK_FALSE(s.get("a").has_value());
  s.put("empty", {});
  s.flush();
  CHECK(s.get("empty") == Bytes{});
}

TEST_CASE("closed store rejects puts and gets") {
  TempDir dir;
  StateStore s(dir.file("kv.log"), fast_config());
  s.put("a", bytes("x"));
  s.close();
  CHECK(s.closed());
  try {
    s.put("a", bytes("y"));
    FAIL("expected Closed");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kClosed);
  }
  CHECK_THROWS_AS(s.get("a"), Error);
}

TEST_CASE("sequence numbers and read-your-writes before durability") {
  TempDir dir;
  auto cfg = fast_config();
  cfg.flush_interval = std::chrono::milliseconds(10000);
  cfg.flush_records = 1000000;
  StateStore s(dir.file("kv.log"), cfg);
  const auto s1 = s.put("k", bytes("v1"));
  const auto s2 = s.put("k", bytes("v2"));
  CHECK(s2 > s1);
  CHECK(s.get("k") == bytes("v2"));
  CHECK(s.durable_seq() < s2);
  s.sync(s2);
  CHECK(s.durable_seq() >= s2);
  CHECK(s.get("k") == bytes("v2"));
}

TEST_CASE("group commit flushes on its own within the interval") {
  TempDir dir;
  StateStore s(dir.file("kv.log"), fast_config());
  const auto seq = s.put("k", bytes("v"));
  for (int i = 0; i < 400 && s.durable_seq() < seq; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  CHECK(s.durable_seq() >= seq);
}

TEST_CASE("recovery after clean shutdown, empty log and bad header") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  {
    StateStore s(path, fast_config());
    CHECK(s.size() == 0);
    CHECK(s.recovery_stats().records == 0);
  }
  {
    StateStore s(path, fast_config());
    CHECK(s.size() == 0);
    s.put("a", bytes("1"));
    s.put("b", bytes("2"));
    s.put("a", bytes("3"));
    s.erase("b");
  }
  {
    StateStore s(path, fast_config());
    CHECK(s.get("a") == bytes("3"));
    CHECK_FALSE(s.get("b").has_value());
    CHECK(s.size() == 1);
    // versions continue past recovered ones
    CHECK(s.put("c", bytes("4")) > 4);
  }
  const auto junk = dir.file("junk.log");
  std::ofstream(junk) << "definitely not a log";
  try {
    StateStore s(junk, fast_config());
    FAIL("expected UnreadableLog");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUnreadableLog);
  }
}

TEST_CASE("log truncated mid-final-record recovers all but the final record") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  {
    StateStore s(path, fast_config());
    for (int i = 0; i < 10; ++i) s.put("k" + std::to_string(i), bytes("value" + std::to_string(i)));
  }
  const auto recs = oracle::parse_log(oracle::slurp(path));
  REQUIRE(recs.size() == 10);
  truncate_file(path, recs.back().end - 3);
  StateStore s(path, fast_config());
  CHECK(s.recovery_stats().records == 9);
  CHECK(s.recovery_stats().truncated_bytes == recs.back().end - 3 - recs.back().offset);
  CHECK_FALSE(s.get("k9").has_value());
  CHECK(s.get("k8") == bytes("value8"));
  // the torn tail is cut, so new appends follow the last good record
  s.put("k9", bytes("again"));
  s.close();
  StateStore again(path, fast_config());
  CHECK(again.get("k9") == bytes("again"));
  CHECK(again.recovery_stats().truncated_bytes == 0);
}

TEST_CASE("corrupt record falls back to the previous version") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  {
    StateStore s(path, fast_config());
    s.put("a", bytes("old"));
    s.flush();
    s.put("a", bytes("new"));
    s.put("b", bytes("only"));
  }
  auto raw = oracle::slurp(path);
  const auto recs = oracle::parse_log(raw);
  REQUIRE(recs.size() == 3);
  // flip a value byte of the second "a" record and of "b"
  raw[recs[1].offset + 4 + 1 + 4] ^= 0xFF;
  raw[recs[2].offset + 4 + 1 + 4] ^= 0xFF;
  std::ofstream(path, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(raw.data()),
                                                                static_cast<std::streamsize>(raw.size()));
  StateStore s(path, fast_config());
  CHECK(s.recovery_stats().corrupt == 2);
  CHECK(s.get("a") == bytes("old"));
  CHECK_FALSE(s.get("b").has_value());
}

TEST_CASE("a record damaged after recovery surfaces as CorruptRecord") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  StateStore s(path, fast_config());
  s.put("a", bytes("value"));
  s.flush();
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8 + 4 + 1 + 4);
    f.put('X');
  }
  try {
    s.get("a");
    FAIL("expected CorruptRecord");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kCorruptRecord);
  }
}

TEST_CASE("compaction keeps one record per live key and every get") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  StateStore s(path, fast_config());
  s.put("a", bytes("1"));
  s.put("a", bytes("2"));
  s.put("a", bytes("3"));
  s.put("gone", bytes("x"));
  s.erase("gone");
  const auto stats = s.compact();
  CHECK(stats.live_keys == 1);
  CHECK(stats.bytes_after < stats.bytes_before);
  const auto recs = oracle::parse_log(oracle::slurp(path));
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].key == "a");
  CHECK(s.get("a") == bytes("3"));
  CHECK_FALSE(s.get("gone").has_value());
  s.put("b", bytes("after"));
  s.close();
  StateStore again(path, fast_config());
  CHECK(again.get("a") == bytes("3"));
  CHECK(again.get("b") == bytes("after"));
}

TEST_CASE("expired keys are dropped by compaction") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  StateStore s(path, stamped_config());
  s.put("old", stamped(1000));
  s.put("new", stamped(9000));
  CHECK(s.expire(10000, std::chrono::milliseconds(5000), UINT64_MAX) == 1);
  s.compact();
  const auto recs = oracle::parse_log(oracle::slurp(path));
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].key == "new");
}

TEST_CASE("expiry by ttl and by size budget") {
  TempDir dir;
  StateStore s(dir.file("kv.log"), stamped_config());
  SUBCASE("all fresh and under budget") {
    s.put("a", stamped(100));
    s.put("b", stamped(200));
    CHECK(s.expire(300, std::chrono::milliseconds(1000), UINT64_MAX) == 0);
    CHECK(s.size() == 2);
  }
  SUBCASE("idle beyond ttl") {
    s.put("idle", stamped(100));
    s.put("busy", stamped(5000));
    CHECK(s.expire(6000, std::chrono::milliseconds(1000), UINT64_MAX) == 1);
    CHECK_FALSE(s.get("idle").has_value());
    CHECK(s.get("busy").has_value());
  }
  SUBCASE("over budget evicts oldest first") {
    for (int i = 0; i < 10; ++i) s.put("k" + std::to_string(i), stamped(1000 + (9 - i) * 10));
    const auto one = StateStore::record_size(2, 16);
    CHECK(s.expire(2000, std::chrono::milliseconds(100000), 6 * one) == 4);
    CHECK(s.live_bytes() <= 6 * one);
    // k9..k6 carry the smallest timestamps
    for (int i = 6; i < 10; ++i) CHECK_FALSE(s.get("k" + std::to_string(i)).has_value());
    for (int i = 0; i < 6; ++i) CHECK(s.get("k" + std::to_string(i)).has_value());
  }
  SUBCASE("meta keys never expire") {
    s.put_meta("watermark", bytes("42"));
    s.put("a", stamped(1));
    CHECK(s.expire(1000000, std::chrono::milliseconds(1), 0) == 1);
    CHECK(s.get_meta("watermark") == bytes("42"));
    CHECK(s.size() == 0);
  }
}

TEST_CASE("simulated full device reports DiskFull") {
  TempDir dir;
  auto cfg = fast_config();
  cfg.max_file_bytes = 200;
  StateStore s(dir.file("kv.log"), cfg);
  Bytes big(500, 1);
  const auto seq = s.put("k", big);
  try {
    s.sync(seq);
    FAIL("expected DiskFull");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDiskFull);
  }
  CHECK_THROWS_AS(s.put("k2", bytes("x")), Error);
}

TEST_CASE("concurrent readers see whole values while the writer appends") {
  TempDir dir;
  StateStore s(dir.file("kv.log"), fast_config());
  std::atomic<bool> done{false};
  std::atomic<int> bad{0};
  std::vector<std::thread> readers;
  for (int r = 0; r < 3; ++r) {
    readers.emplace_back([&] {
      while (!done) {
        for (int k = 0; k < 20; ++k) {
          const auto v = s.get("k" + std::to_string(k));
          if (v && (v->size() != 32 || std::adjacent_find(v->begin(), v->end(), std::not_equal_to<>()) != v->end())) {
            ++bad;
          }
        }
      }
    });
  }
  for (int i = 0; i < 3000; ++i) {
    s.put("k" + std::to_string(i % 20), Bytes(32, static_cast<std::uint8_t>(i)));
    if (i == 1500) s.compact();
  }
  s.flush();
  done = true;
  for (auto& t : readers) t.join();
  CHECK(bad == 0);
}

TEST_CASE("property: any record-boundary prefix recovers exactly that prefix") {
  TempDir dir;
  const auto path = dir.file("kv.log");
  Rng rng(7);
  {
    auto cfg = fast_config();
    cfg.flush_records = 17;
    StateStore s(path, cfg);
    for (int i = 0; i < 600; ++i) {
      const auto key = "card" + std::to_string(rng.below(40));
      if (rng.bernoulli(0.1)) s.erase(key);
      else s.put(key, random_value(rng));
    }
  }
  const auto raw = oracle::slurp(path);
  const auto recs = oracle::parse_log(raw);
  REQUIRE(recs.size() == 600);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = rng.below(recs.size() + 1);
    const std::uint64_t cut = n == 0 ? 8 : recs[n - 1].end;
    const auto copy = dir.file("prefix" + std::to_string(trial) + ".log");
    std::ofstream(copy, std::ios::binary).write(reinterpret_cast<const char*>(raw.data()),
                                                static_cast<std::streamsize>(cut));
    const auto expected = oracle::replay(recs, n);
    StateStore s(copy, fast_config());
    CHECK(s.size() == expected.size());
    for (const auto& [k, v] : expected) CHECK(s.get(k) == v);
    std::vector<std::string> keys;
    for (const auto& [k, v] : expected) keys.push_back(k);
    CHECK(s.keys() == keys);
  }
}

TEST_CASE("property: compaction preserves the visible map and the size bound") {
  TempDir dir;
  Rng rng(11);
  StateStore s(dir.file("kv.log"), fast_config());
  std::map<std::string, Bytes> model;
  std::size_t max_val = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto key = "e" + std::to_string(rng.below(100));
    if (rng.bernoulli(0.05)) {
      s.erase(key);
      model.erase(key);
    } else {
      auto v = random_value(rng, 48);
      max_val = std::max(max_val, v.size());
      s.put(key, v);
      model[key] = std::move(v);
    }
  }
  s.compact();
  CHECK(s.size() == model.size());
  for (const auto& [k, v] : model) CHECK(s.get(k) == v);
  CHECK(s.file_bytes() <= 8 + model.size() * StateStore::record_size(4, max_val));
}
