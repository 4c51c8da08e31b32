#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "fraudseq/error.hpp"
#include "fraudseq/pipeline.hpp"
#include "fraudseq/rng.hpp"
#include "fraudseq/sequence_store.hpp"
#include "test_util.hpp"

using namespace fraudseq;
using fraudseq::testing::make_event;

namespace {

std::vector<RawEvent> fit_sample() {
  std::vector<RawEvent> out;
  Rng rng(1);
  for (int i = 0; i < 400; ++i) {
    out.push_back(make_event("c" + std::to_string(i % 17), 1600000000000 + i * 60000LL, rng.uniform(1, 300),
                             "m" + std::to_string(rng.below(8)), rng.bernoulli(0.05) ? Label::kFraud : Label::kLegit));
  }
  return out;
}

const FittedPipeline& pipeline() {
  static const FittedPipeline p = FittedPipeline::fit(fit_sample(), fraudseq::testing::small_schema());
  return p;
}

}  // namespace

TEST_CASE("build_sequences groups by entity and keeps ingestion order on equal timestamps") {
  std::vector<RawEvent> ev{make_event("a", 5000, 10, "m1"), make_event("b", 1000, 20, "m2"),
                           make_event("a", 3000, 30, "m1"), make_event("a", 3000, 40, "m3"),
                           make_event("b", 2000, 50, "m2", Label::kFraud)};
  for (std::size_t i = 0; i < ev.size(); ++i) ev[i].event_id = std::to_string(i);
  const auto store = build_sequences(ev, pipeline());
  REQUIRE(store.size() == 2);
  CHECK(store[0].entity_id == "a");
  CHECK(store[0].events.size() == 3);
  CHECK(store[0].events[0].event_id == "2");
  CHECK(store[0].events[1].event_id == "3");
  CHECK(store[0].events[2].event_id == "0");
  CHECK_FALSE(store[0].has_fraud);
  CHECK(store[1].has_fraud);
  CHECK(store.schema_hash() == pipeline().schema_hash());
  CHECK(build_sequences(std::vector<RawEvent>{}, pipeline()).empty());

  // gap feature: first event imputed, then the real difference
  const auto first = pipeline().apply(ev[2], std::nullopt);
  const auto second = pipeline().apply(ev[3], TimestampMs{3000});
  CHECK(store[0].events[0].features == first);
  CHECK(store[0].events[1].features == second);
}

TEST_CASE("build_sequences preserves the multiset of events and sorts each sequence") {
  auto ev = fit_sample();
  Rng rng(2);
  rng.shuffle(ev.begin(), ev.end());
  const auto store = build_sequences(ev, pipeline());
  std::multiset<std::string> in, out;
  for (const auto& e : ev) in.insert(e.event_id);
  for (const auto& r : store) {
    CHECK(std::is_sorted(r.events.begin(), r.events.end(), [](const auto& a, const auto& b) { return a.ts < b.ts; }));
    const bool fraud = std::any_of(r.events.begin(), r.events.end(), [](const auto& e) { return e.label == Label::kFraud; });
    CHECK(r.has_fraud == fraud);
    for (const auto& e : r.events) out.insert(e.event_id);
  }
  CHECK(in == out);
  CHECK(store.total_events() == ev.size());
}

TEST_CASE("split_fraud partitions the store") {
  const auto store = build_sequences(fit_sample(), pipeline());
  const auto [fraud, clean] = split_fraud(store);
  CHECK(fraud.size() + clean.size() == store.size());
  for (const auto& r : fraud) CHECK(r.has_fraud);
  for (const auto& r : clean) CHECK_FALSE(r.has_fraud);
  std::set<std::string> f, c;
  for (const auto& r : fraud) f.insert(r.entity_id);
  for (const auto& r : clean) c.insert(r.entity_id);
  for (const auto& id : f) CHECK(c.count(id) == 0);
}

TEST_CASE("filter_by_period keeps whole sequences touching the window") {
  std::vector<RawEvent> ev{make_event("early", 1000, 1, "m1"), make_event("early", 2000, 2, "m1"),
                           make_event("straddle", 1500, 3, "m1"), make_event("straddle", 6000, 4, "m1"),
                           make_event("late", 9000, 5, "m1")};
  const auto store = build_sequences(ev, pipeline());
  const auto kept = filter_by_period(store, 5000, 8000);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].entity_id == "straddle");
  CHECK(kept[0].events.size() == 2);
  CHECK(filter_by_period(store, 5000, 5000).empty());

  const auto cut = truncate_at(store, 2000);
  REQUIRE(cut.size() == 2);
  CHECK(cut[0].entity_id == "early");
  CHECK(cut[0].events.size() == 1);
  CHECK(cut[1].events.size() == 1);
}

TEST_CASE("sort_by_length_desc breaks ties by entity id") {
  std::vector<SequenceRecord> recs{{"b", std::vector<SequenceEvent>(3), false},
                                   {"x", std::vector<SequenceEvent>(10), false},
                                   {"c", std::vector<SequenceEvent>(7), false},
                                   {"a", std::vector<SequenceEvent>(3), false}};
  const auto sorted = sort_by_length_desc(SequenceStore(recs, 0));
  std::vector<std::string> ids;
  for (const auto& r : sorted) ids.push_back(r.entity_id);
  CHECK(ids == std::vector<std::string>{"x", "c", "a", "b"});
  const auto single = sort_by_length_desc(SequenceStore({recs[0]}, 0));
  CHECK(single[0] == recs[0]);
}

TEST_CASE("sequence files are deterministic and support random access scans") {
  const auto store = build_sequences(fit_sample(), pipeline());
  CHECK(store.serialize() == build_sequences(fit_sample(), pipeline()).serialize());
  fraudseq::testing::TempDir dir;
  store.save(dir.file("seq.bin"));
  const auto back = SequenceStore::load(dir.file("seq.bin"));
  CHECK(back.records() == store.records());
  CHECK(back.schema_hash() == store.schema_hash());

  const SequenceFileReader reader(dir.file("seq.bin"));
  REQUIRE(reader.size() == store.size());
  CHECK(reader.read(5) == store[5]);
  const auto scan = reader.scan(store.size() - 2, 4);
  REQUIRE(scan.size() == 4);
  CHECK(scan[0] == store[store.size() - 2]);
  CHECK(scan[1] == store[store.size() - 1]);
  CHECK(scan[2] == store[0]);
  CHECK(scan[3] == store[1]);

  auto bytes = store.serialize();
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(SequenceStore::deserialize(bytes), Error);
}
