#include <doctest.h>

#include <algorithm>
#include <map>

#include "fraudseq/error.hpp"
#include "fraudseq/pipeline.hpp"
#include "fraudseq/sequence_store.hpp"
#include "fraudseq/synth.hpp"

using namespace fraudseq;

namespace {

GenConfig small_config(std::uint64_t seed = 3) {
  GenConfig c;
  c.n_entities = 150;
  c.period_days = 30;
  c.seed = seed;
  return c;
}

std::string category(const RawEvent& e, const std::string& name) {
  for (const auto& [k, v] : e.categoricals) {
    if (k == name) return *v;
  }
  return {};
}

double amount(const RawEvent& e) { return *e.numericals.at(0).second; }

}  // namespace

TEST_CASE("fixed seed gives identical output") {
  const auto cfg = small_config();
  const auto a = generate(cfg);
  const auto b = generate(cfg);
  REQUIRE(a.size() > 1000);
  CHECK(a == b);
  const auto schema = synth_schema(cfg);
  for (std::size_t i = 0; i < a.size(); i += 97) CHECK(format_event_line(a[i], schema) == format_event_line(b[i], schema));
  CHECK(generate(small_config(4)) != a);
}

TEST_CASE("events are globally ordered and valid for the schema") {
  const auto cfg = small_config();
  const auto events = generate(cfg);
  const auto schema = synth_schema(cfg);
  for (std::size_t i = 1; i < events.size(); ++i) {
    const auto& p = events[i - 1];
    const auto& e = events[i];
    CHECK((p.ts() < e.ts() || (p.ts() == e.ts() && p.entity_id <= e.entity_id)));
  }
  for (std::size_t i = 0; i < events.size(); i += 13) {
    CHECK(parse_event_line(format_event_line(events[i], schema), schema) == events[i]);
  }
}

TEST_CASE("zero fraud card fraction gives no fraud labels") {
  auto cfg = small_config();
  cfg.fraud_card_fraction = 0.0;
  const auto s = summarize(generate(cfg));
  CHECK(s.fraud_events == 0);
  CHECK(s.fraud_cards == 0);
}

TEST_CASE("fraud ratio lands within 20% of the target on 100k events") {
  GenConfig cfg;
  cfg.n_entities = 1100;
  cfg.seed = 9;
  const auto s = summarize(generate(cfg));
  REQUIRE(s.events >= 100000);
  const double ratio = static_cast<double>(s.fraud_events) / static_cast<double>(s.legit_events);
  CHECK(ratio == doctest::Approx(cfg.fraud_ratio).epsilon(0.2));
  const double nonscorable = static_cast<double>(s.nonscorable) / static_cast<double>(s.legit_events);
  CHECK(nonscorable == doctest::Approx(cfg.nonscorable_fraction).epsilon(0.1));
}

TEST_CASE("burst gaps are below the card's legitimate median gap") {
  const auto events = generate(small_config(5));
  std::map<std::string, std::vector<const RawEvent*>> by_card;
  for (const auto& e : events) by_card[e.entity_id].push_back(&e);
  int checked = 0;
  for (const auto& [card, evs] : by_card) {
    std::vector<TimestampMs> legit_ts, fraud_ts;
    for (const auto* e : evs) (e->label == Label::kFraud ? fraud_ts : legit_ts).push_back(e->ts());
    if (fraud_ts.size() < 2 || legit_ts.size() < 3) continue;
    std::vector<TimestampMs> gaps;
    for (std::size_t i = 1; i < legit_ts.size(); ++i) gaps.push_back(legit_ts[i] - legit_ts[i - 1]);
    std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
    const auto median = gaps[gaps.size() / 2];
    for (std::size_t i = 1; i < fraud_ts.size(); ++i) CHECK(fraud_ts[i] - fraud_ts[i - 1] < median);
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("every fraud event sits in a card flagged has_fraud") {
  const auto cfg = small_config(6);
  const auto events = generate(cfg);
  const auto pipeline = FittedPipeline::fit(events, synth_schema(cfg));
  const auto store = build_sequences(events, pipeline);
  std::size_t fraud_seen = 0;
  for (const auto& r : store) {
    for (const auto& e : r.events) {
      if (e.label == Label::kFraud) {
        CHECK(r.has_fraud);
        ++fraud_seen;
      }
    }
  }
  CHECK(fraud_seen == summarize(events).fraud_events);
}

TEST_CASE("camouflaged bursts look like ordinary events") {
  auto cfg = small_config(7);
  cfg.n_entities = 400;
  cfg.fraud_card_fraction = 0.1;
  cfg.camouflage_fraction = 0.75;
  const auto events = generate(cfg);
  std::map<std::string, bool> risky_card;
  for (const auto& e : events) {
    if (e.label != Label::kFraud) continue;
    bool risky = false;
    for (const auto& c : cfg.categories) {
      const auto v = category(e, c.name);
      const int idx = std::stoi(v.substr(v.size() - 2));
      risky = risky || idx >= c.size - cfg.risky_values;
    }
    risky_card[e.entity_id] = risky_card[e.entity_id] || risky;
  }
  REQUIRE(risky_card.size() == 40);
  const auto camouflaged = std::count_if(risky_card.begin(), risky_card.end(), [](const auto& kv) { return !kv.second; });
  CHECK(camouflaged == 30);

  // camouflaged amounts follow the legitimate distribution; the others are inflated
  std::vector<double> legit, camo, loud;
  for (const auto& e : events) {
    if (e.label == Label::kLegit) legit.push_back(amount(e));
    else (risky_card[e.entity_id] ? loud : camo).push_back(amount(e));
  }
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  CHECK(median(camo) < 2.0 * median(legit));
  CHECK(median(loud) > 1.5 * median(legit));
}

TEST_CASE("config validation and JSON round trip") {
  GenConfig c;
  c.fraud_card_fraction = 0.25;
  const auto back = GenConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(GenConfig::from_json(j), Error);
  GenConfig bad;
  bad.camouflage_fraction = 1.5;
  try {
    bad.check();
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInvalidConfig);
  }
  bad = {};
  bad.categories = {{"mcc", 3}};
  CHECK_THROWS_AS(generate(bad), Error);
}
